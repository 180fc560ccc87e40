//! Executable bit-recovery experiments against compressed caches.
//!
//! A spherical code of `m` near-orthogonal unit codewords turns an `m×d` bit
//! matrix into a KV cache: querying along codeword `i` makes its own weight
//! exactly `L = e^rho` while every cross weight stays at most `e^{rho·eta}`.
//! Thresholding the (sign-unmasked) attention coordinate against `L/(2B)`
//! then recovers the planted bit unless the cross-key noise is large. On a
//! reduced cache the signal term vanishes for dropped pairs, which is what
//! drives the recovery-rate gap the experiments measure.

use serde::Serialize;

use crate::attention::{attn, KvCache, Query};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{derive_seed, rng_from, unit_vector};
use crate::vecmath::dot;

/// Unit codewords with pairwise inner products at most `eta`.
#[derive(Debug, Clone, Serialize)]
pub struct SphericalCode {
    pub codewords: Vec<Vec<f64>>,
    /// Achieved maximum pairwise inner product.
    pub eta: f64,
    pub d_k: usize,
}

impl SphericalCode {
    pub fn m(&self) -> usize {
        self.codewords.len()
    }
}

/// Seeded rejection sampling of a spherical code: batches of `m` random unit
/// vectors are drawn until all pairwise inner products fall below `eta`.
/// `eta == 0` is served by the orthonormal basis fast path (needs `m <= d_k`).
pub fn spherical_code(
    m: usize,
    d_k: usize,
    eta: f64,
    seed: u64,
    max_tries: usize,
) -> Result<SphericalCode> {
    assert!(m >= 1);
    assert!((0.0..=0.5).contains(&eta));
    if eta == 0.0 {
        if m <= d_k {
            let codewords = (0..m)
                .map(|i| {
                    let mut v = vec![0.0; d_k];
                    v[i] = 1.0;
                    v
                })
                .collect();
            return Ok(SphericalCode {
                codewords,
                eta: 0.0,
                d_k,
            });
        }
        return Err(Error::CodeNotFound {
            best_eta: 1.0,
            target_eta: 0.0,
            tries: 0,
        });
    }
    let mut rng = rng_from(seed, 0x636f6465);
    let mut best = f64::INFINITY;
    for tri in 0..max_tries {
        let batch: Vec<Vec<f64>> = (0..m).map(|_| unit_vector(d_k, &mut rng)).collect();
        let mut worst: f64 = f64::NEG_INFINITY;
        for i in 0..m {
            for h in i + 1..m {
                worst = worst.max(dot(&batch[i], &batch[h]));
            }
        }
        let worst = if m == 1 { 0.0 } else { worst };
        best = best.min(worst);
        if worst <= eta {
            return Ok(SphericalCode {
                codewords: batch,
                eta: worst.max(0.0),
                d_k,
            });
        }
        let _ = tri;
    }
    Err(Error::CodeNotFound {
        best_eta: best,
        target_eta: eta,
        tries: max_tries,
    })
}

/// Which reduction shape to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LbVariant {
    /// `m` pairs; bit `(i,j)` rides coordinate `j` of value `i`, scaled `1/sqrt(d)`.
    SketchLb,
    /// `m·d` pairs; bit `(i,j)` is its own pair with value `±e_j`.
    CoresetLb,
}

/// A planted-bit KV instance: bits, public signs, codewords and the cache.
#[derive(Debug, Clone)]
pub struct IndexingInstance {
    /// `m×d` bits, row-major.
    pub bits: Vec<u8>,
    /// `m×d` public signs.
    pub signs: Vec<i8>,
    pub m: usize,
    pub d: usize,
    pub code: SphericalCode,
    pub cache: KvCache,
    pub variant: LbVariant,
    pub rho: f64,
    /// `L = e^rho`, the own-codeword weight.
    pub big_l: f64,
}

impl IndexingInstance {
    pub fn bit(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.d + j]
    }

    pub fn sign(&self, i: usize, j: usize) -> i8 {
        self.signs[i * self.d + j]
    }

    /// `w_{ih} = exp(rho <u_i, u_h>)`.
    pub fn weight(&self, i: usize, h: usize) -> f64 {
        (self.rho * dot(&self.code.codewords[i], &self.code.codewords[h])).exp()
    }

    /// Exact full-instance softmax denominator for the query `rho·u_i`,
    /// computed from the codewords alone.
    pub fn exact_denominator(&self, i: usize) -> f64 {
        let sum: f64 = (0..self.m).map(|h| self.weight(i, h)).sum();
        match self.variant {
            LbVariant::SketchLb => sum,
            LbVariant::CoresetLb => self.d as f64 * sum,
        }
    }

    /// Cross-key noise `N_{ij}` of the exact instance.
    pub fn noise_term(&self, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for h in 0..self.m {
            if h == i {
                continue;
            }
            acc += self.weight(i, h)
                * (self.sign(i, j) as f64)
                * (self.sign(h, j) as f64)
                * self.bit(h, j) as f64;
        }
        match self.variant {
            LbVariant::SketchLb => acc / (self.d as f64).sqrt(),
            LbVariant::CoresetLb => acc,
        }
    }

    /// The decoding query `rho·u_i`.
    pub fn query(&self, i: usize) -> Query {
        let q: Vec<f64> = self.code.codewords[i]
            .iter()
            .map(|x| self.rho * x)
            .collect();
        Query::new(q, self.rho * (1.0 + 1e-12)).expect("codewords are unit norm")
    }
}

/// Builds the cache of a planted-bit instance. `bits` is `m×d` row-major with
/// `m = code.m()`; public signs are drawn from `seed`.
pub fn build_instance(
    bits: &[u8],
    d: usize,
    variant: LbVariant,
    rho: f64,
    code: &SphericalCode,
    seed: u64,
) -> Result<IndexingInstance> {
    let m = code.m();
    if bits.len() != m * d {
        return Err(Error::Dimension {
            context: "instance bits",
            expected: m * d,
            actual: bits.len(),
        });
    }
    let mut rng = rng_from(seed, 0x7369676e73);
    use rand::Rng;
    let signs: Vec<i8> = (0..m * d)
        .map(|_| if rng.random::<bool>() { 1 } else { -1 })
        .collect();
    let d_k = code.d_k;
    let cache = match variant {
        LbVariant::SketchLb => {
            let mut keys = Vec::with_capacity(m * d_k);
            let mut values = Vec::with_capacity(m * d);
            let scale = 1.0 / (d as f64).sqrt();
            for i in 0..m {
                keys.extend_from_slice(&code.codewords[i]);
                for j in 0..d {
                    values.push(signs[i * d + j] as f64 * bits[i * d + j] as f64 * scale);
                }
            }
            KvCache::from_flat(keys, values, m, d_k, d)?
        }
        LbVariant::CoresetLb => {
            let n = m * d;
            let mut keys = Vec::with_capacity(n * d_k);
            let mut values = vec![0.0; n * d];
            for i in 0..m {
                for j in 0..d {
                    keys.extend_from_slice(&code.codewords[i]);
                    let row = i * d + j;
                    values[row * d + j] = signs[row] as f64 * bits[row] as f64;
                }
            }
            KvCache::from_flat(keys, values, n, d_k, d)?
        }
    };
    Ok(IndexingInstance {
        bits: bits.to_vec(),
        signs,
        m,
        d,
        code: code.clone(),
        cache,
        variant,
        rho,
        big_l: rho.exp(),
    })
}

/// Decodes bit `(i,j)` from attention coordinate `j` at query `rho·u_i`:
/// un-mask with the public sign and threshold against `L/(2B)` (with the
/// extra `1/sqrt(d)` for the sketch-shaped instance).
pub fn decode_bit(
    instance: &IndexingInstance,
    attn_output_j: f64,
    i: usize,
    j: usize,
    b_value: f64,
) -> u8 {
    let threshold = match instance.variant {
        LbVariant::SketchLb => instance.big_l / (2.0 * (instance.d as f64).sqrt() * b_value),
        LbVariant::CoresetLb => instance.big_l / (2.0 * b_value),
    };
    u8::from(instance.sign(i, j) as f64 * attn_output_j > threshold)
}

/// How the cache is reduced before decoding.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LbMethod {
    /// Keep a seeded uniform subset of the pairs.
    Subsample,
    /// Run the compressor to the target size (capacity limits of explicit
    /// features apply at large key dimensions).
    Coreset { eps: f64, max_degree: usize },
}

/// Parameters of one experiment family.
#[derive(Debug, Clone, Serialize)]
pub struct LbParams {
    pub rho: f64,
    pub d_k: usize,
    pub d: usize,
    pub m: usize,
    pub eta: f64,
    pub variant: LbVariant,
    /// `None` decodes the full cache only.
    pub target_size: Option<usize>,
    pub max_tries: usize,
}

impl LbParams {
    /// Defaults mirror the desk-scale regime: `rho=5`, `d_k=128`, `d=8`,
    /// `m=16`, `eta = 1/rho`.
    pub fn desk_scale() -> Self {
        Self {
            rho: 5.0,
            d_k: 128,
            d: 8,
            m: 16,
            eta: 1.0 / 5.0,
            variant: LbVariant::CoresetLb,
            target_size: None,
            max_tries: 1000,
        }
    }

    /// Chebyshev regime figure `100 e^2 m / L^2`; decoding is reliable when
    /// this is small, though measured noise is usually far smaller.
    pub fn chebyshev_figure(&self) -> f64 {
        let l = self.rho.exp();
        100.0 * std::f64::consts::E.powi(2) * self.m as f64 / (l * l)
    }
}

/// One trial's outcome.
#[derive(Debug, Clone, Serialize)]
pub struct TrialOutcome {
    pub full_rate: f64,
    pub reduced_rate: Option<f64>,
    pub reduced_size: Option<usize>,
    /// Per-bit predictions on the full cache, row-major `m×d`.
    pub full_predictions: Vec<u8>,
    pub noise_abs_max: f64,
    pub noise_var: f64,
    /// Bits whose measured `|N_{ij}| <= L/10` that still decoded wrong (must
    /// be zero for exact attention).
    pub separated_misdecodes: usize,
}

/// Aggregate report of a recovery experiment.
#[derive(Debug, Clone, Serialize)]
pub struct DecodeReport {
    pub params: LbParams,
    pub trials: Vec<TrialOutcome>,
    pub full_rate_median: f64,
    pub reduced_rate_median: Option<f64>,
    /// Fraction of trials where the reduced cache recovered strictly fewer
    /// bits than the full cache.
    pub reduced_strictly_worse_frac: Option<f64>,
    pub chebyshev_figure: f64,
    pub regime_warning: bool,
    /// Theoretical noise variance cap `e^2·m` (CoresetLb; `/d` for SketchLb).
    pub noise_var_bound: f64,
}

fn decode_rate(
    instance: &IndexingInstance,
    cache: &KvCache,
    predictions: Option<&mut Vec<u8>>,
) -> Result<f64> {
    let results: Vec<(usize, Vec<u8>)> = exec::map_indexed(instance.m, |i| {
        let q = instance.query(i);
        let out = attn(&q, cache).expect("instance dims");
        let b = instance.exact_denominator(i);
        let mut row = Vec::with_capacity(instance.d);
        let mut correct = 0usize;
        for j in 0..instance.d {
            let bit = decode_bit(instance, out[j], i, j, b);
            if bit == instance.bit(i, j) {
                correct += 1;
            }
            row.push(bit);
        }
        (correct, row)
    });
    let total: usize = results.iter().map(|(c, _)| c).sum();
    if let Some(pred) = predictions {
        pred.clear();
        for (_, row) in &results {
            pred.extend_from_slice(row);
        }
    }
    Ok(total as f64 / (instance.m * instance.d) as f64)
}

fn reduce_cache(
    instance: &IndexingInstance,
    method: &LbMethod,
    target: usize,
    seed: u64,
) -> Result<KvCache> {
    match method {
        LbMethod::Subsample => {
            let n = instance.cache.n();
            let take = target.min(n).max(1);
            let mut ids: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            let mut rng = rng_from(seed, 0x737562);
            ids.shuffle(&mut rng);
            ids.truncate(take);
            ids.sort_unstable();
            instance.cache.select(&ids)
        }
        LbMethod::Coreset { eps, max_degree } => {
            let (pre, record) = crate::attention::preprocess(&instance.cache)?;
            let policy = crate::compress::CompressPolicy {
                target_size: Some(target),
                max_degree: *max_degree,
                base_seed: seed,
                ..Default::default()
            };
            let rho_eff = instance.rho * record.key_scale;
            let out = crate::compress::compress(&pre, rho_eff, *eps, &policy)?;
            out.coreset.final_cache.denormalize(&record)
        }
    }
}

/// Runs `trials` independent planted-bit experiments: build, optionally
/// reduce, decode everything, and report rates plus noise statistics.
pub fn recovery_experiment(
    params: &LbParams,
    method: &LbMethod,
    trials: usize,
    seed: u64,
) -> Result<DecodeReport> {
    assert!(trials >= 1);
    let chebyshev = params.chebyshev_figure();
    let regime_warning = chebyshev > 0.25;
    let noise_var_bound = match params.variant {
        LbVariant::SketchLb => {
            std::f64::consts::E.powi(2) * params.m as f64 / params.d as f64
        }
        LbVariant::CoresetLb => std::f64::consts::E.powi(2) * params.m as f64,
    };

    let mut outcomes = Vec::with_capacity(trials);
    for t in 0..trials {
        let tseed = derive_seed(seed, t as u64);
        let code = spherical_code(
            params.m,
            params.d_k,
            params.eta,
            derive_seed(tseed, 1),
            params.max_tries,
        )?;
        let mut rng = rng_from(tseed, 2);
        use rand::Rng;
        let bits: Vec<u8> = (0..params.m * params.d)
            .map(|_| u8::from(rng.random::<bool>()))
            .collect();
        let instance = build_instance(
            &bits,
            params.d,
            params.variant,
            params.rho,
            &code,
            derive_seed(tseed, 3),
        )?;

        let mut predictions = Vec::new();
        let full_rate = decode_rate(&instance, &instance.cache, Some(&mut predictions))?;

        // noise statistics and the signal-separation check
        let mut noise_abs_max = 0.0f64;
        let mut noise_sq_sum = 0.0;
        let mut separated_misdecodes = 0usize;
        for i in 0..params.m {
            for j in 0..params.d {
                let nij = instance.noise_term(i, j);
                noise_abs_max = noise_abs_max.max(nij.abs());
                noise_sq_sum += nij * nij;
                if nij.abs() <= instance.big_l / 10.0
                    && predictions[i * params.d + j] != instance.bit(i, j)
                {
                    separated_misdecodes += 1;
                }
            }
        }
        let noise_var = noise_sq_sum / (params.m * params.d) as f64;

        let (reduced_rate, reduced_size) = match params.target_size {
            None => (None, None),
            Some(target) => {
                let reduced = reduce_cache(&instance, method, target, derive_seed(tseed, 4))?;
                let rate = decode_rate(&instance, &reduced, None)?;
                (Some(rate), Some(reduced.n()))
            }
        };

        outcomes.push(TrialOutcome {
            full_rate,
            reduced_rate,
            reduced_size,
            full_predictions: predictions,
            noise_abs_max,
            noise_var,
            separated_misdecodes,
        });
    }

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        v[(v.len() - 1) / 2]
    };
    let full_rate_median = median(outcomes.iter().map(|o| o.full_rate).collect());
    let reduced_rates: Vec<f64> = outcomes.iter().filter_map(|o| o.reduced_rate).collect();
    let reduced_rate_median = if reduced_rates.is_empty() {
        None
    } else {
        Some(median(reduced_rates))
    };
    let reduced_strictly_worse_frac = if params.target_size.is_some() {
        let worse = outcomes
            .iter()
            .filter(|o| o.reduced_rate.map(|r| r < o.full_rate).unwrap_or(false))
            .count();
        Some(worse as f64 / outcomes.len() as f64)
    } else {
        None
    };

    Ok(DecodeReport {
        params: params.clone(),
        trials: outcomes,
        full_rate_median,
        reduced_rate_median,
        reduced_strictly_worse_frac,
        chebyshev_figure: chebyshev,
        regime_warning,
        noise_var_bound,
    })
}
