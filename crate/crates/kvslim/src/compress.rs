//! The compression loop: repeated simultaneous-balanced halving.
//!
//! One step embeds every cached pair into the numerator features, the
//! denominator features and the raw key-sum objective, balances all three
//! with one sign vector, and keeps the minority side. The step error is
//! accounted twice over: a degree-weighted star-norm series bound on the
//! signed sums, and (in the default `Measured` mode) the actual maximum
//! errors over a fresh query suite. Steps accumulate into an attention-level
//! budget `Σ (2δ_A + 2δ_B)/B_lower` that must stay below the target; a step
//! that would overshoot is rolled back and compression stops.

use serde::Serialize;

use crate::attention::{KvCache, NormalizationRecord};
use crate::balance::{balance_best_of, halve_select, BalanceObjective, ObjectiveId, WalkTrial};
use crate::error::{Error, Result};
use crate::exec;
use crate::features::{
    choose_truncation_degree, denominator_embed, embed, truncation_tail, BlockSum,
    EmbeddingConfig, FeatureVector, DEFAULT_DIM_CAP,
};
use crate::rng::derive_seed;
use crate::verify::{
    build_query_suite, empirical_error, error_series_bound, star_norms, StarNormEstimate,
    StarNormOptions, Stats, SuiteCounts,
};
use crate::vecmath::norm;

/// Where per-step error estimates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Star-norm series bounds only (no query evaluation).
    TheoryModel,
    /// Maximum errors measured over a per-step query suite (default).
    Measured,
}

/// Effective radius `zeta = rho + ln(rho)/2 + ln(ln(max(rho, e)))`. Reporting
/// only; stopping decisions use measured quantities.
pub fn zeta(rho: f64) -> f64 {
    rho + 0.5 * rho.ln() + rho.max(std::f64::consts::E).ln().ln()
}

/// Error budget of a run: target, per-step estimates, and their source.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetModel {
    pub rho: f64,
    pub zeta: f64,
    pub eps_target: f64,
    /// One attention-level estimate `(2δ_A + 2δ_B)/B_lower` per accepted
    /// step; δ's are measured suite maxima in `Measured` mode and star-norm
    /// series bounds in `TheoryModel` mode.
    pub per_step_error_estimates: Vec<f64>,
    pub mode: BudgetMode,
}

impl BudgetModel {
    pub fn new(rho: f64, eps: f64, mode: BudgetMode) -> Self {
        Self {
            rho,
            zeta: zeta(rho),
            eps_target: eps,
            per_step_error_estimates: Vec::new(),
            mode,
        }
    }

    pub fn accumulated(&self) -> f64 {
        self.per_step_error_estimates.iter().sum()
    }
}

/// Measured maxima of one step over its query suite.
#[derive(Debug, Clone, Serialize)]
pub struct StepMeasurement {
    pub suite_len: usize,
    pub numerator: Stats,
    pub denominator: Stats,
    pub attn: Stats,
}

/// Everything recorded about one halving.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub n_before: usize,
    pub n_after: usize,
    pub truncation_degree: usize,
    pub seeds: Vec<u64>,
    pub winning_combined: f64,
    pub trials: Vec<WalkTrial>,
    pub discrepancies: Vec<(ObjectiveId, f64)>,
    pub star_norms_numerator: Vec<StarNormEstimate>,
    pub star_norms_denominator: Vec<StarNormEstimate>,
    /// `Σ_m z(m) rho^m ‖S_m‖⋆ / m! + n·tail` over the numerator blocks.
    pub series_bound_numerator: f64,
    pub series_bound_denominator: f64,
    pub tail_per_item: f64,
    pub tail_charge: f64,
    pub keysum_norm_before: f64,
    pub keysum_norm_after: f64,
    /// Jensen-style denominator floor `n · exp(−rho‖Σk‖/n)` of the pre-step
    /// cache.
    pub b_lower: f64,
    /// Numerator/denominator step errors per the budget mode.
    pub delta_a: f64,
    pub delta_b: f64,
    /// Attention-level step estimate `(2δ_A + 2δ_B)/B_lower`.
    pub step_attn_estimate: f64,
    pub measured: Option<StepMeasurement>,
    pub degenerate: bool,
    /// Indices kept by this step, local to the step's input cache.
    #[serde(skip)]
    pub kept_local: Vec<usize>,
}

/// Options of a single halving step.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub rho: f64,
    pub seeds: Vec<u64>,
    pub star_norm: StarNormOptions,
}

/// Numerator feature vectors of a whole cache.
pub fn embed_cache(cache: &KvCache, cfg: &EmbeddingConfig) -> Result<Vec<FeatureVector>> {
    let results = exec::map_indexed(cache.n(), |i| embed(cache.key(i), cache.value(i), cfg));
    results.into_iter().collect()
}

/// Denominator feature vectors of a whole cache.
pub fn embed_cache_denominator(
    cache: &KvCache,
    cfg: &EmbeddingConfig,
) -> Result<Vec<FeatureVector>> {
    let results = exec::map_indexed(cache.n(), |i| denominator_embed(cache.key(i), cfg));
    results.into_iter().collect()
}

/// One simultaneous-balanced halving: numerator features, denominator
/// features and raw keys are packed with weight `1/sqrt(3)`, balanced with
/// best-of-seeds walks, and the minority side is kept. The report carries
/// discrepancies, star norms of the signed sums, series bounds and the
/// truncation charge; measured errors are filled in by [`compress`].
pub fn halving_step(
    cache: &KvCache,
    cfg: &EmbeddingConfig,
    opts: &StepOptions,
) -> Result<(KvCache, StepReport)> {
    if cache.n() < 2 {
        return Err(Error::NoProgress);
    }
    let numerator_items = embed_cache(cache, cfg)?;
    let denominator_items = embed_cache_denominator(cache, cfg)?;
    let w = 1.0 / 3.0f64.sqrt();
    let objectives = vec![
        BalanceObjective::new(ObjectiveId::Numerator, numerator_items).with_weight(w),
        BalanceObjective::new(ObjectiveId::Denominator, denominator_items).with_weight(w),
        BalanceObjective::keysum(cache).with_weight(w),
    ];
    let (assignment, trials) = balance_best_of(&objectives, &opts.seeds)?;
    let (half, note) = halve_select(cache, &assignment)?;
    if note.degenerate {
        return Err(Error::NoProgress);
    }

    let star_seed = derive_seed(opts.seeds.first().copied().unwrap_or(0), 0x73746172);
    let num_sum = BlockSum::signed(&objectives[0].items, &assignment.signs);
    let den_sum = BlockSum::signed(&objectives[1].items, &assignment.signs);
    let star_num = star_norms(&num_sum, cfg, &opts.star_norm, star_seed);
    let star_den = star_norms(&den_sum, cfg, &opts.star_norm, derive_seed(star_seed, 1));
    let num_values: Vec<f64> = star_num.iter().map(|e| e.value).collect();
    let den_values: Vec<f64> = star_den.iter().map(|e| e.value).collect();
    let series_num = error_series_bound(&num_values, opts.rho, cache.n());
    let series_den = error_series_bound(&den_values, opts.rho, cache.n());

    let tail = truncation_tail(opts.rho, cfg.truncation_degree());
    let keysum_before = norm(&cache.key_sum());
    let keysum_after = norm(&half.key_sum());
    let b_lower = cache.n() as f64 * (-opts.rho * keysum_before / cache.n() as f64).exp();

    Ok((
        half,
        StepReport {
            n_before: cache.n(),
            n_after: note.kept.len(),
            truncation_degree: cfg.truncation_degree(),
            seeds: opts.seeds.clone(),
            winning_combined: assignment.combined,
            trials,
            discrepancies: assignment.per_objective_discrepancy.clone(),
            star_norms_numerator: star_num,
            star_norms_denominator: star_den,
            series_bound_numerator: series_num,
            series_bound_denominator: series_den,
            tail_per_item: tail,
            tail_charge: cache.n() as f64 * tail,
            keysum_norm_before: keysum_before,
            keysum_norm_after: keysum_after,
            b_lower,
            delta_a: series_num,
            delta_b: series_den,
            step_attn_estimate: (2.0 * series_num + 2.0 * series_den) / b_lower,
            measured: None,
            degenerate: false,
            kept_local: note.kept,
        },
    ))
}

/// Accumulated attention-error bound of the recorded steps, with the
/// denominator-safety check `δ_B <= B_lower/2` per step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorPrediction {
    pub bound: f64,
    pub denominator_safe: bool,
}

pub fn predict_error(steps: &[StepReport]) -> ErrorPrediction {
    let mut bound = 0.0;
    let mut safe = true;
    for s in steps {
        bound += (2.0 * s.delta_a + 2.0 * s.delta_b) / s.b_lower;
        if s.delta_b > s.b_lower / 2.0 {
            safe = false;
        }
    }
    ErrorPrediction {
        bound,
        denominator_safe: safe,
    }
}

/// Size and effort knobs of [`compress`].
#[derive(Debug, Clone, Serialize)]
pub struct CompressPolicy {
    pub target_size: Option<usize>,
    pub max_steps: Option<usize>,
    pub seeds_per_step: usize,
    pub max_degree: usize,
    pub dim_cap: usize,
    pub mode: BudgetMode,
    pub suite: SuiteCounts,
    pub star_norm: StarNormOptions,
    pub base_seed: u64,
    /// Subtract the key mean between steps when drift exceeds the allowance
    /// (off by default; the key-sum objective keeps drift small instead, and
    /// exceeding the allowance is then a hard error).
    pub recenter: bool,
}

impl Default for CompressPolicy {
    fn default() -> Self {
        Self {
            target_size: None,
            max_steps: None,
            seeds_per_step: 16,
            max_degree: 16,
            dim_cap: DEFAULT_DIM_CAP,
            mode: BudgetMode::Measured,
            suite: SuiteCounts::default(),
            star_norm: StarNormOptions {
                restarts: 8,
                max_iters: 120,
                tol: 1e-10,
            },
            base_seed: 0,
            recenter: false,
        }
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The next halving would overflow the error budget.
    BudgetExhausted,
    /// Reached the requested target size.
    TargetReached,
    /// Nothing left to halve (n < 2).
    MinSize,
    /// Step limit hit.
    MaxSteps,
    /// The balancer put every item on one side.
    NoProgress,
    /// The next step failed the `δ_B <= B_lower/2` safety check.
    ValidityFloor,
}

/// A subset of the original cache with full per-step provenance. Attention
/// on the coreset needs no reweighting: numerator and denominator carry the
/// same implicit doubling factors, which cancel in the ratio.
#[derive(Debug, Clone, Serialize)]
pub struct Coreset {
    /// Ascending indices into the cache that was compressed.
    pub indices: Vec<usize>,
    pub steps: Vec<StepReport>,
    #[serde(skip)]
    pub final_cache: KvCache,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionOutcome {
    pub coreset: Coreset,
    pub budget: BudgetModel,
    pub stop_reason: StopReason,
    pub prediction: ErrorPrediction,
    /// Key-sum drift allowance `sqrt(10 d_k) · log2(n_0)` the run was checked
    /// against.
    pub keysum_allowance: f64,
}

/// Compresses a preprocessed cache until the error budget, a size target, or
/// a structural stop is hit. Each candidate step is measured (or bounded)
/// before acceptance; a step that would push the accumulated estimate over
/// `eps` is rolled back, so an unachievable `eps` yields the trivial
/// full-index coreset.
pub fn compress(
    cache: &KvCache,
    rho: f64,
    eps: f64,
    policy: &CompressPolicy,
) -> Result<CompressionOutcome> {
    if !cache.is_preprocessed() {
        return Err(Error::NotPreprocessed);
    }
    assert!(rho > 0.0 && eps > 0.0);
    let n0 = cache.n();
    let keysum_allowance = (10.0 * cache.d_k() as f64).sqrt() * (n0 as f64).log2().max(1.0);
    let mut budget = BudgetModel::new(rho, eps, policy.mode);
    let mut current = cache.clone();
    let mut indices: Vec<usize> = (0..n0).collect();
    let mut steps: Vec<StepReport> = Vec::new();
    let mut step_index = 0usize;
    let stop_reason;

    loop {
        if let Some(t) = policy.target_size {
            if current.n() <= t {
                stop_reason = StopReason::TargetReached;
                break;
            }
        }
        if current.n() < 2 {
            stop_reason = StopReason::MinSize;
            break;
        }
        if let Some(ms) = policy.max_steps {
            if step_index >= ms {
                stop_reason = StopReason::MaxSteps;
                break;
            }
        }
        let keysum = norm(&current.key_sum());
        if keysum > keysum_allowance {
            if policy.recenter {
                recenter_keys(&mut current);
            } else {
                return Err(Error::CenteringDrift {
                    norm: keysum,
                    allowance: keysum_allowance,
                });
            }
        }

        let eps_tail = eps / (8.0 * current.n() as f64);
        let degree = choose_truncation_degree(rho, eps_tail, policy.max_degree);
        let cfg = EmbeddingConfig::new(
            degree,
            current.d_k(),
            current.d_v(),
            current.d_k() >= 4,
            policy.dim_cap,
        )?;
        let seeds: Vec<u64> = (0..policy.seeds_per_step)
            .map(|s| derive_seed(policy.base_seed, ((step_index as u64) << 32) | s as u64))
            .collect();
        let opts = StepOptions {
            rho,
            seeds,
            star_norm: policy.star_norm,
        };
        let (half, mut report) = match halving_step(&current, &cfg, &opts) {
            Ok(v) => v,
            Err(Error::NoProgress) => {
                stop_reason = StopReason::NoProgress;
                break;
            }
            Err(e) => return Err(e),
        };

        if policy.mode == BudgetMode::Measured {
            let suite_seed = derive_seed(policy.base_seed, 0xe0a1 + step_index as u64);
            let suite = build_query_suite(
                &current,
                rho,
                policy.suite,
                suite_seed,
                Some((&current, &half)),
            );
            let err = empirical_error(&suite, &current, &half)?;
            report.delta_a = err.numerator.max;
            report.delta_b = err.denominator.max;
            report.step_attn_estimate =
                (2.0 * report.delta_a + 2.0 * report.delta_b) / report.b_lower;
            report.measured = Some(StepMeasurement {
                suite_len: suite.len(),
                numerator: err.numerator,
                denominator: err.denominator,
                attn: err.attn,
            });
        }

        if report.delta_b > report.b_lower / 2.0 {
            stop_reason = StopReason::ValidityFloor;
            break;
        }
        if budget.accumulated() + report.step_attn_estimate > eps {
            stop_reason = StopReason::BudgetExhausted;
            break;
        }

        budget
            .per_step_error_estimates
            .push(report.step_attn_estimate);
        indices = report.kept_local.iter().map(|&i| indices[i]).collect();
        steps.push(report);
        current = half;
        step_index += 1;
    }

    let prediction = predict_error(&steps);
    Ok(CompressionOutcome {
        coreset: Coreset {
            indices,
            steps,
            final_cache: current,
        },
        budget,
        stop_reason,
        prediction,
        keysum_allowance,
    })
}

/// Subtracts the key mean in place. Translation leaves attention unchanged;
/// norms may exceed one afterwards, which only weakens the packing bound.
fn recenter_keys(cache: &mut KvCache) {
    let n = cache.n();
    let d_k = cache.d_k();
    let mut mean = vec![0.0; d_k];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(cache.key(i)) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let values: Vec<Vec<f64>> = (0..n).map(|i| cache.value(i).to_vec()).collect();
    let keys: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            cache
                .key(i)
                .iter()
                .zip(&mean)
                .map(|(x, m)| x - m)
                .collect()
        })
        .collect();
    let meta = cache.norm_meta().cloned();
    let mut rebuilt = KvCache::from_rows(&keys, &values).expect("same shape");
    rebuilt.set_norm_meta(meta);
    *cache = rebuilt;
}

/// Restores raw coordinates of a coreset cache using the original record.
pub fn denormalized_coreset(coreset: &Coreset, record: &NormalizationRecord) -> Result<KvCache> {
    coreset.final_cache.denormalize(record)
}
