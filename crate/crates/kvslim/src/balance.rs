//! Constructive sign balancing.
//!
//! Given one or more sequences of item vectors (feature embeddings or raw
//! keys), find signs `σ ∈ {-1,+1}^n` making every signed sum small at once.
//! Objectives are concatenated per item with a `1/sqrt(s)` scale, so a single
//! running sum controls all of them. Two balancers are provided:
//!
//! - [`balance_walk`] — a greedy anti-correlation walk: items are visited in
//!   seed-shuffled order and each sign is chosen against the running sum.
//!   [`balance_best_of`] restarts it over many seeds and keeps the best.
//! - [`balance_exhaustive`] — the ground-truth oracle for small `n`,
//!   enumerating half the sign space (global sign flips are symmetric) by
//!   Gray code.

use serde::Serialize;

use crate::attention::KvCache;
use crate::error::{Error, Result};
use crate::exec;
use crate::features::FeatureVector;
use crate::rng::rng_from;
use crate::vecmath::{dot, norm, scaled_add};

/// Which signed sum an objective controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveId {
    Numerator,
    Denominator,
    KeySum,
}

/// One sequence of per-item vectors plus its concatenation weight.
#[derive(Debug, Clone)]
pub struct BalanceObjective {
    pub id: ObjectiveId,
    pub items: Vec<FeatureVector>,
    /// Concatenation scale, `1/sqrt(s)` when `s` objectives are balanced
    /// together; 1 for a standalone objective.
    pub weight: f64,
}

impl BalanceObjective {
    pub fn new(id: ObjectiveId, items: Vec<FeatureVector>) -> Self {
        Self {
            id,
            items,
            weight: 1.0,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// Key-sum objective: items are the raw key vectors.
    pub fn keysum(cache: &KvCache) -> Self {
        let items = (0..cache.n())
            .map(|i| FeatureVector::from_raw(cache.key(i).to_vec()))
            .collect();
        Self::new(ObjectiveId::KeySum, items)
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    fn item_dim(&self) -> usize {
        self.items.first().map(|f| f.total_dim()).unwrap_or(0)
    }
}

/// Items concatenated across objectives, each span scaled by its objective's
/// weight. Individual packed vectors are materialized on demand; the walk and
/// the oracle work span-by-span against the shared layout.
#[derive(Debug)]
pub struct PackedItems<'a> {
    objectives: &'a [BalanceObjective],
    offsets: Vec<usize>,
    dim: usize,
    n: usize,
}

impl<'a> PackedItems<'a> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The packed vector of item `i`: `[w_1 x_i^1, w_2 x_i^2, ...]`.
    pub fn item(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.add_item(&mut out, i, 1.0);
        out
    }

    pub fn item_norm(&self, i: usize) -> f64 {
        self.objectives
            .iter()
            .map(|o| {
                let x = o.items[i].norm() * o.weight;
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    fn dot_item(&self, w: &[f64], i: usize) -> f64 {
        let mut acc = 0.0;
        for (o, &off) in self.objectives.iter().zip(&self.offsets) {
            let item = o.items[i].as_flat();
            acc += o.weight * dot(&w[off..off + item.len()], item);
        }
        acc
    }

    fn add_item(&self, w: &mut [f64], i: usize, sign: f64) {
        for (o, &off) in self.objectives.iter().zip(&self.offsets) {
            let item = o.items[i].as_flat();
            scaled_add(&mut w[off..off + item.len()], item, sign * o.weight);
        }
    }

    /// Per-objective unscaled discrepancies `‖Σ σ_i x_i^j‖` of a sign vector,
    /// each recomputed fresh in index order.
    pub fn discrepancies(&self, signs: &[i8]) -> Vec<(ObjectiveId, f64)> {
        self.objectives
            .iter()
            .map(|o| {
                let mut acc = vec![0.0; o.item_dim()];
                for (item, &s) in o.items.iter().zip(signs) {
                    scaled_add(&mut acc, item.as_flat(), s as f64);
                }
                (o.id, norm(&acc))
            })
            .collect()
    }

    /// Combined score: max over objectives of the weight-scaled discrepancy.
    pub fn combined(&self, per_objective: &[(ObjectiveId, f64)]) -> f64 {
        per_objective
            .iter()
            .zip(self.objectives)
            .map(|((_, d), o)| d * o.weight)
            .fold(0.0, f64::max)
    }
}

/// Concatenates the objectives' items with their weights. All objectives
/// must hold the same number of items.
pub fn simultaneous_pack(objectives: &[BalanceObjective]) -> Result<PackedItems<'_>> {
    let n = objectives.first().map(|o| o.n()).unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyCache);
    }
    let mut offsets = Vec::with_capacity(objectives.len());
    let mut dim = 0;
    for o in objectives {
        if o.n() != n {
            return Err(Error::Dimension {
                context: "simultaneous pack",
                expected: n,
                actual: o.n(),
            });
        }
        offsets.push(dim);
        dim += o.item_dim();
    }
    Ok(PackedItems {
        objectives,
        offsets,
        dim,
        n,
    })
}

/// Signs with their achieved discrepancies.
#[derive(Debug, Clone, Serialize)]
pub struct SignAssignment {
    pub signs: Vec<i8>,
    pub per_objective_discrepancy: Vec<(ObjectiveId, f64)>,
    /// Combined score (max weight-scaled objective norm).
    pub combined: f64,
    /// The sign value held by at most `floor(n/2)` items (`+1` on ties).
    pub minority_side: i8,
}

fn minority_side(signs: &[i8]) -> i8 {
    let plus = signs.iter().filter(|&&s| s > 0).count();
    if plus * 2 <= signs.len() {
        1
    } else {
        -1
    }
}

fn finish_assignment(packed: &PackedItems<'_>, signs: Vec<i8>) -> SignAssignment {
    let per = packed.discrepancies(&signs);
    let combined = packed.combined(&per);
    let minority = minority_side(&signs);
    SignAssignment {
        signs,
        per_objective_discrepancy: per,
        combined,
        minority_side: minority,
    }
}

/// One walk trial's summary, kept for reports.
#[derive(Debug, Clone, Serialize)]
pub struct WalkTrial {
    pub seed: u64,
    pub combined: f64,
    pub per_objective: Vec<(ObjectiveId, f64)>,
}

/// Greedy anti-correlation walk. Items are processed in a seed-shuffled
/// order; each sign is chosen against the running signed sum, with a seeded
/// fair coin on exact ties. Deterministic given the seed.
pub fn balance_walk(objectives: &[BalanceObjective], seed: u64) -> Result<SignAssignment> {
    let packed = simultaneous_pack(objectives)?;
    let n = packed.n();
    let mut rng = rng_from(seed, 0x77616c6b);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut w = vec![0.0; packed.dim()];
    let mut signs = vec![0i8; n];
    use rand::Rng;
    for &i in &order {
        let ip = packed.dot_item(&w, i);
        let sign: i8 = if ip > 0.0 {
            -1
        } else if ip < 0.0 {
            1
        } else if rng.random::<bool>() {
            1
        } else {
            -1
        };
        signs[i] = sign;
        packed.add_item(&mut w, i, sign as f64);
    }
    Ok(finish_assignment(&packed, signs))
}

/// Runs [`balance_walk`] once per seed (in parallel) and returns the
/// assignment with the smallest combined score, ties resolved by seed order,
/// along with every trial's summary.
pub fn balance_best_of(
    objectives: &[BalanceObjective],
    seeds: &[u64],
) -> Result<(SignAssignment, Vec<WalkTrial>)> {
    if seeds.is_empty() {
        return Err(Error::NoSeeds);
    }
    let runs = exec::map_indexed(seeds.len(), |t| balance_walk(objectives, seeds[t]));
    let mut best: Option<(usize, SignAssignment)> = None;
    let mut trials = Vec::with_capacity(seeds.len());
    for (t, run) in runs.into_iter().enumerate() {
        let a = run?;
        trials.push(WalkTrial {
            seed: seeds[t],
            combined: a.combined,
            per_objective: a.per_objective_discrepancy.clone(),
        });
        let better = match &best {
            None => true,
            Some((_, b)) => a.combined < b.combined,
        };
        if better {
            best = Some((t, a));
        }
    }
    Ok((best.expect("at least one seed").1, trials))
}

/// How the exhaustive oracle scores multiple objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    /// Max of weight-scaled objective norms (matches the walk's score).
    Max,
    /// Sum of weight-scaled objective norms.
    Sum,
}

const EXHAUSTIVE_LIMIT: usize = 24;

struct ExhaustiveBest {
    score: f64,
    signs: Vec<i8>,
}

fn lex_smaller(a: &[i8], b: &[i8]) -> bool {
    a < b
}

/// Enumerates every sign pattern with the given fixed prefix (`signs[0] = +1`
/// always; `signs[1..=prefix_bits]` fixed by `prefix`), Gray-coding the rest.
fn exhaustive_block(
    objectives: &[BalanceObjective],
    combine: Combine,
    prefix_bits: usize,
    prefix: usize,
    n: usize,
) -> ExhaustiveBest {
    let mut signs = vec![1i8; n];
    for b in 0..prefix_bits {
        if (prefix >> b) & 1 == 1 {
            signs[1 + b] = -1;
        }
    }
    // running signed sums and squared norms per objective
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(objectives.len());
    let mut sq: Vec<f64> = Vec::with_capacity(objectives.len());
    for o in objectives {
        let mut acc = vec![0.0; o.item_dim()];
        for (item, &s) in o.items.iter().zip(&signs) {
            scaled_add(&mut acc, item.as_flat(), s as f64);
        }
        sq.push(dot(&acc, &acc));
        sums.push(acc);
    }
    let score = |sq: &[f64]| -> f64 {
        let scaled = sq
            .iter()
            .zip(objectives)
            .map(|(&s, o)| s.max(0.0).sqrt() * o.weight);
        match combine {
            Combine::Max => scaled.fold(0.0, f64::max),
            Combine::Sum => scaled.sum(),
        }
    };
    let mut best = ExhaustiveBest {
        score: score(&sq),
        signs: signs.clone(),
    };
    let free_bits = n - 1 - prefix_bits;
    let steps: u64 = 1u64 << free_bits;
    for t in 1..steps {
        let bit = t.trailing_zeros() as usize;
        let i = 1 + prefix_bits + bit;
        let old = signs[i] as f64;
        signs[i] = -signs[i];
        for (o, (acc, s)) in objectives.iter().zip(sums.iter_mut().zip(sq.iter_mut())) {
            let item = o.items[i].as_flat();
            let ip = dot(acc, item);
            let xx = dot(item, item);
            // ||W - 2 s x||^2 = ||W||^2 - 4 s <W,x> + 4 ||x||^2
            *s += -4.0 * old * ip + 4.0 * xx;
            scaled_add(acc, item, -2.0 * old);
        }
        let sc = score(&sq);
        if sc < best.score || (sc == best.score && lex_smaller(&signs, &best.signs)) {
            best.score = sc;
            best.signs = signs.clone();
        }
    }
    best
}

/// Global minimizer of the combined discrepancy over all sign vectors with
/// `σ_1 = +1`, for `n <= 24`. Ties break to the lexicographically smallest
/// sign vector (−1 ordered before +1).
pub fn balance_exhaustive(
    objectives: &[BalanceObjective],
    combine: Combine,
) -> Result<SignAssignment> {
    let packed = simultaneous_pack(objectives)?;
    let n = packed.n();
    if n > EXHAUSTIVE_LIMIT {
        return Err(Error::ExhaustiveTooLarge {
            n,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    let prefix_bits = if n >= 18 { 4 } else { 0 };
    let blocks = 1usize << prefix_bits;
    let results = exec::map_indexed(blocks, |p| {
        exhaustive_block(objectives, combine, prefix_bits, p, n)
    });
    let mut best: Option<ExhaustiveBest> = None;
    for r in results {
        let better = match &best {
            None => true,
            Some(b) => {
                r.score < b.score || (r.score == b.score && lex_smaller(&r.signs, &b.signs))
            }
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("at least one block");
    Ok(finish_assignment(&packed, best.signs))
}

/// Outcome of selecting the minority side of a sign assignment.
#[derive(Debug, Clone, Serialize)]
pub struct HalveNote {
    /// Indices kept, ascending, into the balanced cache.
    pub kept: Vec<usize>,
    /// Sign value of the kept side.
    pub side: i8,
    /// True when every item fell on one side; the full cache is returned and
    /// the caller should treat the step as "no progress".
    pub degenerate: bool,
}

/// Keeps the minority (or equal, at most `ceil(n/2)`) side of the split, so
/// that doubling the kept side's sums approximates the full sums. An
/// all-one-side assignment returns the whole cache flagged degenerate.
pub fn halve_select(cache: &KvCache, assignment: &SignAssignment) -> Result<(KvCache, HalveNote)> {
    if assignment.signs.len() != cache.n() {
        return Err(Error::Dimension {
            context: "halve select",
            expected: cache.n(),
            actual: assignment.signs.len(),
        });
    }
    let side = assignment.minority_side;
    let kept: Vec<usize> = assignment
        .signs
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == side)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        let all: Vec<usize> = (0..cache.n()).collect();
        return Ok((
            cache.clone(),
            HalveNote {
                kept: all,
                side,
                degenerate: true,
            },
        ));
    }
    let sub = cache.select(&kept)?;
    Ok((
        sub,
        HalveNote {
            kept,
            side,
            degenerate: false,
        },
    ))
}
