//! Weighted tensor features of the exponential kernel.
//!
//! Item `(k, v)` is lifted to the stacked blocks
//! `x = [v/z(0), flat(k⊗v)/z(1), ..., flat(k^{⊗m}⊗v)/z(m), ...]` truncated at
//! degree `M`, with `z(m) = sqrt(3(m+2))·ln(m+2)`. The weights make
//! `Σ_m 1/z(m)^2 < 1`, so unit-norm inputs give features of norm at most one,
//! and inner products reproduce the truncated kernel
//! `Σ_m (k_i·k_j)^m (v_i·v_j)/z(m)^2` exactly.
//!
//! Since `k^{⊗m}` is symmetric, a block can be stored in the monomial basis
//! (`C(d_k+m-1, m)` entries instead of `d_k^m`) with `sqrt(multinomial)`
//! scaling; inner products are unchanged. This is the default for `d_k >= 4`
//! where explicit storage dominates the cost.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vecmath::dot;

/// Hard cap on the total feature dimension (scalars per item).
pub const DEFAULT_DIM_CAP: usize = 1 << 24;

/// `z(m) = sqrt(3(m+2)) * ln(m+2)`.
pub fn z_weight(m: usize) -> f64 {
    let t = (m + 2) as f64;
    (3.0 * t).sqrt() * t.ln()
}

/// Upper bound on the exponential-series tail `Σ_{m>M} rho^m/m!`, by forward
/// summation of the tail terms (nudged up a few ulps so the returned value
/// never falls below the true tail).
pub fn truncation_tail(rho: f64, truncation_degree: usize) -> f64 {
    assert!(rho >= 0.0);
    if rho == 0.0 {
        return 0.0;
    }
    let mut term = 1.0;
    for m in 1..=truncation_degree + 1 {
        term *= rho / m as f64;
    }
    let mut tail = 0.0;
    let mut m = truncation_degree + 1;
    for _ in 0..10_000 {
        tail += term;
        m += 1;
        term *= rho / m as f64;
        if term <= tail * 1e-18 {
            break;
        }
    }
    tail * (1.0 + 4.0 * f64::EPSILON)
}

/// Truncated exponential weight `Σ_{m=0}^{M} (q·k)^m / m!`.
pub fn reconstruct_weight(q: &[f64], k: &[f64], cfg: &EmbeddingConfig) -> f64 {
    let x = dot(q, k);
    let mut term = 1.0;
    let mut acc = 1.0;
    for m in 1..=cfg.truncation_degree() {
        term *= x / m as f64;
        acc += term;
    }
    acc
}

/// Smallest degree `M <= max_degree` with `truncation_tail(rho, M) <= eps_tail`.
/// Saturates at `max_degree` when the target is unreachable.
pub fn choose_truncation_degree(rho: f64, eps_tail: f64, max_degree: usize) -> usize {
    for m in 0..max_degree {
        if truncation_tail(rho, m) <= eps_tail {
            return m;
        }
    }
    max_degree
}

/// Exact multinomial coefficient `m! / (e_0! e_1! ... )` where the `e`s are
/// the multiplicities encoded in `exps`; falls back to a log-factorial
/// evaluation when the integer product overflows.
fn sqrt_multinomial(m: usize, exps: &[u8]) -> f64 {
    let mut remaining = m as u128;
    let mut acc: u128 = 1;
    let mut overflow = false;
    for &e in exps {
        let e = e as u128;
        if e == 0 {
            continue;
        }
        // C(remaining, e), multiplied into acc with overflow checks
        let mut c: u128 = 1;
        for i in 0..e {
            match c.checked_mul(remaining - i) {
                Some(v) => c = v / (i + 1),
                None => {
                    overflow = true;
                    break;
                }
            }
        }
        if overflow {
            break;
        }
        match acc.checked_mul(c) {
            Some(v) => acc = v,
            None => {
                overflow = true;
                break;
            }
        }
        remaining -= e;
    }
    if !overflow {
        return (acc as f64).sqrt();
    }
    let ln_fact = |k: usize| -> f64 { (2..=k).map(|i| (i as f64).ln()).sum() };
    let mut ln = ln_fact(m);
    for &e in exps {
        ln -= ln_fact(e as usize);
    }
    (0.5 * ln).exp()
}

/// Storage scheme of one degree-`m` block's key part.
#[derive(Debug, Clone)]
enum LayoutKind {
    /// All `d_k^m` index tuples, lexicographic.
    Explicit,
    /// Monomial basis: one entry per multi-index of degree `m`, with
    /// `sqrt(multinomial)` scaling. `exps` holds `count` rows of `d_k`
    /// exponents; `coeffs[i]` is the scaling of row `i`.
    Symmetric { exps: Vec<u8>, coeffs: Vec<f64> },
}

/// Layout of the key part of a degree-`m` feature block. The value dimension
/// is applied at use time: a block holds `kpart_len * d_v` scalars, value
/// index fastest.
#[derive(Debug, Clone)]
pub struct BlockLayout {
    m: usize,
    d_k: usize,
    kpart_len: usize,
    kind: LayoutKind,
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

impl BlockLayout {
    fn new(m: usize, d_k: usize, symmetric: bool, cap: usize) -> Result<Self> {
        if symmetric {
            let count = binomial((d_k + m - 1).max(1) as u128, m as u128)
                .filter(|&c| c <= cap as u128)
                .ok_or(Error::Capacity {
                    required: usize::MAX,
                    cap,
                })? as usize;
            let mut exps = Vec::with_capacity(count * d_k);
            let mut coeffs = Vec::with_capacity(count);
            let mut cur = vec![0u8; d_k];
            enumerate_multi_indices(m, d_k, 0, &mut cur, &mut |e| {
                exps.extend_from_slice(e);
                coeffs.push(sqrt_multinomial(m, e));
            });
            debug_assert_eq!(coeffs.len(), count);
            Ok(Self {
                m,
                d_k,
                kpart_len: count,
                kind: LayoutKind::Symmetric { exps, coeffs },
            })
        } else {
            let mut len: usize = 1;
            for _ in 0..m {
                len = len.checked_mul(d_k).filter(|&l| l <= cap).ok_or(Error::Capacity {
                    required: usize::MAX,
                    cap,
                })?;
            }
            Ok(Self {
                m,
                d_k,
                kpart_len: len,
                kind: LayoutKind::Explicit,
            })
        }
    }

    pub fn degree(&self) -> usize {
        self.m
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn kpart_len(&self) -> usize {
        self.kpart_len
    }

    pub fn block_len(&self, d_v: usize) -> usize {
        self.kpart_len * d_v
    }

    /// Writes `flat(k^{⊗m} ⊗ v) * scale` into `out` (length `block_len(d_v)`).
    fn embed_into(&self, k: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(k.len(), self.d_k);
        debug_assert_eq!(out.len(), self.block_len(v.len()));
        match &self.kind {
            LayoutKind::Explicit => {
                let mut idx = vec![0usize; self.m];
                for slot in 0..self.kpart_len {
                    let mut mono = scale;
                    for &t in &idx {
                        mono *= k[t];
                    }
                    let base = slot * v.len();
                    for (j, vj) in v.iter().enumerate() {
                        out[base + j] = mono * vj;
                    }
                    // advance the lexicographic tuple counter
                    for pos in (0..self.m).rev() {
                        idx[pos] += 1;
                        if idx[pos] < self.d_k {
                            break;
                        }
                        idx[pos] = 0;
                    }
                }
            }
            LayoutKind::Symmetric { exps, coeffs } => {
                for (slot, coeff) in coeffs.iter().enumerate() {
                    let row = &exps[slot * self.d_k..(slot + 1) * self.d_k];
                    let mut mono = scale * coeff;
                    for (t, &e) in row.iter().enumerate() {
                        for _ in 0..e {
                            mono *= k[t];
                        }
                    }
                    let base = slot * v.len();
                    for (j, vj) in v.iter().enumerate() {
                        out[base + j] = mono * vj;
                    }
                }
            }
        }
    }

    /// Contracts all `m` key slots with `q`, returning a `d_v` vector:
    /// `w_j = <q^{⊗m} ⊗ e_j, block>`.
    pub fn contract_full(&self, block: &[f64], d_v: usize, q: &[f64]) -> Vec<f64> {
        debug_assert_eq!(block.len(), self.block_len(d_v));
        debug_assert_eq!(q.len(), self.d_k);
        match &self.kind {
            LayoutKind::Explicit => {
                let mut cur = block.to_vec();
                for _ in 0..self.m {
                    let rest = cur.len() / self.d_k;
                    let mut next = vec![0.0; rest];
                    for (t, &qt) in q.iter().enumerate() {
                        let seg = &cur[t * rest..(t + 1) * rest];
                        for (n, s) in next.iter_mut().zip(seg) {
                            *n += qt * s;
                        }
                    }
                    cur = next;
                }
                cur
            }
            LayoutKind::Symmetric { exps, coeffs } => {
                let mut w = vec![0.0; d_v];
                for (slot, coeff) in coeffs.iter().enumerate() {
                    let row = &exps[slot * self.d_k..(slot + 1) * self.d_k];
                    let mut mono = *coeff;
                    for (t, &e) in row.iter().enumerate() {
                        for _ in 0..e {
                            mono *= q[t];
                        }
                    }
                    let base = slot * d_v;
                    for (j, wj) in w.iter_mut().enumerate() {
                        *wj += mono * block[base + j];
                    }
                }
                w
            }
        }
    }

    /// `<q^{⊗m} ⊗ u, block>`.
    pub fn rank_one_inner(&self, block: &[f64], d_v: usize, q: &[f64], u: &[f64]) -> f64 {
        dot(&self.contract_full(block, d_v, q), u)
    }

    /// Gradient of `f(q) = <q^{⊗m} ⊗ u, block>` with respect to `q`
    /// (a `d_k` vector; zero for `m = 0`). By symmetry this equals
    /// `m * <q^{⊗(m-1)} ⊗ e_t ⊗ u, block>` per coordinate `t`.
    pub fn gradient_q(&self, block: &[f64], d_v: usize, q: &[f64], u: &[f64]) -> Vec<f64> {
        debug_assert_eq!(q.len(), self.d_k);
        let mut grad = vec![0.0; self.d_k];
        if self.m == 0 {
            return grad;
        }
        match &self.kind {
            LayoutKind::Explicit => {
                // contract the first m-1 slots, leaving a d_k x d_v matrix
                let mut cur = block.to_vec();
                for _ in 0..self.m - 1 {
                    let rest = cur.len() / self.d_k;
                    let mut next = vec![0.0; rest];
                    for (t, &qt) in q.iter().enumerate() {
                        let seg = &cur[t * rest..(t + 1) * rest];
                        for (n, s) in next.iter_mut().zip(seg) {
                            *n += qt * s;
                        }
                    }
                    cur = next;
                }
                debug_assert_eq!(cur.len(), self.d_k * d_v);
                for t in 0..self.d_k {
                    grad[t] = self.m as f64 * dot(&cur[t * d_v..(t + 1) * d_v], u);
                }
            }
            LayoutKind::Symmetric { exps, coeffs } => {
                // d/dq_t q^alpha = alpha_t q^{alpha - e_t}
                for (slot, coeff) in coeffs.iter().enumerate() {
                    let row = &exps[slot * self.d_k..(slot + 1) * self.d_k];
                    let su = dot(&block[slot * d_v..(slot + 1) * d_v], u);
                    if su == 0.0 {
                        continue;
                    }
                    for (t, &e) in row.iter().enumerate() {
                        if e == 0 {
                            continue;
                        }
                        let mut mono = *coeff * e as f64;
                        for (s, &es) in row.iter().enumerate() {
                            let reps = if s == t { es - 1 } else { es };
                            for _ in 0..reps {
                                mono *= q[s];
                            }
                        }
                        grad[t] += mono * su;
                    }
                }
            }
        }
        grad
    }
}

fn enumerate_multi_indices(
    remaining: usize,
    d: usize,
    pos: usize,
    cur: &mut [u8],
    f: &mut impl FnMut(&[u8]),
) {
    if pos + 1 == d {
        cur[pos] = remaining as u8;
        f(cur);
        cur[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e as u8;
        enumerate_multi_indices(remaining - e, d, pos + 1, cur, f);
    }
    cur[pos] = 0;
}

/// Truncation degree, dimensions, `z` weights and per-degree layouts.
#[derive(Debug, Clone)]
pub struct EmbeddingConfig {
    truncation_degree: usize,
    d_k: usize,
    d_v: usize,
    symmetric_compression: bool,
    z_weights: Vec<f64>,
    layouts: Vec<BlockLayout>,
    total_dim: usize,
    denominator_dim: usize,
}

impl EmbeddingConfig {
    /// Builds a config, checking the stacked dimension against `cap`.
    pub fn new(
        truncation_degree: usize,
        d_k: usize,
        d_v: usize,
        symmetric_compression: bool,
        cap: usize,
    ) -> Result<Self> {
        assert!(d_k > 0 && d_v > 0);
        let z_weights: Vec<f64> = (0..=truncation_degree).map(z_weight).collect();
        let mut layouts = Vec::with_capacity(truncation_degree + 1);
        let mut total_dim: usize = 0;
        for m in 0..=truncation_degree {
            let layout = BlockLayout::new(m, d_k, symmetric_compression, cap)?;
            total_dim = total_dim
                .checked_add(layout.block_len(d_v))
                .filter(|&t| t <= cap)
                .ok_or(Error::Capacity {
                    required: usize::MAX,
                    cap,
                })
                .map_err(|_| Error::Capacity {
                    required: layouts_required(&layouts, &layout, d_v),
                    cap,
                })?;
            layouts.push(layout);
        }
        let denominator_dim = layouts.iter().map(|l| l.kpart_len()).sum();
        Ok(Self {
            truncation_degree,
            d_k,
            d_v,
            symmetric_compression,
            z_weights,
            layouts,
            total_dim,
            denominator_dim,
        })
    }

    /// Default policy: symmetric compression for `d_k >= 4`, standard cap.
    pub fn with_defaults(truncation_degree: usize, d_k: usize, d_v: usize) -> Result<Self> {
        Self::new(truncation_degree, d_k, d_v, d_k >= 4, DEFAULT_DIM_CAP)
    }

    pub fn truncation_degree(&self) -> usize {
        self.truncation_degree
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn symmetric_compression(&self) -> bool {
        self.symmetric_compression
    }

    pub fn z_weights(&self) -> &[f64] {
        &self.z_weights
    }

    pub fn layout(&self, m: usize) -> &BlockLayout {
        &self.layouts[m]
    }

    /// Scalars per numerator feature vector.
    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    /// Scalars per denominator feature vector (`d_v = 1`).
    pub fn denominator_dim(&self) -> usize {
        self.denominator_dim
    }
}

fn layouts_required(done: &[BlockLayout], next: &BlockLayout, d_v: usize) -> usize {
    done.iter()
        .map(|l| l.block_len(d_v))
        .sum::<usize>()
        .saturating_add(next.block_len(d_v))
}

/// Stacked feature blocks of one item, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    data: Vec<f64>,
    offsets: Vec<usize>,
    d_v: usize,
}

impl FeatureVector {
    /// Wraps a raw vector as a single degree-0-style block (used for key-sum
    /// balancing, where items are the raw keys).
    pub fn from_raw(v: Vec<f64>) -> Self {
        let offsets = vec![0, v.len()];
        Self {
            data: v,
            offsets,
            d_v: 1,
        }
    }

    pub fn blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn block(&self, m: usize) -> &[f64] {
        &self.data[self.offsets[m]..self.offsets[m + 1]]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn total_dim(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        crate::vecmath::norm(&self.data)
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        dot(&self.data, &other.data)
    }
}

fn embed_with(k: &[f64], v: &[f64], cfg: &EmbeddingConfig) -> FeatureVector {
    let total: usize = cfg
        .layouts
        .iter()
        .map(|l| l.block_len(v.len()))
        .sum();
    let mut data = vec![0.0; total];
    let mut offsets = Vec::with_capacity(cfg.layouts.len() + 1);
    offsets.push(0);
    let mut at = 0;
    for (m, layout) in cfg.layouts.iter().enumerate() {
        let len = layout.block_len(v.len());
        layout.embed_into(k, v, 1.0 / cfg.z_weights[m], &mut data[at..at + len]);
        at += len;
        offsets.push(at);
    }
    FeatureVector {
        data,
        offsets,
        d_v: v.len(),
    }
}

/// Feature vector of item `(k, v)`: block `m` is `flat(k^{⊗m} ⊗ v)/z(m)`.
pub fn embed(k: &[f64], v: &[f64], cfg: &EmbeddingConfig) -> Result<FeatureVector> {
    if k.len() != cfg.d_k {
        return Err(Error::Dimension {
            context: "embed key",
            expected: cfg.d_k,
            actual: k.len(),
        });
    }
    if v.len() != cfg.d_v {
        return Err(Error::Dimension {
            context: "embed value",
            expected: cfg.d_v,
            actual: v.len(),
        });
    }
    debug_assert!(crate::vecmath::norm(k) <= 1.0 + 1e-9);
    Ok(embed_with(k, v, cfg))
}

/// Feature vector for the denominator objective: the value is pinned to the
/// scalar 1 (`d_v = 1`), so block `m` is `flat(k^{⊗m})/z(m)`.
pub fn denominator_embed(k: &[f64], cfg: &EmbeddingConfig) -> Result<FeatureVector> {
    if k.len() != cfg.d_k {
        return Err(Error::Dimension {
            context: "denominator embed key",
            expected: cfg.d_k,
            actual: k.len(),
        });
    }
    Ok(embed_with(k, &[1.0], cfg))
}

/// Per-degree signed sums `S_m = Σ_i σ_i · block_m(i)`, accumulated in index
/// order, in the same layout as the item blocks.
#[derive(Debug, Clone)]
pub struct BlockSum {
    pub blocks: Vec<Vec<f64>>,
    pub d_v: usize,
}

impl BlockSum {
    pub fn signed(items: &[FeatureVector], signs: &[i8]) -> Self {
        assert_eq!(items.len(), signs.len());
        assert!(!items.is_empty());
        let template = &items[0];
        let mut blocks: Vec<Vec<f64>> = (0..template.blocks())
            .map(|m| vec![0.0; template.block(m).len()])
            .collect();
        for (item, &sign) in items.iter().zip(signs) {
            let s = sign as f64;
            for (m, acc) in blocks.iter_mut().enumerate() {
                crate::vecmath::scaled_add(acc, item.block(m), s);
            }
        }
        Self {
            blocks,
            d_v: template.d_v,
        }
    }
}

/// Degree-`m` feature-space summary used by serialized reports.
#[derive(Debug, Clone, Serialize)]
pub struct BlockDims {
    pub degree: usize,
    pub len: usize,
}
