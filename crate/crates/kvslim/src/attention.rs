//! Exact softmax attention and cache normalization.
//!
//! Conventions: no `1/sqrt(d)` temperature in the exponent (callers that want
//! the standard convention divide their queries by `sqrt(d_k)` up front), and
//! preprocessing centers keys exactly and rescales keys and values to norm at
//! most one. Both transforms leave the attention output unchanged up to the
//! recorded query and value scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, unit_vector};
use crate::vecmath::{all_finite, dot, norm};

/// A cache of `n` keys in `R^{d_k}` and `n` values in `R^{d_v}`, stored
/// row-major. Construction rejects empty or non-finite data.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    n: usize,
    d_k: usize,
    d_v: usize,
    norm_meta: Option<NormalizationRecord>,
}

/// The invertible transform applied by [`preprocess`]: keys were shifted by
/// `-key_shift` then divided by `key_scale`; values were divided by
/// `value_scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub key_shift: Vec<f64>,
    pub key_scale: f64,
    pub value_scale: f64,
}

impl NormalizationRecord {
    pub fn identity(d_k: usize) -> Self {
        Self {
            key_shift: vec![0.0; d_k],
            key_scale: 1.0,
            value_scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.key_scale == 1.0
            && self.value_scale == 1.0
            && self.key_shift.iter().all(|&x| x == 0.0)
    }
}

/// A query vector together with the radius it is certified against.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    q: Vec<f64>,
    declared_rho: f64,
}

impl Query {
    /// Builds a query, checking `‖q‖ <= declared_rho + 1e-12`.
    pub fn new(q: Vec<f64>, declared_rho: f64) -> Result<Self> {
        if !all_finite(&q) || !declared_rho.is_finite() {
            return Err(Error::NonFinite("query"));
        }
        let n = norm(&q);
        if n > declared_rho + 1e-12 {
            return Err(Error::QueryNorm {
                norm: n,
                rho: declared_rho,
            });
        }
        Ok(Self { q, declared_rho })
    }

    pub fn zero(d: usize, declared_rho: f64) -> Self {
        Self {
            q: vec![0.0; d],
            declared_rho,
        }
    }

    pub fn vector(&self) -> &[f64] {
        &self.q
    }

    pub fn rho(&self) -> f64 {
        self.declared_rho
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

impl KvCache {
    /// Builds a cache from flat row-major key and value arrays.
    pub fn from_flat(
        keys: Vec<f64>,
        values: Vec<f64>,
        n: usize,
        d_k: usize,
        d_v: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyCache);
        }
        if keys.len() != n * d_k {
            return Err(Error::Dimension {
                context: "cache keys",
                expected: n * d_k,
                actual: keys.len(),
            });
        }
        if values.len() != n * d_v {
            return Err(Error::Dimension {
                context: "cache values",
                expected: n * d_v,
                actual: values.len(),
            });
        }
        if !all_finite(&keys) || !all_finite(&values) {
            return Err(Error::NonFinite("cache payload"));
        }
        Ok(Self {
            keys,
            values,
            n,
            d_k,
            d_v,
            norm_meta: None,
        })
    }

    /// Builds a cache from per-item rows.
    pub fn from_rows(keys: &[Vec<f64>], values: &[Vec<f64>]) -> Result<Self> {
        if keys.len() != values.len() {
            return Err(Error::Dimension {
                context: "cache rows",
                expected: keys.len(),
                actual: values.len(),
            });
        }
        if keys.is_empty() {
            return Err(Error::EmptyCache);
        }
        let d_k = keys[0].len();
        let d_v = values[0].len();
        let mut kf = Vec::with_capacity(keys.len() * d_k);
        let mut vf = Vec::with_capacity(values.len() * d_v);
        for row in keys {
            if row.len() != d_k {
                return Err(Error::Dimension {
                    context: "key row",
                    expected: d_k,
                    actual: row.len(),
                });
            }
            kf.extend_from_slice(row);
        }
        for row in values {
            if row.len() != d_v {
                return Err(Error::Dimension {
                    context: "value row",
                    expected: d_v,
                    actual: row.len(),
                });
            }
            vf.extend_from_slice(row);
        }
        Self::from_flat(kf, vf, keys.len(), d_k, d_v)
    }

    /// A cache of `n` uniform random unit keys and unit values.
    pub fn random_unit(n: usize, d_k: usize, d_v: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed, 0x6b76_6361_6368_6531);
        let mut keys = Vec::with_capacity(n * d_k);
        let mut values = Vec::with_capacity(n * d_v);
        for _ in 0..n {
            keys.extend(unit_vector(d_k, &mut rng));
        }
        for _ in 0..n {
            values.extend(unit_vector(d_v, &mut rng));
        }
        Self::from_flat(keys, values, n, d_k, d_v)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.d_k..(i + 1) * self.d_k]
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.d_v..(i + 1) * self.d_v]
    }

    pub fn keys_flat(&self) -> &[f64] {
        &self.keys
    }

    pub fn values_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn norm_meta(&self) -> Option<&NormalizationRecord> {
        self.norm_meta.as_ref()
    }

    pub fn is_preprocessed(&self) -> bool {
        self.norm_meta.is_some()
    }

    pub(crate) fn set_norm_meta(&mut self, meta: Option<NormalizationRecord>) {
        self.norm_meta = meta;
    }

    pub fn with_norm_meta(mut self, meta: NormalizationRecord) -> Self {
        self.norm_meta = Some(meta);
        self
    }

    /// The subset cache on `indices` (kept in the given order). The
    /// normalization record carries over: a subset of a preprocessed cache
    /// lives in the same coordinates.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyCache);
        }
        let mut keys = Vec::with_capacity(indices.len() * self.d_k);
        let mut values = Vec::with_capacity(indices.len() * self.d_v);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Dimension {
                    context: "select index",
                    expected: self.n,
                    actual: i,
                });
            }
            keys.extend_from_slice(self.key(i));
            values.extend_from_slice(self.value(i));
        }
        Ok(Self {
            keys,
            values,
            n: indices.len(),
            d_k: self.d_k,
            d_v: self.d_v,
            norm_meta: self.norm_meta.clone(),
        })
    }

    pub fn key_sum(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.d_k];
        for row in self.keys.chunks(self.d_k) {
            for (acc, x) in s.iter_mut().zip(row) {
                *acc += x;
            }
        }
        s
    }

    pub fn max_key_norm(&self) -> f64 {
        self.keys
            .chunks(self.d_k)
            .map(norm)
            .fold(0.0, f64::max)
    }

    pub fn max_value_norm(&self) -> f64 {
        self.values
            .chunks(self.d_v)
            .map(norm)
            .fold(0.0, f64::max)
    }

    /// Applies the inverse of `record`, returning the cache in raw coordinates.
    pub fn denormalize(&self, record: &NormalizationRecord) -> Result<Self> {
        if record.key_shift.len() != self.d_k {
            return Err(Error::Dimension {
                context: "normalization record",
                expected: self.d_k,
                actual: record.key_shift.len(),
            });
        }
        let mut keys = Vec::with_capacity(self.keys.len());
        for row in self.keys.chunks(self.d_k) {
            for (x, s) in row.iter().zip(&record.key_shift) {
                keys.push(x * record.key_scale + s);
            }
        }
        let values = self.values.iter().map(|x| x * record.value_scale).collect();
        let mut out = Self::from_flat(keys, values, self.n, self.d_k, self.d_v)?;
        out.norm_meta = None;
        Ok(out)
    }
}

fn check_query(q: &Query, cache: &KvCache) -> Result<()> {
    if q.dim() != cache.d_k() {
        return Err(Error::Dimension {
            context: "query",
            expected: cache.d_k(),
            actual: q.dim(),
        });
    }
    Ok(())
}

/// `A(q) = Σ_i exp(q·k_i) v_i`, accumulated in index order.
pub fn softmax_numerator(q: &Query, cache: &KvCache) -> Result<Vec<f64>> {
    check_query(q, cache)?;
    let mut out = vec![0.0; cache.d_v()];
    for i in 0..cache.n() {
        let w = dot(q.vector(), cache.key(i)).exp();
        for (acc, v) in out.iter_mut().zip(cache.value(i)) {
            *acc += w * v;
        }
    }
    if !all_finite(&out) {
        return Err(Error::NonFinite("softmax numerator"));
    }
    Ok(out)
}

/// `B(q) = Σ_i exp(q·k_i)`, accumulated in index order.
pub fn softmax_denominator(q: &Query, cache: &KvCache) -> Result<f64> {
    check_query(q, cache)?;
    let mut acc = 0.0;
    for i in 0..cache.n() {
        acc += dot(q.vector(), cache.key(i)).exp();
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite("softmax denominator"));
    }
    Ok(acc)
}

/// `Attn(q) = A(q) / B(q)`. The output lies in the convex hull of the values.
pub fn attn(q: &Query, cache: &KvCache) -> Result<Vec<f64>> {
    let a = softmax_numerator(q, cache)?;
    let b = softmax_denominator(q, cache)?;
    Ok(a.into_iter().map(|x| x / b).collect())
}

/// Centers keys exactly (two passes kill the rounding residue), divides keys
/// by the max key norm and values by the max value norm. Degenerate all-zero
/// keys or values get a no-op scale of 1.
pub fn preprocess(raw: &KvCache) -> Result<(KvCache, NormalizationRecord)> {
    let n = raw.n() as f64;
    let d_k = raw.d_k();
    let d_v = raw.d_v();
    let mut keys = raw.keys_flat().to_vec();
    let mut shift = vec![0.0; d_k];
    for _ in 0..2 {
        let mut mean = vec![0.0; d_k];
        for row in keys.chunks(d_k) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        for row in keys.chunks_mut(d_k) {
            for (x, m) in row.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        for (s, m) in shift.iter_mut().zip(&mean) {
            *s += m;
        }
    }
    let mut key_scale = keys.chunks(d_k).map(norm).fold(0.0, f64::max);
    if key_scale <= 0.0 {
        key_scale = 1.0;
    }
    for x in keys.iter_mut() {
        *x /= key_scale;
    }
    let mut values = raw.values_flat().to_vec();
    let mut value_scale = values.chunks(d_v).map(norm).fold(0.0, f64::max);
    if value_scale <= 0.0 {
        value_scale = 1.0;
    }
    for x in values.iter_mut() {
        *x /= value_scale;
    }
    let record = NormalizationRecord {
        key_shift: shift,
        key_scale,
        value_scale,
    };
    let cache = KvCache::from_flat(keys, values, raw.n(), d_k, d_v)?
        .with_norm_meta(record.clone());
    Ok((cache, record))
}
