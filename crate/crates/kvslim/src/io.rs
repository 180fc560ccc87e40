//! Cache persistence.
//!
//! Binary `KVC1` layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KVC1"
//! 4       2     version (u16) = 1
//! 6       8     n (u64)
//! 14      4     d_k (u32)
//! 18      4     d_v (u32)
//! 22      1     dtype (u8), 0 = f64
//! 23      1     flags (u8), bit 0 = preprocessed (normalization trailer present)
//! 24      ...   keys: n rows of d_k f64, row-major
//!         ...   values: n rows of d_v f64, row-major
//!         ...   trailer when flag bit 0: key_shift (d_k f64), key_scale, value_scale
//! ```
//!
//! Round trips are bitwise exact; text formats would lose bits. A CSV import
//! path exists for hand-made fixtures.

use std::fs;
use std::path::Path;

use crate::attention::{KvCache, NormalizationRecord};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KVC1";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;
const FLAG_PREPROCESSED: u8 = 1;
const HEADER_LEN: usize = 24;

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

/// Serializes a cache to the `KVC1` byte layout.
pub fn cache_to_bytes(cache: &KvCache) -> Vec<u8> {
    let trailer = cache.norm_meta();
    let payload =
        (cache.n() * cache.d_k() + cache.n() * cache.d_v()) * 8;
    let trailer_len = trailer.map(|_| (cache.d_k() + 2) * 8).unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + payload + trailer_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cache.n() as u64).to_le_bytes());
    out.extend_from_slice(&(cache.d_k() as u32).to_le_bytes());
    out.extend_from_slice(&(cache.d_v() as u32).to_le_bytes());
    out.push(DTYPE_F64);
    out.push(if trailer.is_some() { FLAG_PREPROCESSED } else { 0 });
    for x in cache.keys_flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for x in cache.values_flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(rec) = trailer {
        for x in &rec.key_shift {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&rec.key_scale.to_le_bytes());
        out.extend_from_slice(&rec.value_scale.to_le_bytes());
    }
    out
}

/// Parses the `KVC1` byte layout.
pub fn cache_from_bytes(bytes: &[u8]) -> Result<KvCache> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated header: need {} more bytes", HEADER_LEN - bytes.len()),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(0, "bad magic, expected \"KVC1\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let d_k = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let d_v = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(format_err(6, "cache holds zero pairs"));
    }
    if d_k == 0 || d_v == 0 {
        return Err(format_err(14, "zero dimension"));
    }
    let dtype = bytes[22];
    if dtype != DTYPE_F64 {
        return Err(format_err(22, format!("unsupported dtype {dtype}")));
    }
    let flags = bytes[23];
    let payload_len = n
        .checked_mul(d_k)
        .and_then(|a| n.checked_mul(d_v).map(|b| a + b))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| format_err(6, "payload size overflows"))?;
    let trailer_len = if flags & FLAG_PREPROCESSED != 0 {
        (d_k + 2) * 8
    } else {
        0
    };
    let want = HEADER_LEN + payload_len + trailer_len;
    if bytes.len() < want {
        return Err(format_err(
            bytes.len() as u64,
            format!("truncated payload: need {} more bytes", want - bytes.len()),
        ));
    }
    let read_f64s = |at: usize, count: usize| -> Vec<f64> {
        (0..count)
            .map(|i| {
                let o = at + i * 8;
                f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap())
            })
            .collect()
    };
    let keys = read_f64s(HEADER_LEN, n * d_k);
    let values = read_f64s(HEADER_LEN + n * d_k * 8, n * d_v);
    let mut cache = KvCache::from_flat(keys, values, n, d_k, d_v)?;
    if flags & FLAG_PREPROCESSED != 0 {
        let at = HEADER_LEN + payload_len;
        let key_shift = read_f64s(at, d_k);
        let key_scale = f64::from_le_bytes(bytes[at + d_k * 8..at + d_k * 8 + 8].try_into().unwrap());
        let value_scale =
            f64::from_le_bytes(bytes[at + (d_k + 1) * 8..at + (d_k + 2) * 8].try_into().unwrap());
        cache = cache.with_norm_meta(NormalizationRecord {
            key_shift,
            key_scale,
            value_scale,
        });
    }
    Ok(cache)
}

pub fn save_cache(cache: &KvCache, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cache_to_bytes(cache))?;
    Ok(())
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<KvCache> {
    let bytes = fs::read(path)?;
    cache_from_bytes(&bytes)
}

fn read_csv_rows(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row: std::result::Result<Vec<f64>, _> =
            record.iter().map(|f| f.parse::<f64>()).collect();
        let row = row.map_err(|e| {
            format_err(0, format!("csv field is not a number: {e}"))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Imports a cache from two CSV files, one row per vector: keys from
/// `keys_path`, values from `values_path`.
pub fn import_cache_csv(
    keys_path: impl AsRef<Path>,
    values_path: impl AsRef<Path>,
) -> Result<KvCache> {
    let keys = read_csv_rows(keys_path)?;
    let values = read_csv_rows(values_path)?;
    KvCache::from_rows(&keys, &values)
}
