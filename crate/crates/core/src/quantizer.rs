//! Dimension-wise scalar quantization.
//!
//! Every scalar channel `i` is quantized independently against its own
//! calibrated range `[lo[i], hi[i]]` split into `L` equal bins. Values outside
//! the range saturate to the edge bins; dequantization returns bin centers, so
//! `quantize(dequantize(q)) == q` holds for every valid token tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, TokenTensor};

/// Default per-tail calibration quantile.
pub const DEFAULT_QUANTILE: f64 = 0.0005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: u64,
}

impl CalibrationStats {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, samples: u64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "bounds must be non-empty and equal length, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (dim, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::InvalidInput(format!("dimension {dim} has non-finite bounds")));
            }
            if l == h {
                return Err(Error::DegenerateDimension { dim, value: l });
            }
            if l > h {
                return Err(Error::InvalidInput(format!(
                    "dimension {dim} has lo {l} above hi {h}"
                )));
            }
        }
        Ok(CalibrationStats { lo, hi, samples })
    }

    /// Same range for every dimension.
    pub fn uniform(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d], 0)
    }

    pub fn d(&self) -> usize {
        self.lo.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    levels: usize,
    stats: CalibrationStats,
}

impl QuantizerSpec {
    pub fn new(levels: usize, stats: CalibrationStats) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidInput(format!("levels must be >= 2, got {levels}")));
        }
        if levels > u16::MAX as usize + 1 {
            return Err(Error::InvalidInput(format!("levels {levels} exceeds 65536")));
        }
        // Re-validate: deserialized stats bypass the constructor.
        let stats = CalibrationStats::new(stats.lo, stats.hi, stats.samples)?;
        Ok(QuantizerSpec { levels, stats })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn stats(&self) -> &CalibrationStats {
        &self.stats
    }

    pub fn d(&self) -> usize {
        self.stats.d()
    }

    pub fn bin_width(&self, dim: usize) -> f64 {
        (self.stats.hi[dim] - self.stats.lo[dim]) / self.levels as f64
    }

    /// Level index of one scalar in dimension `dim`. `value` must not be NaN.
    pub fn quantize_scalar(&self, value: f64, dim: usize) -> u16 {
        let (lo, hi) = (self.stats.lo[dim], self.stats.hi[dim]);
        let clamped = value.clamp(lo, hi);
        let frac = (clamped - lo) / (hi - lo);
        let id = (frac * self.levels as f64).floor() as usize;
        id.min(self.levels - 1) as u16
    }

    /// Bin center of level `id` in dimension `dim`.
    pub fn dequantize_scalar(&self, id: u16, dim: usize) -> f64 {
        self.stats.lo[dim] + (id as f64 + 0.5) * self.bin_width(dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: QuantizerSpec = serde_json::from_str(&text)?;
        QuantizerSpec::new(raw.levels, raw.stats)
    }
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Per-dimension `[quantile, 1 - quantile]` bounds over every spatial position
/// of every tensor in the corpus. `quantile == 0` gives min/max.
pub fn calibrate(corpus: &[FeatureTensor], quantile: f64) -> Result<CalibrationStats> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    if !(0.0..0.5).contains(&quantile) {
        return Err(Error::InvalidInput(format!(
            "quantile must lie in [0, 0.5), got {quantile}"
        )));
    }
    let d = first.shape().d;
    if let Some(bad) = corpus.iter().find(|t| t.shape().d != d) {
        return Err(Error::ShapeMismatch(format!(
            "corpus mixes d={d} and d={}",
            bad.shape().d
        )));
    }
    let count: usize = corpus.iter().map(|t| t.shape().spatial()).sum();
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(count);
    for dim in 0..d {
        column.clear();
        for t in corpus {
            column.extend(t.values().iter().skip(dim).step_by(d).map(|&v| v as f64));
        }
        column.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&column, quantile));
        hi.push(quantile_sorted(&column, 1.0 - quantile));
    }
    CalibrationStats::new(lo, hi, count as u64)
}

pub fn quantize(z: &FeatureTensor, spec: &QuantizerSpec) -> Result<TokenTensor> {
    let shape = z.shape();
    if shape.d != spec.d() {
        return Err(Error::ShapeMismatch(format!(
            "feature d={} but quantizer d={}",
            shape.d,
            spec.d()
        )));
    }
    let mut ids = Vec::with_capacity(shape.total());
    for (idx, &v) in z.values().iter().enumerate() {
        if v.is_nan() {
            return Err(Error::InvalidInput(format!("NaN at linear index {idx}")));
        }
        ids.push(spec.quantize_scalar(v as f64, idx % shape.d));
    }
    TokenTensor::new(shape, spec.levels(), ids)
}

pub fn dequantize(q: &TokenTensor, spec: &QuantizerSpec) -> Result<FeatureTensor> {
    let shape = q.shape();
    if q.levels() != spec.levels() {
        return Err(Error::ShapeMismatch(format!(
            "tokens have L={} but quantizer has L={}",
            q.levels(),
            spec.levels()
        )));
    }
    if shape.d != spec.d() {
        return Err(Error::ShapeMismatch(format!(
            "tokens d={} but quantizer d={}",
            shape.d,
            spec.d()
        )));
    }
    let values = q
        .ids()
        .iter()
        .enumerate()
        .map(|(idx, &id)| spec.dequantize_scalar(id, idx % shape.d) as f32)
        .collect();
    FeatureTensor::new(shape, values)
}

/// Mean absolute round-trip error per dimension.
pub fn roundtrip_error(z: &FeatureTensor, spec: &QuantizerSpec) -> Result<Vec<f64>> {
    let back = dequantize(&quantize(z, spec)?, spec)?;
    let d = z.shape().d;
    let mut err = vec![0.0; d];
    for (idx, (&a, &b)) in z.values().iter().zip(back.values()).enumerate() {
        err[idx % d] += (a as f64 - b as f64).abs();
    }
    let n = z.shape().spatial() as f64;
    err.iter_mut().for_each(|e| *e /= n);
    Ok(err)
}
