//! Shape and tensor vocabulary shared by every stage of the pipeline.
//!
//! All tensors are dense and row-major over `(x, y, i)` with the feature
//! dimension `i` innermost, so the `d` values of one spatial position form a
//! contiguous span.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of an `h x w x d` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Shape3 {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidShape(format!(
                "all extents must be positive, got ({h}, {w}, {d})"
            )));
        }
        h.checked_mul(w)
            .and_then(|hw| hw.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(format!("({h}, {w}, {d}) overflows usize")))?;
        Ok(Shape3 { h, w, d })
    }

    /// Number of spatial positions, `h * w`.
    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Number of scalar slots, `h * w * d`.
    pub fn total(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn flat_index(&self, x: usize, y: usize, i: usize) -> Result<usize> {
        if x >= self.h || y >= self.w || i >= self.d {
            return Err(Error::OutOfBounds {
                shape: *self,
                x,
                y,
                i,
            });
        }
        Ok((x * self.w + y) * self.d + i)
    }

    /// Inverse of [`Shape3::flat_index`]. Caller guarantees `idx < total()`.
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.d;
        let pos = idx / self.d;
        (pos / self.w, pos % self.w, i)
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.h, self.w, self.d)
    }
}

/// Free-function form of [`Shape3::flat_index`].
pub fn flat_index(shape: Shape3, x: usize, y: usize, i: usize) -> Result<usize> {
    shape.flat_index(x, y, i)
}

/// Continuous encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    shape: Shape3,
    values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(shape: Shape3, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.total() {
            return Err(Error::ShapeMismatch(format!(
                "feature tensor {shape} needs {} values, got {}",
                shape.total(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite feature value at linear index {pos}"
            )));
        }
        Ok(FeatureTensor { shape, values })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Discrete level indices, each in `[0, levels)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenTensor {
    shape: Shape3,
    levels: usize,
    ids: Vec<u16>,
}

impl TokenTensor {
    pub fn new(shape: Shape3, levels: usize, ids: Vec<u16>) -> Result<Self> {
        if levels == 0 || levels > u16::MAX as usize + 1 {
            return Err(Error::InvalidInput(format!(
                "levels must be in [1, 65536], got {levels}"
            )));
        }
        if ids.len() != shape.total() {
            return Err(Error::ShapeMismatch(format!(
                "token tensor {shape} needs {} ids, got {}",
                shape.total(),
                ids.len()
            )));
        }
        if let Some(pos) = ids.iter().position(|&id| id as usize >= levels) {
            return Err(Error::InvalidInput(format!(
                "id {} at linear index {pos} is not below levels {levels}",
                ids[pos]
            )));
        }
        Ok(TokenTensor { shape, levels, ids })
    }

    pub fn zeros(shape: Shape3, levels: usize) -> Result<Self> {
        Self::new(shape, levels, vec![0; shape.total()])
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn get(&self, idx: usize) -> u16 {
        self.ids[idx]
    }

    pub fn set(&mut self, idx: usize, id: u16) -> Result<()> {
        if id as usize >= self.levels {
            return Err(Error::InvalidInput(format!(
                "id {id} is not below levels {}",
                self.levels
            )));
        }
        self.ids[idx] = id;
        Ok(())
    }
}

/// Binary mask, `true` marks a masked slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskTensor {
    shape: Shape3,
    flags: Vec<bool>,
}

impl MaskTensor {
    pub fn new(shape: Shape3, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != shape.total() {
            return Err(Error::ShapeMismatch(format!(
                "mask {shape} needs {} flags, got {}",
                shape.total(),
                flags.len()
            )));
        }
        Ok(MaskTensor { shape, flags })
    }

    pub fn empty(shape: Shape3) -> Self {
        MaskTensor {
            shape,
            flags: vec![false; shape.total()],
        }
    }

    pub fn full(shape: Shape3) -> Self {
        MaskTensor {
            shape,
            flags: vec![true; shape.total()],
        }
    }

    pub fn from_indices(shape: Shape3, indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(shape);
        for &idx in indices {
            if idx >= shape.total() {
                return Err(Error::InvalidInput(format!(
                    "mask index {idx} out of range for shape {shape}"
                )));
            }
            m.flags[idx] = true;
        }
        Ok(m)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        self.flags[idx]
    }

    pub fn set(&mut self, idx: usize, masked: bool) {
        self.flags[idx] = masked;
    }

    pub fn count_masked(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Linear indices of masked slots in increasing order.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

pub fn count_masked(m: &MaskTensor) -> usize {
    m.count_masked()
}
