//! Overlapping random crops for contextual consistency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Crop boundaries with `0 <= a1 <= a2 < b1 <= b2 <= T`.
/// View 1 is `[a1, b1)`, view 2 is `[a2, b2)`, the overlap is `[a2, b1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub a1: usize,
    pub a2: usize,
    pub b1: usize,
    pub b2: usize,
}

impl Crop {
    pub fn full(t: usize) -> Self {
        Self { a1: 0, a2: 0, b1: t, b2: t }
    }

    pub fn overlap_len(&self) -> usize {
        self.b1 - self.a2
    }

    /// Position of the overlap start inside view 1.
    pub fn overlap_offset(&self) -> usize {
        self.a2 - self.a1
    }

    pub fn is_valid(&self, t: usize) -> bool {
        self.a1 <= self.a2
            && self.a2 < self.b1
            && self.b1 <= self.b2
            && self.b2 <= t
            && self.b1 - self.a1 >= 2
            && self.b2 - self.a2 >= 2
    }
}

/// Draws the overlap first, then widens it to the left for view 1 and to the
/// right for view 2. Both views are at least two steps long.
pub fn sample_crops(t: usize, rng: &mut impl Rng) -> Result<Crop> {
    if t < 2 {
        return Err(Error::Dataset(format!("crops need a series of length >= 2, got {t}")));
    }
    loop {
        let p = rng.random_range(0..=t);
        let mut q = rng.random_range(0..t);
        if q >= p {
            q += 1;
        }
        let (a2, b1) = (p.min(q), p.max(q));
        if b1 < 2 || a2 + 2 > t {
            continue;
        }
        let a1 = rng.random_range(0..=a2.min(b1 - 2));
        let b2 = rng.random_range(b1.max(a2 + 2)..=t);
        return Ok(Crop { a1, a2, b1, b2 });
    }
}

/// Two cropped views of a batch sharing one crop tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPair {
    pub view1: Tensor,
    pub view2: Tensor,
    pub crop: Crop,
}

impl ContextPair {
    /// Slices `batch[B,T,C]` along time.
    pub fn from_crop(batch: &Tensor, crop: Crop) -> Result<Self> {
        if batch.ndim() != 3 {
            return Err(dim_err!("context pair needs [B,T,C], got {:?}", batch.shape()));
        }
        if !crop.is_valid(batch.shape()[1]) {
            return Err(dim_err!("crop {crop:?} invalid for length {}", batch.shape()[1]));
        }
        Ok(Self {
            view1: batch.narrow(1, crop.a1, crop.b1 - crop.a1)?,
            view2: batch.narrow(1, crop.a2, crop.b2 - crop.a2)?,
            crop,
        })
    }
}

pub fn make_context_pair(batch: &Tensor, rng: &mut impl Rng) -> Result<ContextPair> {
    if batch.ndim() != 3 {
        return Err(dim_err!("context pair needs [B,T,C], got {:?}", batch.shape()));
    }
    let crop = sample_crops(batch.shape()[1], rng)?;
    ContextPair::from_crop(batch, crop)
}
