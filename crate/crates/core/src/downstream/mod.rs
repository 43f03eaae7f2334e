//! Evaluation protocols operating on frozen representations.

pub mod anomaly;
pub mod classify;
pub mod forecast;
pub mod metrics;
pub mod ridge;
pub mod svm;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TRepModel;
use crate::tensor::Tensor;

const WINDOW_BATCH: usize = 64;

/// Encodes equal-length windows `[end+1-len, end]` of instance `i` for each
/// `(i, end)`, each with time indices starting at 0. Missing timesteps are
/// masked; `mask_last` additionally masks each window's final step.
/// Returns `[W, len, F]`.
pub fn encode_windows(
    model: &TRepModel,
    ds: &Dataset,
    windows: &[(usize, usize)],
    len: usize,
    mask_last: bool,
) -> Result<Tensor> {
    let (t, c, f) = (ds.t(), ds.c(), model.repr_dims());
    if len == 0 {
        return Err(Error::Parameter("window length must be positive".into()));
    }
    for &(i, end) in windows {
        if i >= ds.n() || end >= t || end + 1 < len {
            return Err(Error::Dataset(format!("window ending at {end} of length {len} in instance {i}")));
        }
    }
    let mut out = Vec::with_capacity(windows.len() * len * f);
    for chunk in windows.chunks(WINDOW_BATCH) {
        let mut x = Vec::with_capacity(chunk.len() * len * c);
        let mut mask = Vec::with_capacity(chunk.len() * len);
        for &(i, end) in chunk {
            let s = i * t + end + 1 - len;
            x.extend_from_slice(&ds.values.data()[s * c..(s + len) * c]);
            mask.extend_from_slice(&ds.missing[s..s + len]);
            if mask_last {
                *mask.last_mut().expect("len > 0") = true;
            }
        }
        let x = Tensor::new(vec![chunk.len(), len, c], x)?;
        out.extend(model.encode(&x, 0, Some(&mask))?.into_data());
    }
    Tensor::new(vec![windows.len(), len, f], out)
}

/// Final-position representation `[F]` of each window.
pub(crate) fn last_positions(z: &Tensor) -> Vec<Vec<f64>> {
    let (len, f) = (z.shape()[1], z.shape()[2]);
    z.data().chunks(len * f).map(|w| w[(len - 1) * f..].to_vec()).collect()
}
