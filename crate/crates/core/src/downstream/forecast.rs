//! Ridge forecasting of the next `H` values from the representation of the
//! last observed step.

use serde::{Deserialize, Serialize};

use super::metrics::{mae, mse};
use super::ridge::{ridge_select, RIDGE_ALPHAS};
use super::{encode_windows, last_positions};
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::TRepModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    /// Window length `L` encoded to produce the representation of each step.
    #[serde(default = "defaults::lookback")]
    pub lookback: usize,
    #[serde(default = "defaults::horizons")]
    pub horizons: Vec<usize>,
    /// Leading fraction of every series used to fit the forecaster.
    #[serde(default = "defaults::train_frac")]
    pub train_frac: f64,
    /// Following fraction used to pick the ridge penalty.
    #[serde(default = "defaults::val_frac")]
    pub val_frac: f64,
    #[serde(default = "defaults::alphas")]
    pub alphas: Vec<f64>,
    /// Length of the pieces the training portion is cut into for encoder training.
    #[serde(default = "defaults::segment")]
    pub segment: usize,
}

mod defaults {
    pub fn lookback() -> usize {
        64
    }
    pub fn horizons() -> Vec<usize> {
        vec![1, 5]
    }
    pub fn train_frac() -> f64 {
        0.6
    }
    pub fn val_frac() -> f64 {
        0.2
    }
    pub fn alphas() -> Vec<f64> {
        super::RIDGE_ALPHAS.to_vec()
    }
    pub fn segment() -> usize {
        128
    }
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            lookback: defaults::lookback(),
            horizons: defaults::horizons(),
            train_frac: defaults::train_frac(),
            val_frac: defaults::val_frac(),
            alphas: defaults::alphas(),
            segment: defaults::segment(),
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.segment < 2 {
            return Err(Error::Config(format!(
                "forecast lookback must be positive and segment at least 2 (got {}, {})",
                self.lookback, self.segment
            )));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config(format!("forecast horizons must be positive, got {:?}", self.horizons)));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return Err(Error::Config(format!(
                "train/validation fractions {} + {} must leave a test split",
                self.train_frac, self.val_frac
            )));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("ridge penalties must be positive and non-empty".into()));
        }
        Ok(())
    }

    /// Boundaries `(train_end, val_end)` of the chronological split.
    pub fn split_points(&self, t: usize) -> (usize, usize) {
        let a = (t as f64 * self.train_frac).floor() as usize;
        let b = (t as f64 * (self.train_frac + self.val_frac)).floor() as usize;
        (a, b.max(a))
    }
}

/// Z-scores every channel with statistics of the training portion.
pub fn normalize(ds: &Dataset, cfg: &ForecastConfig) -> Result<(Dataset, ChannelStats)> {
    cfg.validate()?;
    let (train_end, _) = cfg.split_points(ds.t());
    if train_end == 0 {
        return Err(Error::Dataset(format!("series of length {} has an empty training split", ds.t())));
    }
    let stats = ds.slice_time(0, train_end)?.channel_stats();
    let mut out = ds.clone();
    out.apply_zscore(&stats)?;
    Ok((out, stats))
}

/// Training portion of a normalised dataset cut into pieces of
/// `cfg.segment` steps, used to fit the encoder.
pub fn training_segments(normalized: &Dataset, cfg: &ForecastConfig) -> Result<Dataset> {
    let (train_end, _) = cfg.split_points(normalized.t());
    let train = normalized.slice_time(0, train_end)?;
    train.segment(cfg.segment.min(train_end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonResult {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub persistence_mse: f64,
    pub persistence_mae: f64,
    pub alpha: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Samples `(instance, t)` with `t` in `[lo, hi)` whose targets `t+1..=t+h`
/// also lie before `hi`.
fn anchors(n: usize, lo: usize, hi: usize, h: usize, lookback: usize) -> Vec<(usize, usize)> {
    let first = lo.max(lookback - 1);
    (0..n).flat_map(|i| (first..hi.saturating_sub(h)).map(move |t| (i, t))).collect()
}

/// Evaluates ridge forecasting from representations on an already
/// normalised dataset. Horizons that leave no test samples are skipped.
pub fn forecast_eval(model: &TRepModel, normalized: &Dataset, cfg: &ForecastConfig) -> Result<Vec<HorizonResult>> {
    cfg.validate()?;
    if normalized.c() != model.arch.encoder.input_dims {
        return Err(Error::Dataset(format!(
            "dataset has {} channels, model expects {}",
            normalized.c(),
            model.arch.encoder.input_dims
        )));
    }
    let (t, c) = (normalized.t(), normalized.c());
    let (train_end, val_end) = cfg.split_points(t);
    let l = cfg.lookback.min(train_end.max(1));
    let f = model.repr_dims();

    // representations of every usable anchor, computed once
    let all = anchors(normalized.n(), 0, t, 0, l);
    let reps = last_positions(&encode_windows(model, normalized, &all, l, false)?);
    let rep_of = |i: usize, s: usize| &reps[i * (t + 1 - l) + s + 1 - l];

    let v = normalized.values.data();
    let mut results = Vec::new();
    for &h in &cfg.horizons {
        let build = |lo: usize, hi: usize| {
            let a = anchors(normalized.n(), lo, hi, h, l);
            let mut x = Vec::with_capacity(a.len() * f);
            let mut y = Vec::with_capacity(a.len() * h * c);
            let mut last = Vec::with_capacity(a.len() * h * c);
            for &(i, s) in &a {
                x.extend_from_slice(rep_of(i, s));
                let base = i * t + s;
                y.extend_from_slice(&v[(base + 1) * c..(base + 1 + h) * c]);
                for _ in 0..h {
                    last.extend_from_slice(&v[base * c..(base + 1) * c]);
                }
            }
            (a.len(), x, y, last)
        };
        let (n_tr, x_tr, y_tr, _) = build(0, train_end);
        let (n_va, x_va, y_va, _) = build(train_end, val_end);
        let (n_te, x_te, y_te, last) = build(val_end, t);
        if n_tr == 0 || n_va == 0 || n_te == 0 {
            log::warn!("horizon {h} leaves an empty split (train {n_tr}, val {n_va}, test {n_te}); skipping");
            continue;
        }
        let sel = ridge_select(&x_tr, &y_tr, &x_va, &y_va, f, h * c, &cfg.alphas)?;
        let pred = sel.model.predict(&x_te);
        results.push(HorizonResult {
            horizon: h,
            mse: mse(&pred, &y_te),
            mae: mae(&pred, &y_te),
            persistence_mse: mse(&last, &y_te),
            persistence_mae: mae(&last, &y_te),
            alpha: sel.model.alpha,
            train_rows: n_tr + n_va,
            test_rows: n_te,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_keep_targets_in_split() {
        let a = anchors(1, 10, 20, 3, 4);
        assert_eq!(a.first(), Some(&(0, 10)));
        assert_eq!(a.last(), Some(&(0, 16)));
        let a = anchors(2, 0, 10, 1, 4);
        assert_eq!(a.len(), 2 * 6);
        assert_eq!(a[0], (0, 3));
    }

    #[test]
    fn split_points_follow_fractions() {
        let cfg = ForecastConfig::default();
        assert_eq!(cfg.split_points(100), (60, 80));
    }
}
