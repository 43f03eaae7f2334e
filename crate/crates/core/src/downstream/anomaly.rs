//! Streaming anomaly scoring from the gap between masked and unmasked
//! representations, and windowed anomaly classification.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, binary_scores, f1_with_delay, BinaryScores};
use super::svm::{fit_with_cv, C_GRID};
use super::{encode_windows, last_positions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TRepModel;

/// Guard on the trailing mean in the adjusted score.
pub const SCORE_EPS: f64 = 1e-12;

/// Threshold multipliers tried when `beta` is selected on the validation prefix.
pub const BETA_GRID: [f64; 15] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 6.0, 7.0, 8.0, 10.0, 12.0, 15.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyConfig {
    /// Trailing window `Z` averaged to adjust each score.
    #[serde(default = "defaults::z_window")]
    pub z_window: usize,
    /// Threshold multiplier on the historical deviation.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    /// Steps after a true anomaly in which a flag still counts.
    #[serde(default = "defaults::delay")]
    pub delay: usize,
    /// Differencing order applied before scoring.
    #[serde(default)]
    pub differencing: usize,
    /// Length of the window encoded to score each step.
    #[serde(default = "defaults::lookback")]
    pub lookback: usize,
    #[serde(default = "defaults::zscore")]
    pub zscore: bool,
    /// Leading fraction of each series used for training and threshold selection.
    #[serde(default = "defaults::val_frac")]
    pub val_frac: f64,
    /// Length of the pieces the prefix is cut into for encoder training.
    #[serde(default = "defaults::segment")]
    pub segment: usize,
}

mod defaults {
    pub fn z_window() -> usize {
        21
    }
    pub fn beta() -> f64 {
        4.0
    }
    pub fn delay() -> usize {
        7
    }
    pub fn lookback() -> usize {
        64
    }
    pub fn zscore() -> bool {
        true
    }
    pub fn val_frac() -> f64 {
        0.5
    }
    pub fn segment() -> usize {
        128
    }
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            z_window: defaults::z_window(),
            beta: defaults::beta(),
            delay: defaults::delay(),
            differencing: 0,
            lookback: defaults::lookback(),
            zscore: defaults::zscore(),
            val_frac: defaults::val_frac(),
            segment: defaults::segment(),
        }
    }
}

impl AnomalyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_window == 0 {
            return Err(Error::Config("anomaly z_window must be at least 1".into()));
        }
        if self.lookback == 0 || self.segment < 2 {
            return Err(Error::Config(format!(
                "anomaly lookback must be positive and segment at least 2 (got {}, {})",
                self.lookback, self.segment
            )));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite, got {}", self.beta)));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Config(format!("val_frac must be in (0, 1), got {}", self.val_frac)));
        }
        Ok(())
    }

    fn split(&self, t: usize) -> usize {
        (t as f64 * self.val_frac).floor() as usize
    }
}

/// Differences the series, then z-scores with statistics of the prefix.
pub fn prepare(ds: &Dataset, cfg: &AnomalyConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut out = ds.difference(cfg.differencing)?;
    if cfg.zscore {
        let split = cfg.split(out.t()).max(1);
        let stats = out.slice_time(0, split)?.channel_stats();
        out.apply_zscore(&stats)?;
    }
    Ok(out)
}

/// Prefix of a prepared dataset cut into training pieces of `cfg.segment` steps.
pub fn training_prefix(prepared: &Dataset, cfg: &AnomalyConfig) -> Result<Dataset> {
    let split = cfg.split(prepared.t());
    prepared.slice_time(0, split)?.segment(cfg.segment.min(split))
}

/// `||r_t - r'_t||_1` for every step of every instance, where `r'` comes from
/// the same trailing window with its last step masked. Returns `N` rows of
/// length `T`.
pub fn raw_scores(model: &TRepModel, prepared: &Dataset, lookback: usize) -> Result<Vec<Vec<f64>>> {
    let (n, t) = (prepared.n(), prepared.t());
    let mut out = vec![vec![0.0; t]; n];
    let full = lookback.min(t);
    let mut groups: Vec<(usize, Vec<(usize, usize)>)> =
        (1..full).map(|len| (len, (0..n).map(|i| (i, len - 1)).collect())).collect();
    groups.push((full, (0..n).flat_map(|i| (full - 1..t).map(move |s| (i, s))).collect()));
    for (len, windows) in groups {
        let u = last_positions(&encode_windows(model, prepared, &windows, len, false)?);
        let m = last_positions(&encode_windows(model, prepared, &windows, len, true)?);
        for ((&(i, s), a), b) in windows.iter().zip(&u).zip(&m) {
            out[i][s] = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        }
    }
    Ok(out)
}

/// `(a_t - mean) / max(mean, eps)` with `mean` over the up to `z` preceding
/// scores; the first step has no history and scores 0.
pub fn adjust_scores(raw: &[f64], z: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    let mut sum = 0.0;
    for (t, &a) in raw.iter().enumerate() {
        if t > z {
            sum -= raw[t - z - 1];
        }
        let count = t.min(z);
        if count == 0 {
            out.push(0.0);
        } else {
            let mean = sum / count as f64;
            out.push((a - mean) / mean.max(SCORE_EPS));
        }
        sum += a;
    }
    out
}

/// Flags `t >= z` whose adjusted score exceeds `mu + beta*sigma` of the
/// adjusted scores in `[z, t)`; at least two historical values are needed.
pub fn flag_scores(adjusted: &[f64], z: usize, beta: f64) -> Vec<bool> {
    let mut flags = vec![false; adjusted.len()];
    let (mut s1, mut s2, mut count) = (0.0, 0.0, 0usize);
    for t in z..adjusted.len() {
        if count >= 2 {
            let mu = s1 / count as f64;
            let var = (s2 / count as f64 - mu * mu).max(0.0);
            flags[t] = adjusted[t] > mu + beta * var.sqrt();
        }
        s1 += adjusted[t];
        s2 += adjusted[t] * adjusted[t];
        count += 1;
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamScores {
    pub raw: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub flags: Vec<bool>,
}

/// Scores and flags every step of a prepared dataset with `cfg.beta`.
pub fn score_stream(model: &TRepModel, prepared: &Dataset, cfg: &AnomalyConfig) -> Result<Vec<StreamScores>> {
    cfg.validate()?;
    raw_scores(model, prepared, cfg.lookback)?
        .into_iter()
        .map(|raw| {
            let adjusted = adjust_scores(&raw, cfg.z_window);
            let flags = flag_scores(&adjusted, cfg.z_window, cfg.beta);
            Ok(StreamScores { raw, adjusted, flags })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub beta: f64,
    /// Delay-credited scores on the validation prefix at the chosen `beta`.
    pub validation: BinaryScores,
    /// Delay-credited scores on the remainder.
    pub test: BinaryScores,
    pub streams: Vec<StreamScores>,
}

fn pooled_delay_f1(
    streams: &[StreamScores],
    flags: &[Vec<bool>],
    truth: &[bool],
    range: std::ops::Range<usize>,
    delay: usize,
) -> Result<BinaryScores> {
    let t = streams.first().map_or(0, |s| s.raw.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (i, f) in flags.iter().enumerate() {
        let s = f1_with_delay(&f[range.clone()], &truth[i * t + range.start..i * t + range.end], delay)?;
        tp += s.true_positives;
        fp += s.false_positives;
        fn_ += s.false_negatives;
    }
    Ok(BinaryScores::from_counts(tp, fp, fn_))
}

/// Full protocol on a prepared dataset with per-step labels: scores every
/// step, picks `beta` from `grid` by delay-credited F1 on the prefix (the
/// lower median of the tied best values; `None` keeps `cfg.beta`) and reports
/// F1 on the remainder.
pub fn evaluate_stream(
    model: &TRepModel,
    prepared: &Dataset,
    cfg: &AnomalyConfig,
    grid: Option<&[f64]>,
) -> Result<AnomalyResult> {
    cfg.validate()?;
    let truth = prepared
        .timestep_labels()
        .ok_or_else(|| Error::Dataset("anomaly evaluation needs per-timestep labels".into()))?
        .to_vec();
    let t = prepared.t();
    let split = cfg.split(t);
    let mut streams = score_stream(model, prepared, cfg)?;
    let flags_for = |beta: f64, streams: &[StreamScores]| -> Vec<Vec<bool>> {
        streams.iter().map(|s| flag_scores(&s.adjusted, cfg.z_window, beta)).collect()
    };
    let candidates: Vec<f64> = grid.map_or_else(|| vec![cfg.beta], <[f64]>::to_vec);
    if candidates.is_empty() {
        return Err(Error::Config("empty beta grid".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for &beta in &candidates {
        scored.push((beta, pooled_delay_f1(&streams, &flags_for(beta, &streams), &truth, 0..split, cfg.delay)?));
    }
    let top = scored.iter().map(|s| s.1.f1).fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<&(f64, BinaryScores)> = scored.iter().filter(|s| s.1.f1 == top).collect();
    tied.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (beta, validation) = *tied[(tied.len() - 1) / 2];
    let flags = flags_for(beta, &streams);
    let test = pooled_delay_f1(&streams, &flags, &truth, split..t, cfg.delay)?;
    for (s, f) in streams.iter_mut().zip(flags) {
        s.flags = f;
    }
    Ok(AnomalyResult { beta, validation, test, streams })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedResult {
    pub scores: BinaryScores,
    pub accuracy: f64,
    pub best_c: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Labels the final step of every length-`window` sliding window from its
/// flattened representation. Instances are split `train_frac` / rest after
/// a seeded shuffle.
pub fn windowed_anomaly_classify(
    model: &TRepModel,
    ds: &Dataset,
    window: usize,
    train_frac: f64,
    seed: u64,
) -> Result<WindowedResult> {
    let labels = ds
        .timestep_labels()
        .ok_or_else(|| Error::Dataset("windowed classification needs per-timestep labels".into()))?;
    let (n, t) = (ds.n(), ds.t());
    if window == 0 || window > t {
        return Err(Error::Config(format!("window {window} for series of length {t}")));
    }
    if n < 2 {
        return Err(Error::Dataset("windowed classification needs at least two instances".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_frac).round() as usize).clamp(1, n - 1);
    let rows = |inst: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let w: Vec<(usize, usize)> = inst.iter().flat_map(|&i| (window - 1..t).map(move |s| (i, s))).collect();
        let z = encode_windows(model, ds, &w, window, false)?;
        let per = window * model.repr_dims();
        let x = z.data().chunks(per).map(<[f64]>::to_vec).collect();
        let y = w.iter().map(|&(i, s)| labels[i * t + s]).collect();
        Ok((x, y))
    };
    let (xtr, ytr) = rows(&order[..cut])?;
    let (xte, yte) = rows(&order[cut..])?;
    if !ytr.iter().any(|&y| y) {
        return Err(Error::Dataset("no positive labels in the training split".into()));
    }
    let to_i = |v: &[bool]| v.iter().map(|&b| i64::from(b)).collect::<Vec<_>>();
    let (clf, cv) = fit_with_cv(&xtr, &to_i(&ytr), &C_GRID, 5, seed)?;
    let pred: Vec<bool> = clf.predict(&xte).into_iter().map(|p| p == 1).collect();
    Ok(WindowedResult {
        scores: binary_scores(&pred, &yte)?,
        accuracy: accuracy(&pred, &yte),
        best_c: cv.best_c,
        train_rows: xtr.len(),
        test_rows: xte.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_history_adjusts_to_zero() {
        let adj = adjust_scores(&[2.0; 30], 21);
        assert!(adj.iter().all(|&a| a == 0.0));
        let adj = adjust_scores(&[0.0; 5], 3);
        assert!(adj.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn trailing_mean_uses_preceding_window() {
        let raw = [1.0, 3.0, 5.0, 7.0];
        let adj = adjust_scores(&raw, 2);
        assert_eq!(adj[1], (3.0 - 1.0) / 1.0);
        assert_eq!(adj[2], (5.0 - 2.0) / 2.0);
        assert_eq!(adj[3], (7.0 - 4.0) / 4.0);
    }

    #[test]
    fn no_flags_before_warmup() {
        let mut adj = vec![0.0; 40];
        adj[5] = 100.0;
        adj[30] = 100.0;
        adj[25] = 0.1;
        let f = flag_scores(&adj, 21, 3.0);
        assert!(!f[5]);
        assert!(f[30]);
        assert_eq!(f.iter().filter(|&&x| x).count(), 2);
    }
}
