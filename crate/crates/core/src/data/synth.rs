// Seeded generators for the synthetic benchmarks.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    /// Class `c` is a sine with `2^c` cycles per series, random phase, plus noise.
    MulticlassSines {
        n: usize,
        t: usize,
        #[serde(default = "three")]
        classes: usize,
        #[serde(default = "one")]
        channels: usize,
        noise: f64,
    },
    /// One sine series with `spikes` labelled additive spikes of
    /// `spike_sigma` times the clean series deviation.
    SpikeAnomalies {
        t: usize,
        spikes: usize,
        spike_sigma: f64,
        #[serde(default = "default_period")]
        period: f64,
        #[serde(default = "default_spike_noise")]
        noise: f64,
    },
    /// Series whose level, variance and frequency change at a labelled point.
    RegimeShift {
        n: usize,
        t: usize,
        /// Defaults to a uniformly drawn point in the middle half.
        #[serde(default)]
        changepoint: Option<usize>,
        #[serde(default = "default_spike_noise")]
        noise: f64,
    },
    /// `x[t+1] = rho x[t] + eps`, `eps ~ N(0, noise^2)`, started stationary.
    Ar1 {
        n: usize,
        t: usize,
        rho: f64,
        #[serde(default = "one_f")]
        noise: f64,
    },
}

fn three() -> usize {
    3
}
fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_period() -> f64 {
    50.0
}
fn default_spike_noise() -> f64 {
    0.1
}

fn normal(sd: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sd).map_err(|e| Error::Config(format!("noise level {sd}: {e}")))
}

pub fn synth(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = |m: String| Err(Error::Config(m));
    match *spec {
        SynthSpec::MulticlassSines { n, t, classes, channels, noise } => {
            if n == 0 || t < 2 || classes == 0 || classes > 8 || channels == 0 {
                return cfg(format!("multiclass_sines: n={n}, t={t}, classes={classes}, channels={channels}"));
            }
            let eps = normal(noise.max(0.0))?;
            let mut labels: Vec<i64> = (0..n).map(|i| (i % classes) as i64).collect();
            labels.shuffle(&mut rng);
            let mut data = Vec::with_capacity(n * t * channels);
            let phases: Vec<Vec<f64>> =
                (0..n).map(|_| (0..channels).map(|_| rng.random_range(0.0..2.0 * PI)).collect()).collect();
            for (i, &lab) in labels.iter().enumerate() {
                let f = (1u32 << lab) as f64;
                for s in 0..t {
                    for phase in &phases[i] {
                        let clean = (2.0 * PI * f * s as f64 / t as f64 + phase).sin();
                        let e = if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 };
                        data.push(clean + e);
                    }
                }
            }
            Dataset::new(Tensor::new(vec![n, t, channels], data)?, None, Some(Labels::Instance(labels)))
        }
        SynthSpec::SpikeAnomalies { t, spikes, spike_sigma, period, noise } => {
            if t < 10 || spikes == 0 || spikes * 10 > t || !(period > 1.0) {
                return cfg(format!("spike_anomalies: t={t}, spikes={spikes}, period={period}"));
            }
            let eps = normal(noise.max(0.0))?;
            let clean: Vec<f64> = (0..t).map(|s| (2.0 * PI * s as f64 / period).sin()).collect();
            let mean = clean.iter().sum::<f64>() / t as f64;
            let sd = (clean.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t as f64).sqrt();
            let mut x: Vec<f64> =
                clean.iter().map(|c| c + if noise > 0.0 { eps.sample(&mut rng) } else { 0.0 }).collect();
            let mut flags = vec![false; t];
            // one spike per stratum, away from stratum edges and the series start
            let start = t / 10;
            let width = (t - start) / spikes;
            for k in 0..spikes {
                let lo = start + k * width + width / 4;
                let hi = start + k * width + 3 * width / 4;
                let pos = rng.random_range(lo..hi.max(lo + 1));
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                x[pos] += sign * spike_sigma * sd;
                flags[pos] = true;
            }
            Dataset::new(Tensor::new(vec![1, t, 1], x)?, None, Some(Labels::Timestep(flags)))
        }
        SynthSpec::RegimeShift { n, t, changepoint, noise } => {
            if n == 0 || t < 8 || changepoint.is_some_and(|c| c == 0 || c >= t) {
                return cfg(format!("regime_shift: n={n}, t={t}, changepoint={changepoint:?}"));
            }
            let eps = normal(noise.max(0.0))?;
            let mut data = Vec::with_capacity(n * t);
            let mut flags = Vec::with_capacity(n * t);
            for _ in 0..n {
                let cp = changepoint.unwrap_or_else(|| rng.random_range(t / 4..3 * t / 4));
                let phase = rng.random_range(0.0..2.0 * PI);
                for s in 0..t {
                    let after = s >= cp;
                    let (freq, amp, level, sd) = if after { (4.0, 2.0, 1.5, 3.0) } else { (1.0, 1.0, 0.0, 1.0) };
                    let e = if noise > 0.0 { sd * eps.sample(&mut rng) } else { 0.0 };
                    data.push(level + amp * (2.0 * PI * freq * s as f64 / t as f64 + phase).sin() + e);
                    flags.push(after);
                }
            }
            Dataset::new(Tensor::new(vec![n, t, 1], data)?, None, Some(Labels::Timestep(flags)))
        }
        SynthSpec::Ar1 { n, t, rho, noise } => {
            if n == 0 || t < 2 || !(rho.abs() < 1.0) || !(noise > 0.0) {
                return cfg(format!("ar1: n={n}, t={t}, rho={rho}, noise={noise}"));
            }
            let eps = normal(noise)?;
            let stationary = normal(noise / (1.0 - rho * rho).sqrt())?;
            let mut data = Vec::with_capacity(n * t);
            for _ in 0..n {
                let mut x = stationary.sample(&mut rng);
                for _ in 0..t {
                    data.push(x);
                    x = rho * x + eps.sample(&mut rng);
                }
            }
            Dataset::new(Tensor::new(vec![n, t, 1], data)?, None, None)
        }
    }
}
