//! Dense time-series datasets, normalisation and missing-value handling.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, save_csv};
pub use synth::{synth, SynthSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class id per instance.
    Instance(Vec<i64>),
    /// One flag per (instance, timestep), row-major `N*T`.
    Timestep(Vec<bool>),
}

/// `N` series of equal length `T` with `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N,T,C]`; zero wherever `missing` is set.
    pub values: Tensor,
    /// `N*T` flags marking timesteps with no observation.
    pub missing: Vec<bool>,
    pub labels: Option<Labels>,
}

/// Per-channel mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(values: Tensor, missing: Option<Vec<bool>>, labels: Option<Labels>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Dataset(format!("dataset must be [N,T,C], got {:?}", values.shape())));
        }
        let nt = values.shape()[0] * values.shape()[1];
        let missing = missing.unwrap_or_else(|| vec![false; nt]);
        if missing.len() != nt {
            return Err(Error::Dataset(format!("{} missing flags for {nt} timesteps", missing.len())));
        }
        match &labels {
            Some(Labels::Instance(l)) if l.len() != values.shape()[0] => {
                return Err(Error::Dataset(format!("{} labels for {} instances", l.len(), values.shape()[0])))
            }
            Some(Labels::Timestep(l)) if l.len() != nt => {
                return Err(Error::Dataset(format!("{} timestep labels for {nt} timesteps", l.len())))
            }
            _ => {}
        }
        let mut d = Self { values, missing, labels };
        d.zero_missing();
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn t(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn c(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn instance_labels(&self) -> Option<&[i64]> {
        match &self.labels {
            Some(Labels::Instance(l)) => Some(l),
            _ => None,
        }
    }

    pub fn timestep_labels(&self) -> Option<&[bool]> {
        match &self.labels {
            Some(Labels::Timestep(l)) => Some(l),
            _ => None,
        }
    }

    fn zero_missing(&mut self) {
        let c = self.c();
        let data = self.values.data_mut();
        for (i, &m) in self.missing.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].fill(0.0);
            }
        }
    }

    /// Mean and population deviation per channel over observed timesteps.
    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.c();
        let mut sum = vec![0.0; c];
        let mut count = 0usize;
        for (row, &m) in self.values.data().chunks(c).zip(&self.missing) {
            if !m {
                count += 1;
                sum.iter_mut().zip(row).for_each(|(s, x)| *s += x);
            }
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0.0; c];
        for (row, &m) in self.values.data().chunks(c).zip(&self.missing) {
            if !m {
                for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - mu) * (x - mu);
                }
            }
        }
        ChannelStats { mean, std: var.iter().map(|v| (v / n).sqrt()).collect() }
    }

    /// Standardises each channel with `stats`; channels with deviation below
    /// 1e-12 become 0. Missing timesteps stay 0.
    pub fn apply_zscore(&mut self, stats: &ChannelStats) -> Result<()> {
        let c = self.c();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(dim_err!("channel stats for {} channels applied to {c}", stats.mean.len()));
        }
        for (ch, s) in stats.std.iter().enumerate() {
            if *s < 1e-12 {
                log::warn!("channel {ch} is constant; setting it to 0");
            }
        }
        let missing = self.missing.clone();
        for (row, m) in self.values.data_mut().chunks_mut(c).zip(missing) {
            if m {
                continue;
            }
            for ((x, mu), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *x = if *s < 1e-12 { 0.0 } else { (*x - mu) / s };
            }
        }
        Ok(())
    }

    /// Standardises with this dataset's own statistics and returns them.
    pub fn zscore(&mut self) -> ChannelStats {
        let stats = self.channel_stats();
        self.apply_zscore(&stats).expect("stats computed from self");
        stats
    }

    /// Marks each (instance, timestep) missing with probability `fraction`.
    pub fn mask_fraction(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("mask fraction must be in [0, 1), got {fraction}")));
        }
        if fraction == 0.0 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in self.missing.iter_mut() {
            if rng.random::<f64>() < fraction {
                *m = true;
            }
        }
        self.zero_missing();
        Ok(())
    }

    /// Instances `idx` as `[B,T,C]` plus their missing flags.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        let (t, c) = (self.t(), self.c());
        let mut data = Vec::with_capacity(idx.len() * t * c);
        let mut miss = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            if i >= self.n() {
                return Err(Error::Dataset(format!("instance {i} out of range")));
            }
            data.extend_from_slice(&self.values.data()[i * t * c..(i + 1) * t * c]);
            miss.extend_from_slice(&self.missing[i * t..(i + 1) * t]);
        }
        Ok((Tensor::new(vec![idx.len(), t, c], data)?, miss))
    }

    /// Subset of instances, labels included.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let (values, missing) = self.gather(idx)?;
        let t = self.t();
        let labels = match &self.labels {
            None => None,
            Some(Labels::Instance(l)) => Some(Labels::Instance(idx.iter().map(|&i| l[i]).collect())),
            Some(Labels::Timestep(l)) => {
                Some(Labels::Timestep(idx.iter().flat_map(|&i| l[i * t..(i + 1) * t].iter().copied()).collect()))
            }
        };
        Self::new(values, Some(missing), labels)
    }

    /// Time range `[start, start+len)` of every instance.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.t() || len == 0 {
            return Err(Error::Dataset(format!("time slice {start}+{len} of length {}", self.t())));
        }
        let t = self.t();
        let values = self.values.narrow(1, start, len)?;
        let cut = |v: &[bool]| -> Vec<bool> {
            (0..self.n()).flat_map(|i| v[i * t + start..i * t + start + len].iter().copied()).collect()
        };
        let labels = match &self.labels {
            Some(Labels::Timestep(l)) => Some(Labels::Timestep(cut(l))),
            other => other.clone(),
        };
        Self::new(values, Some(cut(&self.missing)), labels)
    }

    /// Splits every instance into consecutive non-overlapping pieces of
    /// length `len`; a shorter tail is dropped.
    pub fn segment(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.t() {
            return Err(Error::Dataset(format!("segment length {len} for series of length {}", self.t())));
        }
        let pieces = self.t() / len;
        let (t, c) = (self.t(), self.c());
        let mut data = Vec::with_capacity(self.n() * pieces * len * c);
        let mut miss = Vec::new();
        let mut inst = Vec::new();
        let mut step = Vec::new();
        for i in 0..self.n() {
            for p in 0..pieces {
                let s = i * t + p * len;
                data.extend_from_slice(&self.values.data()[s * c..(s + len) * c]);
                miss.extend_from_slice(&self.missing[s..s + len]);
                match &self.labels {
                    Some(Labels::Instance(l)) => inst.push(l[i]),
                    Some(Labels::Timestep(l)) => step.extend_from_slice(&l[s..s + len]),
                    None => {}
                }
            }
        }
        let labels = match &self.labels {
            Some(Labels::Instance(_)) => Some(Labels::Instance(inst)),
            Some(Labels::Timestep(_)) => Some(Labels::Timestep(step)),
            None => None,
        };
        Self::new(Tensor::new(vec![self.n() * pieces, len, c], data)?, Some(miss), labels)
    }

    /// `d`-th order differences along time; the series shrinks by `d` steps.
    pub fn difference(&self, d: usize) -> Result<Self> {
        let mut cur = self.clone();
        for _ in 0..d {
            let (n, t, c) = (cur.n(), cur.t(), cur.c());
            if t < 2 {
                return Err(Error::Dataset("series too short to difference".into()));
            }
            let v = cur.values.data();
            let mut data = Vec::with_capacity(n * (t - 1) * c);
            let mut miss = Vec::with_capacity(n * (t - 1));
            for i in 0..n {
                for s in 1..t {
                    for ch in 0..c {
                        data.push(v[(i * t + s) * c + ch] - v[(i * t + s - 1) * c + ch]);
                    }
                    miss.push(cur.missing[i * t + s] || cur.missing[i * t + s - 1]);
                }
            }
            let labels = match &cur.labels {
                Some(Labels::Timestep(l)) => {
                    Some(Labels::Timestep((0..n).flat_map(|i| l[i * t + 1..(i + 1) * t].iter().copied()).collect()))
                }
                other => other.clone(),
            };
            cur = Self::new(Tensor::new(vec![n, t - 1, c], data)?, Some(miss), labels)?;
        }
        Ok(cur)
    }
}
