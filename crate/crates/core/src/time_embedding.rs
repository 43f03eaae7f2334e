//! Learned time embeddings: timestep index to a point on the probability simplex.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{jsd_clamped, kernels, Tape, Tensor, Var};

/// Architecture of the time-embedding function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeKind {
    Time2vec,
    Mlp,
    Rbf,
}

impl fmt::Display for TeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeKind::Time2vec => "time2vec",
            TeKind::Mlp => "mlp",
            TeKind::Rbf => "rbf",
        })
    }
}

impl FromStr for TeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time2vec" => Ok(TeKind::Time2vec),
            "mlp" => Ok(TeKind::Mlp),
            "rbf" => Ok(TeKind::Rbf),
            other => Err(Error::Config(format!("unknown time-embedding kind '{other}'"))),
        }
    }
}

/// Shape of the time-embedding module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeEmbeddingConfig {
    pub kind: TeKind,
    /// Output dimension `K`.
    pub dim: usize,
    /// Hidden width of the `mlp` kind.
    #[serde(default = "default_te_hidden")]
    pub hidden: usize,
}

fn default_te_hidden() -> usize {
    64
}

impl Default for TimeEmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: TeKind::Time2vec,
            dim: 32,
            hidden: default_te_hidden(),
        }
    }
}

impl TimeEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "time-embedding dim must be at least 2, got {}",
                self.dim
            )));
        }
        if self.kind == TeKind::Mlp && self.hidden == 0 {
            return Err(Error::Config("time-embedding hidden width must be positive".into()));
        }
        Ok(())
    }

    /// Adds freshly initialised parameters under the `te.` prefix.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let k = self.dim;
        match self.kind {
            TeKind::Time2vec => {
                let hi = 2.0 * PI * k as f64;
                store.insert("te.omega", Tensor::from_fn(&[k], |_| rng.random_range(0.0..hi)))?;
                store.insert("te.phi", Tensor::from_fn(&[k], |_| rng.random_range(0.0..2.0 * PI)))?;
            }
            TeKind::Mlp => {
                let h = self.hidden;
                store.insert_uniform("te.w1", &[h, 1], 1.0, rng)?;
                store.insert_uniform("te.b1", &[h], 1.0, rng)?;
                let b = 1.0 / (h as f64).sqrt();
                store.insert_uniform("te.w2", &[k, h], b, rng)?;
                store.insert_uniform("te.b2", &[k], b, rng)?;
            }
            TeKind::Rbf => {
                // centres spread over the unit interval, widths near the spacing
                let centres = Tensor::from_fn(&[k], |i| (i as f64 + 0.5) / k as f64);
                let log_bw = (k * k) as f64;
                store.insert("te.centers", centres)?;
                store.insert("te.log_bw", Tensor::from_fn(&[k], |_| log_bw.ln() + rng.random_range(-0.1..0.1)))?;
            }
        }
        Ok(())
    }

    /// Unnormalised features `[L,K]` for scaled times.
    pub fn raw(&self, tape: &mut Tape, params: &Bound, times: &[f64]) -> Result<Var> {
        match self.kind {
            TeKind::Time2vec => tape.time2vec(times, params.var("te.omega")?, params.var("te.phi")?),
            TeKind::Mlp => {
                let t = tape.constant(Tensor::new(vec![times.len(), 1], times.to_vec())?);
                let h = tape.linear(t, params.var("te.w1")?, Some(params.var("te.b1")?))?;
                let h = tape.relu(h);
                tape.linear(h, params.var("te.w2")?, Some(params.var("te.b2")?))
            }
            TeKind::Rbf => tape.rbf_features(times, params.var("te.centers")?, params.var("te.log_bw")?),
        }
    }

    /// Simplex-valued embeddings `[L,K]`: sigmoid, then divide by the row sum.
    pub fn embed(&self, tape: &mut Tape, params: &Bound, times: &[f64]) -> Result<Var> {
        let raw = self.raw(tape, params, times)?;
        let s = tape.sigmoid(raw);
        tape.normalize_last(s)
    }

    /// Embeddings for absolute indices `start..start+len`, scaled by `1/time_scale`.
    pub fn embed_range(
        &self,
        tape: &mut Tape,
        params: &Bound,
        start: usize,
        len: usize,
        time_scale: f64,
    ) -> Result<Var> {
        let times = scaled_times(start, len, time_scale);
        self.embed(tape, params, &times)
    }
}

pub fn scaled_times(start: usize, len: usize, time_scale: f64) -> Vec<f64> {
    (start..start + len).map(|t| t as f64 / time_scale).collect()
}

/// Elementwise sigmoid followed by division by the sum.
pub fn normalize_simplex(v: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = v.iter().map(|&x| kernels::sigmoid(x)).collect();
    let total: f64 = s.iter().sum();
    s.into_iter().map(|x| x / total).collect()
}

/// Jensen-Shannon divergence with natural logarithms, in `[0, ln 2]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("jsd of lengths {} and {}", p.len(), q.len())));
    }
    if let Some(x) = p.iter().chain(q).find(|x| !(**x >= 0.0)) {
        return Err(Error::Contract(format!("jsd needs non-negative components, got {x}")));
    }
    Ok(jsd_clamped(p, q).max(0.0))
}
