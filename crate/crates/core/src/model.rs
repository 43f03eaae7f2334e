//! Trained model: architecture, parameters and eval-mode encoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_with_time, EncoderConfig, Masking};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tasks::init_head_params;
use crate::tensor::{Tape, Tensor};
use crate::time_embedding::TimeEmbeddingConfig;

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub time_embedding: TimeEmbeddingConfig,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.time_embedding.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TRepModel {
    pub arch: Architecture,
    pub params: ParamStore,
    /// Divisor applied to absolute timestep indices before embedding.
    pub time_scale: f64,
}

impl TRepModel {
    pub fn init(arch: Architecture, time_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if !(time_scale > 0.0) || !time_scale.is_finite() {
            return Err(Error::Config(format!("time scale must be positive, got {time_scale}")));
        }
        let mut params = ParamStore::new();
        let k = arch.time_embedding.dim;
        arch.time_embedding.init_params(&mut params, rng)?;
        arch.encoder.init_params(k, &mut params, rng)?;
        init_head_params(arch.encoder.repr_dims, k, &mut params, rng)?;
        Ok(Self { arch, params, time_scale })
    }

    pub fn repr_dims(&self) -> usize {
        self.arch.encoder.repr_dims
    }

    /// Eval-mode representations `[B,T,F]` of `x[B,T,C]` whose first step sits
    /// at absolute index `start`. `mask` (length `B*T`) zeroes projected steps.
    pub fn encode(&self, x: &Tensor, start: usize, mask: Option<&[bool]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let masking = match mask {
            Some(m) if m.iter().any(|&b| b) => Masking::Explicit(m),
            _ => Masking::None,
        };
        let (z, _) = encode_with_time::<ChaCha8Rng>(
            &self.arch.encoder,
            &self.arch.time_embedding,
            &mut tape,
            &bound,
            xv,
            start,
            self.time_scale,
            masking,
        )?;
        Ok(tape.value(z).clone())
    }

    /// Encodes `x[N,T,C]` in chunks of `batch` instances.
    pub fn encode_batched(&self, x: &Tensor, mask: Option<&[bool]>, batch: usize) -> Result<Tensor> {
        if x.ndim() != 3 {
            return Err(dim_err!("encode expects [N,T,C], got {:?}", x.shape()));
        }
        let (n, t) = (x.shape()[0], x.shape()[1]);
        if let Some(m) = mask {
            if m.len() != n * t {
                return Err(dim_err!("{} mask flags for {n} series of length {t}", m.len()));
            }
        }
        let batch = batch.max(1);
        let mut out = Vec::with_capacity(n * t * self.repr_dims());
        let mut i = 0;
        while i < n {
            let len = batch.min(n - i);
            let chunk = x.narrow(0, i, len)?;
            let m = mask.map(|m| &m[i * t..(i + len) * t]);
            out.extend(self.encode(&chunk, 0, m)?.into_data());
            i += len;
        }
        Tensor::new(vec![n, t, self.repr_dims()], out)
    }
}

/// Temporal resolution of exported representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "windows")]
pub enum Granularity {
    Timestep,
    Pooled(usize),
    Instance,
}

/// Representations `[N,T',F]` at some granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub values: Tensor,
    pub granularity: Granularity,
}

impl Representation {
    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    /// One flattened row of length `T'*F` per instance.
    pub fn flattened(&self) -> Vec<Vec<f64>> {
        let per = self.values.len() / self.n().max(1);
        self.values.data().chunks(per.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Max over each of `w` adaptive windows `[floor(iT/w), ceil((i+1)T/w))`.
pub fn adaptive_max_pool(z: &Tensor, w: usize) -> Result<Tensor> {
    if z.ndim() != 3 || w == 0 || w > z.shape()[1] {
        return Err(dim_err!("adaptive pool of {:?} into {w} windows", z.shape()));
    }
    let (n, t, f) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut out = Vec::with_capacity(n * w * f);
    for i in 0..n {
        for j in 0..w {
            let lo = j * t / w;
            let hi = ((j + 1) * t).div_ceil(w);
            let mut m = vec![f64::NEG_INFINITY; f];
            for s in lo..hi {
                let row = &z.data()[(i * t + s) * f..(i * t + s + 1) * f];
                for (a, &b) in m.iter_mut().zip(row) {
                    *a = a.max(b);
                }
            }
            out.extend(m);
        }
    }
    Tensor::new(vec![n, w, f], out)
}

/// Reduces timestep representations to the requested granularity.
pub fn pool_representation(z: Tensor, granularity: Granularity) -> Result<Representation> {
    if z.ndim() != 3 {
        return Err(dim_err!("representation must be [N,T,F], got {:?}", z.shape()));
    }
    let t = z.shape()[1];
    match granularity {
        Granularity::Timestep => Ok(Representation { values: z, granularity }),
        Granularity::Pooled(w) if w > t => {
            log::warn!("{w} pooling windows exceed series length {t}; keeping timestep granularity");
            Ok(Representation { values: z, granularity: Granularity::Timestep })
        }
        Granularity::Pooled(0) => Err(Error::Config("pooling needs at least one window".into())),
        Granularity::Pooled(w) => Ok(Representation { values: adaptive_max_pool(&z, w)?, granularity }),
        Granularity::Instance => Ok(Representation { values: adaptive_max_pool(&z, 1)?, granularity }),
    }
}
