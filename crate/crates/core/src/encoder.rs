//! Dilated convolutional encoder producing one representation per timestep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::time_embedding::TimeEmbeddingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input channels `C`; 0 in a run config means "take it from the data".
    #[serde(default)]
    pub input_dims: usize,
    /// Representation width `F`.
    #[serde(default = "defaults::repr_dims")]
    pub repr_dims: usize,
    /// Channel width inside the residual stack.
    #[serde(default = "defaults::hidden_dims")]
    pub hidden_dims: usize,
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::kernel")]
    pub kernel: usize,
    /// Probability that a timestep is zeroed during training.
    #[serde(default = "defaults::mask_prob")]
    pub mask_prob: f64,
}

pub(crate) mod defaults {
    pub fn repr_dims() -> usize {
        128
    }
    pub fn hidden_dims() -> usize {
        128
    }
    pub fn depth() -> usize {
        10
    }
    pub fn kernel() -> usize {
        3
    }
    pub fn mask_prob() -> f64 {
        0.5
    }
}

impl EncoderConfig {
    pub fn new(input_dims: usize) -> Self {
        Self {
            input_dims,
            repr_dims: defaults::repr_dims(),
            hidden_dims: defaults::hidden_dims(),
            depth: defaults::depth(),
            kernel: defaults::kernel(),
            mask_prob: defaults::mask_prob(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dims == 0 || self.repr_dims == 0 || self.hidden_dims == 0 {
            return bad(format!(
                "encoder widths must be positive (input {}, repr {}, hidden {})",
                self.input_dims, self.repr_dims, self.hidden_dims
            ));
        }
        if self.depth == 0 || self.depth > 30 {
            return bad(format!("encoder depth must be in 1..=30, got {}", self.depth));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return bad(format!("mask_prob must be in [0, 1), got {}", self.mask_prob));
        }
        Ok(())
    }

    /// Number of timesteps on each side of `t` that can influence output `t`.
    pub fn receptive_radius(&self) -> usize {
        (self.kernel - 1) / 2 * (0..self.depth).map(|i| 2usize << i).sum::<usize>()
    }

    /// Adds encoder parameters under the `enc.` prefix.
    pub fn init_params(&self, te_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        let (c, f, h, k) = (self.input_dims, self.repr_dims, self.hidden_dims, self.kernel);
        let b = 1.0 / (c as f64).sqrt();
        store.insert_uniform("enc.proj.w", &[f, c], b, rng)?;
        store.insert_uniform("enc.proj.b", &[f], b, rng)?;
        let mut width = f + te_dim;
        for i in 0..self.depth {
            for (j, cin) in [(1, width), (2, h)] {
                let b = 1.0 / ((cin * k) as f64).sqrt();
                store.insert_uniform(format!("enc.block{i}.conv{j}.w"), &[h, cin, k], b, rng)?;
                store.insert_uniform(format!("enc.block{i}.conv{j}.b"), &[h], b, rng)?;
            }
            if width != h {
                let b = 1.0 / (width as f64).sqrt();
                store.insert_uniform(format!("enc.block{i}.skip.w"), &[h, width, 1], b, rng)?;
                store.insert_uniform(format!("enc.block{i}.skip.b"), &[h], b, rng)?;
            }
            width = h;
        }
        let b = 1.0 / (h as f64).sqrt();
        store.insert_uniform("enc.out.w", &[f, h, 1], b, rng)?;
        store.insert_uniform("enc.out.b", &[f], b, rng)?;
        Ok(())
    }
}

/// Which projected timesteps are zeroed before the convolution stack.
#[derive(Debug)]
pub enum Masking<'a, R: Rng> {
    None,
    /// Independent Bernoulli draws per (instance, timestep).
    Random { prob: f64, rng: &'a mut R },
    /// Flags of length `B*T`; `true` zeroes that timestep.
    Explicit(&'a [bool]),
}

/// Zeroes whole `F`-rows of `u[B,T,F]` where `flags` is set.
pub fn apply_row_mask(tape: &mut Tape, u: Var, flags: &[bool]) -> Result<Var> {
    let shape = tape.shape(u).to_vec();
    let f = *shape.last().ok_or_else(|| dim_err!("mask on a scalar"))?;
    if flags.len() * f != tape.value(u).len() {
        return Err(dim_err!("{} mask flags for tensor {:?}", flags.len(), shape));
    }
    if !flags.iter().any(|&m| m) {
        return Ok(u);
    }
    let keep = Tensor::new(shape, flags.iter().flat_map(|&m| std::iter::repeat_n(if m { 0.0 } else { 1.0 }, f)).collect())?;
    let keep = tape.constant(keep);
    tape.mul(u, keep)
}

/// Seeded Bernoulli mask flags for `n` positions.
pub fn bernoulli_flags<R: Rng + ?Sized>(n: usize, prob: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| prob > 0.0 && rng.random::<f64>() < prob).collect()
}

/// Forward pass of the encoder on `x[B,T,C]` given time embeddings `tau[T,K]`.
/// Returns `z[B,T,F]`.
pub fn encode<R: Rng>(
    cfg: &EncoderConfig,
    tape: &mut Tape,
    params: &Bound,
    x: Var,
    tau: Var,
    masking: Masking<'_, R>,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 3 || xs[2] != cfg.input_dims {
        return Err(dim_err!("encoder expects [B,T,{}], got {:?}", cfg.input_dims, xs));
    }
    let (b, t) = (xs[0], xs[1]);
    let ts = tape.shape(tau).to_vec();
    if ts.len() != 2 || ts[0] != t {
        return Err(dim_err!("time embedding {:?} for series length {t}", ts));
    }
    let f = cfg.repr_dims;

    let flat = tape.reshape(x, &[b * t, cfg.input_dims])?;
    let u = tape.linear(flat, params.var("enc.proj.w")?, Some(params.var("enc.proj.b")?))?;
    let mut u = tape.reshape(u, &[b, t, f])?;
    u = match masking {
        Masking::None => u,
        Masking::Random { prob, rng } => {
            let flags = bernoulli_flags(b * t, prob, rng);
            apply_row_mask(tape, u, &flags)?
        }
        Masking::Explicit(flags) => apply_row_mask(tape, u, flags)?,
    };

    let taub = tape.repeat(tau, b);
    let cat = tape.concat(&[u, taub], 2)?;
    let mut h = tape.permute(cat, &[0, 2, 1])?;

    let k = cfg.kernel;
    for i in 0..cfg.depth {
        let d = 1usize << i;
        let pad = (k - 1) / 2 * d;
        let p = |n: &str| params.var(&format!("enc.block{i}.{n}"));
        let y = tape.conv1d(h, p("conv1.w")?, p("conv1.b")?, d, pad)?;
        let y = tape.gelu(y);
        let y = tape.conv1d(y, p("conv2.w")?, p("conv2.b")?, d, pad)?;
        let y = tape.gelu(y);
        let skip = if tape.shape(h)[1] != cfg.hidden_dims {
            tape.conv1d(h, p("skip.w")?, p("skip.b")?, 1, 0)?
        } else {
            h
        };
        h = tape.add(y, skip)?;
    }
    let out = tape.conv1d(h, params.var("enc.out.w")?, params.var("enc.out.b")?, 1, 0)?;
    tape.permute(out, &[0, 2, 1])
}

/// Encoder plus time embedding evaluated over absolute indices `start..start+T`.
pub fn encode_with_time<R: Rng>(
    cfg: &EncoderConfig,
    te: &TimeEmbeddingConfig,
    tape: &mut Tape,
    params: &Bound,
    x: Var,
    start: usize,
    time_scale: f64,
    masking: Masking<'_, R>,
) -> Result<(Var, Var)> {
    let t = *tape
        .shape(x)
        .get(1)
        .ok_or_else(|| dim_err!("encoder input {:?}", tape.shape(x)))?;
    let tau = te.embed_range(tape, params, start, t, time_scale)?;
    let z = encode(cfg, tape, params, x, tau, masking)?;
    Ok((z, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    #[test]
    fn receptive_radius_formula() {
        let mut cfg = EncoderConfig::new(1);
        cfg.depth = 3;
        assert_eq!(cfg.receptive_radius(), 14);
        cfg.kernel = 5;
        assert_eq!(cfg.receptive_radius(), 28);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut cfg = EncoderConfig::new(2);
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
        cfg.kernel = 3;
        cfg.mask_prob = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn row_mask_zeroes_whole_rows() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full(&[1, 3, 2], 5.0));
        let m = apply_row_mask(&mut tape, u, &[false, true, false]).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0, 5.0, 0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn output_shape() {
        let mut cfg = EncoderConfig::new(3);
        (cfg.repr_dims, cfg.hidden_dims, cfg.depth) = (6, 5, 2);
        let mut store = ParamStore::new();
        cfg.init_params(4, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 7, 3]));
        let tau = tape.constant(Tensor::full(&[7, 4], 0.25));
        let z = encode::<NoRng>(&cfg, &mut tape, &p, x, tau, Masking::None).unwrap();
        assert_eq!(tape.shape(z), &[2, 7, 6]);
    }
}
