//! Pretext losses: instance and temporal contrast, time-embedding divergence
//! regression, time-embedding conditioned forecasting, and the multi-scale
//! wrapper that averages their weighted sum over pooled resolutions.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Weight of each pretext task in the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeights {
    pub instance: f64,
    pub temporal: f64,
    pub divergence: f64,
    pub prediction: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { instance: 0.25, temporal: 0.25, divergence: 0.25, prediction: 0.25 }
    }
}

impl TaskWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.instance, self.temporal, self.divergence, self.prediction]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub alpha: TaskWeights,
    /// Largest forecast offset for the prediction task.
    #[serde(default = "default_delta_max")]
    pub delta_max: usize,
    /// Pairs per divergence loss; defaults to `B * min(L, 64)`.
    #[serde(default)]
    pub m_div: Option<usize>,
    /// Instances per prediction loss; defaults to `B`.
    #[serde(default)]
    pub m_pred: Option<usize>,
    /// Timesteps per prediction loss; defaults to `min(L, 32)`.
    #[serde(default)]
    pub t_pred: Option<usize>,
}

fn default_delta_max() -> usize {
    10
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            alpha: TaskWeights::default(),
            delta_max: default_delta_max(),
            m_div: None,
            m_pred: None,
            t_pred: None,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let a = self.alpha.as_array();
        if a.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("task weights must be non-negative, got {a:?}")));
        }
        let s: f64 = a.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task weights sum to {s}, expected 1")));
        }
        if !(1..=20).contains(&self.delta_max) {
            return Err(Error::Config(format!("delta_max must be in 1..=20, got {}", self.delta_max)));
        }
        if self.m_div == Some(0) || self.m_pred == Some(0) || self.t_pred == Some(0) {
            return Err(Error::Config("task sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the four task losses.
pub fn combine(losses: [f64; 4], alpha: &TaskWeights) -> Result<f64> {
    let a = alpha.as_array();
    let s: f64 = a.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("task weights sum to {s}, expected 1")));
    }
    Ok(losses.iter().zip(a).map(|(l, w)| l * w).sum())
}

/// Adds the two regression heads under the `g1.` and `g2.` prefixes.
pub fn init_head_params(repr_dims: usize, te_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
    let f = repr_dims;
    let b = 1.0 / (f as f64).sqrt();
    store.insert_uniform("g1.w1", &[f, f], b, rng)?;
    store.insert_uniform("g1.b1", &[f], b, rng)?;
    store.insert_uniform("g1.w2", &[1, f], b, rng)?;
    store.insert_uniform("g1.b2", &[1], b, rng)?;
    let b_in = 1.0 / ((f + te_dim) as f64).sqrt();
    store.insert_uniform("g2.w1", &[f, f + te_dim], b_in, rng)?;
    store.insert_uniform("g2.b1", &[f], b_in, rng)?;
    store.insert_uniform("g2.w2", &[f, f], b, rng)?;
    store.insert_uniform("g2.b2", &[f], b, rng)?;
    Ok(())
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn check_pair(tape: &Tape, z: Var, z2: Var) -> Result<(usize, usize, usize)> {
    let (s, s2) = (tape.shape(z), tape.shape(z2));
    if s.len() != 3 || s != s2 {
        return Err(dim_err!("paired representations {:?} and {:?}", s, s2));
    }
    Ok((s[0], s[1], s[2]))
}

/// Contrast of each instance against the rest of the batch at equal timesteps.
/// `z` and `z2` are `[B,L,F]` representations of the overlap from the two views.
pub fn loss_instance(tape: &mut Tape, z: Var, z2: Var) -> Result<Var> {
    let (b, l, _) = check_pair(tape, z, z2)?;
    if b == 0 || l == 0 {
        log::warn!("instance contrast on an empty batch or overlap; loss set to 0");
        return Ok(zero(tape));
    }
    let zt = tape.permute(z, &[1, 0, 2])?;
    let z2t = tape.permute(z2, &[1, 0, 2])?;
    let cands = tape.concat(&[z2t, zt], 1)?;
    let sim = tape.bmm_nt(zt, cands)?;
    let sim = tape.reshape(sim, &[l * b, 2 * b])?;
    let mut targets = Vec::with_capacity(l * b);
    let mut allowed = vec![true; l * b * 2 * b];
    for t in 0..l {
        for i in 0..b {
            let r = t * b + i;
            targets.push(i);
            allowed[r * 2 * b + b + i] = false;
        }
    }
    let nll = tape.masked_nll(sim, &targets, allowed)?;
    Ok(tape.mean(nll))
}

/// Contrast of each timestep against the other overlap timesteps of the same instance.
pub fn loss_temporal(tape: &mut Tape, z: Var, z2: Var) -> Result<Var> {
    let (b, l, _) = check_pair(tape, z, z2)?;
    if b == 0 || l == 0 {
        log::warn!("temporal contrast on an empty batch or overlap; loss set to 0");
        return Ok(zero(tape));
    }
    let cands = tape.concat(&[z2, z], 1)?;
    let sim = tape.bmm_nt(z, cands)?;
    let sim = tape.reshape(sim, &[b * l, 2 * l])?;
    let mut targets = Vec::with_capacity(b * l);
    let mut allowed = vec![true; b * l * 2 * l];
    for i in 0..b {
        for t in 0..l {
            let r = i * l + t;
            targets.push(t);
            allowed[r * 2 * l + l + t] = false;
        }
    }
    let nll = tape.masked_nll(sim, &targets, allowed)?;
    Ok(tape.mean(nll))
}

/// One divergence regression sample: `z[i,t] - z2[j,tp]` against `JSD(tau_t, tau_tp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivSample {
    pub i: usize,
    pub j: usize,
    pub t: usize,
    pub tp: usize,
}

pub fn sample_divergence(b: usize, l: usize, m: usize, rng: &mut impl Rng) -> Vec<DivSample> {
    if b == 0 || l < 2 {
        return Vec::new();
    }
    (0..m)
        .map(|_| {
            let t = rng.random_range(0..l);
            let mut tp = rng.random_range(0..l - 1);
            if tp >= t {
                tp += 1;
            }
            DivSample { i: rng.random_range(0..b), j: rng.random_range(0..b), t, tp }
        })
        .collect()
}

/// `G1(v) = W2 relu(W1 v + b1) + b2`, applied row-wise to `[M,F]`.
fn head_g1(tape: &mut Tape, heads: &Bound, v: Var) -> Result<Var> {
    let h = tape.linear(v, heads.var("g1.w1")?, Some(heads.var("g1.b1")?))?;
    let h = tape.relu(h);
    let o = tape.linear(h, heads.var("g1.w2")?, Some(heads.var("g1.b2")?))?;
    let m = tape.shape(o)[0];
    tape.reshape(o, &[m])
}

fn head_g2(tape: &mut Tape, heads: &Bound, v: Var) -> Result<Var> {
    let h = tape.linear(v, heads.var("g2.w1")?, Some(heads.var("g2.b1")?))?;
    let h = tape.relu(h);
    tape.linear(h, heads.var("g2.w2")?, Some(heads.var("g2.b2")?))
}

/// Mean squared error between `G1(z[i,t] - z2[j,tp])` and `JSD(tau[t], tau[tp])`.
pub fn loss_divergence_with(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: Var,
    heads: &Bound,
    samples: &[DivSample],
) -> Result<Var> {
    let (b, l, f) = check_pair(tape, z, z2)?;
    if tape.shape(tau).len() != 2 || tape.shape(tau)[0] != l {
        return Err(dim_err!("time embedding {:?} for overlap {l}", tape.shape(tau)));
    }
    if samples.is_empty() {
        log::warn!("divergence task has no valid timestep pairs; loss set to 0");
        return Ok(zero(tape));
    }
    for s in samples {
        if s.i >= b || s.j >= b || s.t >= l || s.tp >= l || s.t == s.tp {
            return Err(Error::Contract(format!("invalid divergence sample {s:?} for B={b}, L={l}")));
        }
    }
    let zf = tape.reshape(z, &[b * l, f])?;
    let z2f = tape.reshape(z2, &[b * l, f])?;
    let r1: Vec<usize> = samples.iter().map(|s| s.i * l + s.t).collect();
    let r2: Vec<usize> = samples.iter().map(|s| s.j * l + s.tp).collect();
    let a = tape.index_select(zf, &r1)?;
    let c = tape.index_select(z2f, &r2)?;
    let diff = tape.sub(a, c)?;
    let pred = head_g1(tape, heads, diff)?;
    let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
    let tps: Vec<usize> = samples.iter().map(|s| s.tp).collect();
    let p = tape.index_select(tau, &ts)?;
    let q = tape.index_select(tau, &tps)?;
    let target = tape.jsd_rows(p, q)?;
    let err = tape.sub(pred, target)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq))
}

pub fn loss_divergence(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: Var,
    heads: &Bound,
    m: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (b, l, _) = check_pair(tape, z, z2)?;
    let m = m.unwrap_or(b * l.min(64));
    let samples = sample_divergence(b, l, m, rng);
    loss_divergence_with(tape, z, z2, tau, heads, &samples)
}

/// Per-instance draw of the prediction task: offset and the contexts used for
/// input (`c1`) and target (`c2`), where context 0 is `z` and 1 is `z2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredSample {
    pub instance: usize,
    pub delta: isize,
    pub c1: usize,
    pub c2: usize,
}

/// Instance draws (without replacement) plus shared timesteps.
pub fn sample_prediction(
    b: usize,
    l: usize,
    m: usize,
    t_count: usize,
    delta_max: usize,
    rng: &mut impl Rng,
) -> (Vec<PredSample>, Vec<usize>) {
    if b == 0 || l < 2 {
        return (Vec::new(), Vec::new());
    }
    let dm = delta_max as i64;
    let instances = sample(rng, b, m.min(b)).into_vec();
    let samples = instances
        .into_iter()
        .map(|instance| PredSample {
            instance,
            delta: rng.random_range(-dm..=dm) as isize,
            c1: rng.random_range(0..2),
            c2: rng.random_range(0..2),
        })
        .collect();
    let mut times = sample(rng, l, t_count.min(l)).into_vec();
    times.sort_unstable();
    (samples, times)
}

/// Mean squared error of `G2([z^{c1}[i,t], tau[t+d]])` against the detached
/// `z^{c2}[i,t+d]`, with `t+d` clipped into the overlap.
pub fn loss_prediction_with(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: Var,
    heads: &Bound,
    samples: &[PredSample],
    times: &[usize],
) -> Result<Var> {
    let (b, l, f) = check_pair(tape, z, z2)?;
    if tape.shape(tau).len() != 2 || tape.shape(tau)[0] != l {
        return Err(dim_err!("time embedding {:?} for overlap {l}", tape.shape(tau)));
    }
    if samples.is_empty() || times.is_empty() {
        log::warn!("prediction task has fewer than two timesteps; loss set to 0");
        return Ok(zero(tape));
    }
    let both = tape.concat(&[z, z2], 0)?;
    let both = tape.reshape(both, &[2 * b * l, f])?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    let mut tgt_t = Vec::new();
    for s in samples {
        if s.instance >= b || s.c1 > 1 || s.c2 > 1 {
            return Err(Error::Contract(format!("invalid prediction sample {s:?} for B={b}")));
        }
        for &t in times {
            if t >= l {
                return Err(Error::Contract(format!("prediction timestep {t} outside overlap {l}")));
            }
            let tt = (t as isize + s.delta).clamp(0, l as isize - 1) as usize;
            src.push((s.c1 * b + s.instance) * l + t);
            dst.push((s.c2 * b + s.instance) * l + tt);
            tgt_t.push(tt);
        }
    }
    let inp = tape.index_select(both, &src)?;
    let te = tape.index_select(tau, &tgt_t)?;
    let inp = tape.concat(&[inp, te], 1)?;
    let pred = head_g2(tape, heads, inp)?;
    let frozen = tape.detach(both);
    let target = tape.index_select(frozen, &dst)?;
    let err = tape.sub(pred, target)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq))
}

pub fn loss_prediction(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: Var,
    heads: &Bound,
    cfg: &TaskConfig,
    rng: &mut impl Rng,
) -> Result<Var> {
    let (b, l, _) = check_pair(tape, z, z2)?;
    let m = cfg.m_pred.unwrap_or(b);
    let tc = cfg.t_pred.unwrap_or(l.min(32));
    let (samples, times) = sample_prediction(b, l, m, tc, cfg.delta_max, rng);
    loss_prediction_with(tape, z, z2, tau, heads, &samples, &times)
}

/// Task losses at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelLosses {
    pub length: usize,
    pub instance: f64,
    pub temporal: f64,
    pub divergence: f64,
    pub prediction: f64,
    pub combined: f64,
}

/// Loss values of one step across all resolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelLosses>,
    /// Task losses averaged over levels.
    pub instance: f64,
    pub temporal: f64,
    pub divergence: f64,
    pub prediction: f64,
    /// Combined loss averaged over levels.
    pub total: f64,
}

/// Number of resolutions visited for an overlap of length `l`.
pub fn level_count(l: usize) -> usize {
    let mut n = 1;
    let mut len = l;
    while len > 1 {
        len = len.div_ceil(2);
        n += 1;
    }
    n
}

/// Next coarser resolution: max pooling of both representations over time
/// and average pooling of the time embeddings, renormalised onto the simplex.
pub fn halve_level(tape: &mut Tape, z: Var, z2: Var, tau: Var) -> Result<(Var, Var, Var)> {
    let z = tape.max_pool(z, 1, 2)?;
    let z2 = tape.max_pool(z2, 1, 2)?;
    let pooled = tape.avg_pool(tau, 0, 2)?;
    Ok((z, z2, tape.normalize_last(pooled)?))
}

/// Applies all four tasks at every resolution, halving the overlap by max
/// pooling (representations) and average pooling followed by renormalisation
/// (time embeddings) until one step remains. Returns the level-averaged
/// combined loss and its breakdown.
pub fn hierarchical_loss(
    tape: &mut Tape,
    z: Var,
    z2: Var,
    tau: Var,
    heads: &Bound,
    cfg: &TaskConfig,
    rng: &mut impl Rng,
) -> Result<(Var, LossReport)> {
    cfg.validate()?;
    let (_, l0, _) = check_pair(tape, z, z2)?;
    if l0 == 0 {
        return Err(Error::Contract("hierarchical loss needs a non-empty overlap".into()));
    }
    let a = cfg.alpha;
    let (mut z, mut z2, mut tau) = (z, z2, tau);
    let mut levels = Vec::new();
    let mut total: Option<Var> = None;
    loop {
        let l = tape.shape(z)[1];
        let inst = loss_instance(tape, z, z2)?;
        let mut terms = vec![(inst, a.instance)];
        let (temp, div, pred) = if l >= 2 {
            let t = loss_temporal(tape, z, z2)?;
            let d = loss_divergence(tape, z, z2, tau, heads, cfg.m_div, rng)?;
            let p = loss_prediction(tape, z, z2, tau, heads, cfg, rng)?;
            terms.extend([(t, a.temporal), (d, a.divergence), (p, a.prediction)]);
            (Some(t), Some(d), Some(p))
        } else {
            (None, None, None)
        };
        let mut combined: Option<Var> = None;
        for (v, w) in terms {
            let s = tape.scale(v, w);
            combined = Some(match combined {
                Some(c) => tape.add(c, s)?,
                None => s,
            });
        }
        let combined = combined.expect("at least the instance term");
        let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        levels.push(LevelLosses {
            length: l,
            instance: tape.value(inst).data()[0],
            temporal: val(tape, temp),
            divergence: val(tape, div),
            prediction: val(tape, pred),
            combined: tape.value(combined).data()[0],
        });
        total = Some(match total {
            Some(t) => tape.add(t, combined)?,
            None => combined,
        });
        if l <= 1 {
            break;
        }
        (z, z2, tau) = halve_level(tape, z, z2, tau)?;
    }
    let n = levels.len() as f64;
    let loss = tape.scale(total.expect("at least one level"), 1.0 / n);
    let mean = |f: fn(&LevelLosses) -> f64| levels.iter().map(f).sum::<f64>() / n;
    let report = LossReport {
        instance: mean(|x| x.instance),
        temporal: mean(|x| x.temporal),
        divergence: mean(|x| x.divergence),
        prediction: mean(|x| x.prediction),
        total: tape.value(loss).data()[0],
        levels,
    };
    Ok((loss, report))
}
