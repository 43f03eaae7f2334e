//! Training loop and dataset encoding.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{bernoulli_flags, encode_with_time, Masking};
use crate::error::{Error, Result};
use crate::model::{pool_representation, Architecture, Granularity, Representation, TRepModel};
use crate::params::Bound;
use crate::sampling::{sample_crops, ContextPair, Crop};
use crate::tasks::{hierarchical_loss, LossReport, TaskConfig};
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tasks: TaskConfig,
}

mod defaults {
    pub fn batch_size() -> usize {
        16
    }
    pub fn lr() -> f64 {
        0.001
    }
    pub fn epochs() -> usize {
        200
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            epochs: defaults::epochs(),
            seed: 0,
            tasks: TaskConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        self.tasks.validate()
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub level_count: usize,
    pub l_inst: f64,
    pub l_temp: f64,
    pub l_div: f64,
    pub l_pred: f64,
    pub combined: f64,
}

impl HistoryRow {
    fn new(step: usize, epoch: usize, r: &LossReport) -> Self {
        Self {
            step,
            epoch,
            level_count: r.levels.len(),
            l_inst: r.instance,
            l_temp: r.temporal,
            l_div: r.divergence,
            l_pred: r.prediction,
            combined: r.total,
        }
    }
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean combined loss of each epoch, in epoch order.
pub fn epoch_means(rows: &[HistoryRow]) -> Vec<f64> {
    let mut out: Vec<(f64, usize)> = Vec::new();
    for r in rows {
        if out.len() < r.epoch {
            out.resize(r.epoch, (0.0, 0));
        }
        let e = &mut out[r.epoch - 1];
        e.0 += r.combined;
        e.1 += 1;
    }
    out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}

/// Forward pass of the full training objective for one batch and crop.
/// `missing` (length `B*T`) is merged with fresh Bernoulli masks of
/// probability `mask_prob` drawn independently for each view.
#[allow(clippy::too_many_arguments)]
pub fn contextual_loss(
    model: &TRepModel,
    tape: &mut Tape,
    params: &Bound,
    batch: &Tensor,
    missing: &[bool],
    crop: Crop,
    tasks: &TaskConfig,
    mask_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Var, LossReport)> {
    let pair = ContextPair::from_crop(batch, crop)?;
    let (b, t) = (batch.shape()[0], batch.shape()[1]);
    let view_flags = |start: usize, end: usize, rng: &mut dyn rand::RngCore| -> Vec<bool> {
        let len = end - start;
        let random = bernoulli_flags(b * len, mask_prob, rng);
        (0..b * len).map(|k| random[k] || missing[(k / len) * t + start + k % len]).collect()
    };
    let f1 = view_flags(crop.a1, crop.b1, rng);
    let f2 = view_flags(crop.a2, crop.b2, rng);
    let arch = &model.arch;
    let x1 = tape.constant(pair.view1);
    let x2 = tape.constant(pair.view2);
    let m1 = Masking::<ChaCha8Rng>::Explicit(&f1);
    let m2 = Masking::<ChaCha8Rng>::Explicit(&f2);
    let (z1, tau1) =
        encode_with_time(&arch.encoder, &arch.time_embedding, tape, params, x1, crop.a1, model.time_scale, m1)?;
    let (z2, _) =
        encode_with_time(&arch.encoder, &arch.time_embedding, tape, params, x2, crop.a2, model.time_scale, m2)?;
    let l = crop.overlap_len();
    let off = crop.overlap_offset();
    let zo1 = tape.narrow(z1, 1, off, l)?;
    let zo2 = tape.narrow(z2, 1, 0, l)?;
    let tau = tape.narrow(tau1, 0, off, l)?;
    hierarchical_loss(tape, zo1, zo2, tau, params, tasks, rng)
}

/// Mutable optimisation state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TRepModel,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    /// Initialises parameters from `cfg.seed`; time indices are scaled by `time_scale`.
    pub fn new(arch: Architecture, time_scale: f64, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = TRepModel::init(arch, time_scale, &mut rng)?;
        let adam = AdamState::new(model.params.tensors(), cfg.lr);
        Ok(Self { model, adam, cfg, rng, step: 0 })
    }

    /// One optimisation step on `batch[B,T,C]`.
    pub fn step(&mut self, batch: &Tensor, missing: &[bool]) -> Result<LossReport> {
        self.step += 1;
        let t = batch.shape()[1];
        let crop = sample_crops(t, &mut self.rng)?;
        let mut tape = Tape::new();
        let params = self.model.params.bind(&mut tape, true);
        let mask_prob = self.model.arch.encoder.mask_prob;
        let (loss, report) = contextual_loss(
            &self.model,
            &mut tape,
            &params,
            batch,
            missing,
            crop,
            &self.cfg.tasks,
            mask_prob,
            &mut self.rng,
        )
        .map_err(|e| match e {
            Error::Numeric { op, detail } => {
                Error::TrainingAborted { step: self.step, detail: format!("{op}: {detail}") }
            }
            other => other,
        })?;
        if !report.total.is_finite() {
            return Err(Error::TrainingAborted {
                step: self.step,
                detail: format!(
                    "non-finite loss (inst {}, temp {}, div {}, pred {})",
                    report.instance, report.temporal, report.divergence, report.prediction
                ),
            });
        }
        tape.backward(loss)?;
        let grads = params.grads(&tape);
        let mut tensors = self.model.params.tensors_mut();
        adam_step(&mut tensors, &grads, &mut self.adam)
            .map_err(|e| Error::TrainingAborted { step: self.step, detail: e.to_string() })?;
        Ok(report)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TRepModel,
    /// Parameters at the end of the epoch with the lowest mean combined loss.
    pub best: TRepModel,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
}

/// Trains on every instance of `ds` for `cfg.epochs` shuffled passes.
pub fn train(ds: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if ds.n() == 0 || ds.t() < 2 {
        return Err(Error::Dataset(format!("training needs N >= 1 and T >= 2, got N={}, T={}", ds.n(), ds.t())));
    }
    if arch.encoder.input_dims != ds.c() {
        return Err(Error::Dataset(format!(
            "dataset has {} channels, encoder expects {}",
            ds.c(),
            arch.encoder.input_dims
        )));
    }
    let mut tr = Trainer::new(arch, ds.t() as f64, *cfg)?;
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, tr.model.clone(), 0);
    let mut order: Vec<usize> = (0..ds.n()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut tr.rng);
        let mut sum = 0.0;
        let mut count = 0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, miss) = ds.gather(idx)?;
            let report = tr.step(&x, &miss)?;
            sum += report.total;
            count += 1;
            history.push(HistoryRow::new(tr.step, epoch, &report));
        }
        let mean = sum / count as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        if mean < best.0 {
            best = (mean, tr.model.clone(), epoch);
        }
    }
    Ok(TrainOutcome { model: tr.model, best: best.1, best_epoch: best.2, history })
}

/// Eval-mode representations of every instance; missing timesteps are masked
/// after projection.
pub fn encode_dataset(model: &TRepModel, ds: &Dataset, granularity: Granularity) -> Result<Representation> {
    if ds.c() != model.arch.encoder.input_dims {
        return Err(Error::Dataset(format!(
            "dataset has {} channels, model expects {}",
            ds.c(),
            model.arch.encoder.input_dims
        )));
    }
    let z = model.encode_batched(&ds.values, Some(&ds.missing), 16)?;
    pool_representation(z, granularity)
}

/// Writes `rows` of representations as CSV with columns `instance_id, t, f0..`.
pub fn write_representation(rep: &Representation, out: &mut impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (n, t, f) = (rep.values.shape()[0], rep.values.shape()[1], rep.values.shape()[2]);
    let mut header = vec!["instance_id".to_string(), "t".to_string()];
    header.extend((0..f).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for i in 0..n {
        for s in 0..t {
            let row = &rep.values.data()[(i * t + s) * f..(i * t + s + 1) * f];
            let mut rec = vec![i.to_string(), s.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
