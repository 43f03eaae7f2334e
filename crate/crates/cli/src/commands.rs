use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use trep_core::checkpoint;
use trep_core::config::{Protocol, RunConfig};
use trep_core::data::{save_csv, synth as generate, SynthSpec};
use trep_core::downstream::anomaly::{evaluate_stream, prepare, training_prefix, windowed_anomaly_classify, BETA_GRID};
use trep_core::downstream::classify::evaluate_classification;
use trep_core::downstream::forecast::{forecast_eval, normalize, training_segments};
use trep_core::trainer::{write_history, write_representation};
use trep_core::{encode_dataset, train as fit, Dataset, Error, Granularity, Result};

use crate::report::{write_json, MetricRows};
use crate::{EncodeArgs, EvalArgs, GranularityArg, Overrides, SynthArgs, TrainArgs};

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> Result<u64> {
    if let Some(p) = &o.data {
        cfg.data.path = Some(p.clone());
        cfg.data.synth = None;
    }
    if let Some(p) = &o.test_data {
        cfg.data.test_path = Some(p.clone());
    }
    if o.protocol.is_some() {
        cfg.protocol = o.protocol;
    }
    let seed = cfg.resolve_seed(o.seed)?;
    cfg.validate()?;
    Ok(seed)
}

/// Train and test instances for classification: the configured test file,
/// otherwise the trailing `test_frac` of the instances.
fn classify_split(main: Dataset, test: Option<Dataset>, test_frac: f64) -> Result<(Dataset, Dataset)> {
    if let Some(test) = test {
        return Ok((main, test));
    }
    let n = main.n();
    if n < 2 {
        return Err(Error::Dataset(format!("classification needs at least 2 instances, got {n}")));
    }
    let held = ((n as f64 * test_frac).round() as usize).clamp(1, n - 1);
    let cut = n - held;
    let train = main.select(&(0..cut).collect::<Vec<_>>())?;
    let test = main.select(&(cut..n).collect::<Vec<_>>())?;
    Ok((train, test))
}

/// Portion of the data the encoder is fitted on under each protocol.
fn training_data(cfg: &RunConfig, main: Dataset, test: Option<Dataset>) -> Result<Dataset> {
    match cfg.protocol {
        Some(Protocol::Forecast) => training_segments(&normalize(&main, &cfg.forecast)?.0, &cfg.forecast),
        Some(Protocol::Anomaly) => training_prefix(&prepare(&main, &cfg.anomaly)?, &cfg.anomaly),
        Some(Protocol::Classify) => Ok(classify_split(main, test, cfg.data.test_frac)?.0),
        Some(Protocol::WindowedAnomaly) | None => Ok(main),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(r) = args.repr_dims {
        cfg.model.encoder.repr_dims = r;
    }
    if let Some(h) = args.hidden_dims {
        cfg.model.encoder.hidden_dims = h;
    }
    if let Some(d) = args.depth {
        cfg.model.encoder.depth = d;
    }
    let seed = apply_overrides(&mut cfg, &args.overrides)?;
    let (main, test) = cfg.data.load(seed)?;
    let arch = cfg.model.architecture(main.c(), cfg.protocol)?;
    let ds = training_data(&cfg, main, test)?;
    log::info!("training on N={}, T={}, C={} with seed {seed}", ds.n(), ds.t(), ds.c());
    let out = fit(&ds, arch, &cfg.train)?;

    create_dir(&args.out)?;
    let echo = cfg.echo()?;
    let stored: Value = serde_json::from_str(&echo)?;
    checkpoint::save(&out.model, stored.clone(), &args.out.join("model.ckpt"))?;
    checkpoint::save(&out.best, stored, &args.out.join("best.ckpt"))?;
    write_history(&out.history, &args.out.join("history.csv"))?;
    fs::write(args.out.join("config.json"), echo + "\n")?;
    println!(
        "trained {} epochs ({} steps), best epoch {}; outputs in {}",
        cfg.train.epochs,
        out.history.len(),
        out.best_epoch,
        args.out.display()
    );
    Ok(())
}

pub fn encode(args: &EncodeArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&args.ckpt)?;
    let ds = trep_core::data::load_csv(&args.data)?;
    let granularity = match args.granularity {
        GranularityArg::Timestep => Granularity::Timestep,
        GranularityArg::Pooled => Granularity::Pooled(args.windows),
        GranularityArg::Instance => Granularity::Instance,
    };
    let rep = encode_dataset(&model, &ds, granularity)?;
    let mut file = fs::File::create(&args.out)?;
    write_representation(&rep, &mut file)?;
    Ok(())
}

fn dataset_name(cfg: &RunConfig) -> String {
    match (&cfg.data.path, &cfg.data.synth) {
        (Some(p), _) => p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
        (None, Some(spec)) => serde_json::to_value(spec)
            .ok()
            .and_then(|v| v["kind"].as_str().map(str::to_string))
            .unwrap_or_else(|| "synthetic".into()),
        (None, None) => "unknown".into(),
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (model, manifest) = checkpoint::load(&args.ckpt)?;
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value(manifest.config)
            .map_err(|e| Error::Config(format!("checkpoint carries no usable run config ({e}); pass --config")))?,
    };
    let seed = apply_overrides(&mut cfg, &args.overrides)?;
    let protocol = cfg.protocol.ok_or_else(|| Error::Config("no protocol given; use --protocol".into()))?;
    let (main, test) = cfg.data.load(seed)?;
    let name = dataset_name(&cfg);
    create_dir(&args.out)?;
    let mut rows = MetricRows::new(&name);

    let summary = match protocol {
        Protocol::Forecast => {
            let (normalized, _) = normalize(&main, &cfg.forecast)?;
            let results = forecast_eval(&model, &normalized, &cfg.forecast)?;
            for r in &results {
                let h = r.horizon.to_string();
                rows.push("mse", &h, r.mse);
                rows.push("mae", &h, r.mae);
                rows.push("persistence_mse", &h, r.persistence_mse);
                rows.push("persistence_mae", &h, r.persistence_mae);
            }
            crate::report::write_horizons(&results, &args.out.join("horizons.csv"))?;
            json!({ "horizons": results })
        }
        Protocol::Classify => {
            let (train, test) = classify_split(main, test, cfg.data.test_frac)?;
            let r = evaluate_classification(&model, &train, &test, &cfg.classify, seed)?;
            rows.push("accuracy", "", r.accuracy);
            rows.push("best_c", "", r.best_c);
            serde_json::to_value(&r)?
        }
        Protocol::Anomaly => {
            let prepared = prepare(&main, &cfg.anomaly)?;
            let grid = args.tune_beta.then_some(&BETA_GRID[..]);
            let r = evaluate_stream(&model, &prepared, &cfg.anomaly, grid)?;
            let beta = r.beta.to_string();
            for (metric, v) in [("f1", r.test.f1), ("precision", r.test.precision), ("recall", r.test.recall)] {
                rows.push(metric, &beta, v);
            }
            rows.push("validation_f1", &beta, r.validation.f1);
            let labels = prepared.timestep_labels().unwrap_or_default();
            crate::report::write_scores(&r.streams, labels, &args.out.join("scores.csv"))?;
            json!({ "beta": r.beta, "validation": r.validation, "test": r.test })
        }
        Protocol::WindowedAnomaly => {
            let r = windowed_anomaly_classify(&model, &main, cfg.windowed.window, cfg.windowed.train_frac, seed)?;
            rows.push("f1", "", r.scores.f1);
            rows.push("precision", "", r.scores.precision);
            rows.push("recall", "", r.scores.recall);
            rows.push("accuracy", "", r.accuracy);
            serde_json::to_value(&r)?
        }
    };
    rows.write(&args.out.join("metrics.csv"))?;
    let mut doc = json!({ "protocol": protocol.to_string(), "dataset": name, "seed": seed });
    if let (Value::Object(d), Value::Object(s)) = (&mut doc, summary) {
        d.extend(s);
    }
    write_json(&doc, &args.out.join("summary.json"))?;
    println!("{}", serde_json::to_string(&doc)?);
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec: SynthSpec =
        serde_json::from_str(&args.spec).map_err(|e| Error::Config(format!("invalid synth spec: {e}")))?;
    let ds = generate(&spec, args.seed)?;
    save_csv(&ds, &args.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use trep_core::{Labels, Tensor};

    fn labelled(n: usize) -> Dataset {
        let labels = Labels::Instance((0..n as i64).collect());
        Dataset::new(Tensor::zeros(&[n, 4, 1]), None, Some(labels)).unwrap()
    }

    #[test]
    fn classify_split_holds_out_the_tail() {
        let (train, test) = classify_split(labelled(9), None, 1.0 / 3.0).unwrap();
        assert_eq!(train.instance_labels().unwrap(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(test.instance_labels().unwrap(), &[6, 7, 8]);
        let (train, test) = classify_split(labelled(2), None, 0.01).unwrap();
        assert_eq!((train.n(), test.n()), (1, 1));
        assert!(classify_split(labelled(1), None, 0.5).is_err());
        let (train, test) = classify_split(labelled(3), Some(labelled(2)), 0.5).unwrap();
        assert_eq!((train.n(), test.n()), (3, 2));
    }
}
