use std::fs;
use std::path::Path;

use serde_json::Value;
use trep_core::downstream::anomaly::StreamScores;
use trep_core::downstream::forecast::HorizonResult;
use trep_core::Result;

/// Long-format metric table: `metric, dataset, key, value`, where `key` is
/// the horizon or threshold a metric belongs to.
pub struct MetricRows {
    dataset: String,
    rows: Vec<[String; 4]>,
}

impl MetricRows {
    pub fn new(dataset: &str) -> Self {
        Self { dataset: dataset.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, metric: &str, key: &str, value: f64) {
        self.rows.push([metric.to_string(), self.dataset.clone(), key.to_string(), value.to_string()]);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "dataset", "key", "value"])?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_horizons(results: &[HorizonResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["horizon", "mse", "mae", "persistence_mse", "persistence_mae", "alpha"])?;
    for r in results {
        w.write_record([
            r.horizon.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
            r.persistence_mse.to_string(),
            r.persistence_mae.to_string(),
            r.alpha.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-step anomaly scores and flags of every stream; `label` is empty when
/// the data carries no per-step labels.
pub fn write_scores(streams: &[StreamScores], labels: &[bool], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_id", "t", "raw", "adjusted", "flag", "label"])?;
    for (i, s) in streams.iter().enumerate() {
        let t = s.raw.len();
        for k in 0..t {
            let label = labels.get(i * t + k).map_or(String::new(), |&l| u8::from(l).to_string());
            w.write_record([
                i.to_string(),
                k.to_string(),
                s.raw[k].to_string(),
                s.adjusted[k].to_string(),
                u8::from(s.flags[k]).to_string(),
                label,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(v: &Value, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}
