//! Classification of pooled representations with an RBF kernel classifier.

use serde::{Deserialize, Serialize};

use super::metrics::accuracy;
use super::svm::{fit_with_cv, KernelClassifier, C_GRID};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Granularity, Representation, TRepModel};
use crate::trainer::encode_dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Temporal slots kept before flattening.
    #[serde(default = "defaults::windows")]
    pub windows: usize,
    #[serde(default = "defaults::c_grid")]
    pub c_grid: Vec<f64>,
    #[serde(default = "defaults::folds")]
    pub folds: usize,
}

mod defaults {
    pub fn windows() -> usize {
        10
    }
    pub fn c_grid() -> Vec<f64> {
        super::C_GRID.to_vec()
    }
    pub fn folds() -> usize {
        5
    }
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { windows: defaults::windows(), c_grid: defaults::c_grid(), folds: defaults::folds() }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 {
            return Err(Error::Config("classification needs at least one pooling window".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("penalty grid must be non-empty and positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResult {
    pub accuracy: f64,
    pub best_c: f64,
    pub cv_scores: Vec<(f64, f64)>,
    pub feature_dim: usize,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Fits on flattened training representations (penalty by k-fold
/// cross-validation) and scores held-out accuracy.
pub fn timedim_classify(
    train: &Representation,
    train_labels: &[i64],
    test: &Representation,
    test_labels: &[i64],
    cfg: &ClassifyConfig,
    seed: u64,
) -> Result<(KernelClassifier, ClassifyResult)> {
    cfg.validate()?;
    let xs = train.flattened();
    let xt = test.flattened();
    if xs.len() != train_labels.len() || xt.len() != test_labels.len() {
        return Err(Error::Dataset("representation and label counts differ".into()));
    }
    let d = xs.first().map_or(0, Vec::len);
    if xt.iter().any(|r| r.len() != d) {
        return Err(Error::Dimension(format!("train features have width {d}, test features differ")));
    }
    let (model, cv) = fit_with_cv(&xs, train_labels, &cfg.c_grid, cfg.folds, seed)?;
    let pred = model.predict(&xt);
    let result = ClassifyResult {
        accuracy: accuracy(&pred, test_labels),
        best_c: cv.best_c,
        cv_scores: cv.scores,
        feature_dim: d,
        train_rows: xs.len(),
        test_rows: xt.len(),
    };
    Ok((model, result))
}

/// Encodes both datasets, pools them to `cfg.windows` slots and classifies.
pub fn evaluate_classification(
    model: &TRepModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &ClassifyConfig,
    seed: u64,
) -> Result<ClassifyResult> {
    let labels = |d: &Dataset| {
        d.instance_labels()
            .map(<[i64]>::to_vec)
            .ok_or_else(|| Error::Dataset("classification needs one label per instance".into()))
    };
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let g = Granularity::Pooled(cfg.windows);
    let rtr = encode_dataset(model, train, g)?;
    let rte = encode_dataset(model, test, g)?;
    Ok(timedim_classify(&rtr, &ytr, &rte, &yte, cfg, seed)?.1)
}
