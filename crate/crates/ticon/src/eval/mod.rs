//! Downstream evaluation harness: k-NN probing, PCA + ridge regression,
//! linear probing, and the raw / isolated / contextualized comparison.

mod benchmark;
mod knn;
mod linear;
pub mod metrics;
mod ridge;

pub use benchmark::{context_benchmark, BenchTask, BenchmarkOptions, VariantFeatures};
pub use knn::knn_probe;
pub use linear::linear_probe;
pub use ridge::{pca_ridge, RidgeOptions};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub enum Labels {
    Class(Vec<usize>),
    /// Row-major n x dim regression targets.
    Regress { targets: Vec<f64>, dim: usize },
}

/// Features with labels and a fixed train/val/test assignment per row.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Labels,
    pub split: Vec<Split>,
}

impl ProbeDataset {
    pub fn len(&self) -> usize {
        self.split.len()
    }

    pub fn is_empty(&self) -> bool {
        self.split.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn class_labels(&self) -> Result<&[usize]> {
        match &self.labels {
            Labels::Class(l) => Ok(l),
            Labels::Regress { .. } => {
                Err(Error::Dataset("expected classification labels".into()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Dataset("empty dataset".into()));
        }
        if self.features.len() != n * self.dim {
            return Err(Error::Shape(format!(
                "features {} vs {} rows x dim {}",
                self.features.len(),
                n,
                self.dim
            )));
        }
        match &self.labels {
            Labels::Class(l) if l.len() != n => {
                return Err(Error::Shape("label count mismatch".into()))
            }
            Labels::Regress { targets, dim } if targets.len() != n * dim => {
                return Err(Error::Shape("target count mismatch".into()))
            }
            _ => {}
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if self.rows_in(split).is_empty() {
                return Err(Error::Dataset(format!("empty split {split:?}")));
            }
        }
        if let Labels::Class(labels) = &self.labels {
            let train: std::collections::BTreeSet<usize> =
                self.rows_in(Split::Train).iter().map(|&i| labels[i]).collect();
            for &i in self.rows_in(Split::Test).iter().chain(&self.rows_in(Split::Val)) {
                if !train.contains(&labels[i]) {
                    return Err(Error::Dataset(format!(
                        "class {} absent from train split",
                        labels[i]
                    )));
                }
            }
            if train.len() < 2 {
                return Err(Error::Dataset("train split has a single class".into()));
            }
        }
        Ok(())
    }
}

/// One probe result: a task, a feature variant, a metric value, and the
/// hyperparameter the validation split selected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    /// Selected k (k-NN), lambda (ridge), or cost (linear probe).
    pub param: Option<f64>,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(task: &str, variant: &str, metric: &str, value: f64) -> Self {
        EvalReport {
            task: task.to_string(),
            variant: variant.to_string(),
            metric: metric.to_string(),
            value,
            param: None,
            seed: 0,
        }
    }
}
