//! Feature ingestion, synthetic two-modality data, and k-fold batching.
//!
//! Records hold already-pooled feature vectors: the expected upstream reduction
//! from a sequence encoder's `L×d` output is a mean over time steps.

mod format;
mod split;
mod synth;

pub use format::{
    load_features, load_manifest, load_truth, manifest_path, read_features, truth_path, write_dataset,
    write_features, write_features_csv, write_manifest, write_truth, FEATURE_MAGIC, FEATURE_VERSION,
    TRUTH_MAGIC,
};
pub use split::{assign_folds, kfold_batches, FoldSplit};
pub use synth::{generate_synthetic, SynthSpec};

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature header error: {0}")]
    Header(String),
    #[error("unsupported feature file version {0}")]
    Version(u32),
    #[error("feature file truncated inside record {record}")]
    Truncated { record: usize },
    #[error("record {record}: expected feature width {expected}, found {found}")]
    Dimension {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {record}: label {label} outside [0, {classes})")]
    Label {
        record: usize,
        label: usize,
        classes: usize,
    },
    #[error("record {record}: non-finite feature value")]
    NonFinite { record: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("fold {fold} is outside 1..={folds}")]
    InvalidFold { fold: usize, folds: usize },
    #[error("fold {fold} leaves an empty {which} split")]
    EmptySplit { fold: usize, which: &'static str },
    #[error("CSV feature file: {0}")]
    Csv(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// One sample: pooled speech features, pooled text features, emotion label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub h_a: Vec<f64>,
    pub h_t: Vec<f64>,
    pub y_e: usize,
}

impl FeatureRecord {
    pub fn validate(&self, record: usize, d_in: usize, classes: usize) -> Result<(), DataError> {
        for v in [&self.h_a, &self.h_t] {
            if v.len() != d_in {
                return Err(DataError::Dimension {
                    record,
                    expected: d_in,
                    found: v.len(),
                });
            }
        }
        if self.y_e >= classes {
            return Err(DataError::Label {
                record,
                label: self.y_e,
                classes,
            });
        }
        if self.h_a.iter().chain(&self.h_t).any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { record });
        }
        Ok(())
    }
}

/// Ground-truth generating factors of a synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub z_s: Vec<f64>,
    pub z_a: Vec<f64>,
    pub z_t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d_in: usize,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub count: usize,
    pub folds: usize,
    /// 1-based fold index of every record.
    pub fold_of: Vec<usize>,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_names.len() != self.classes {
            return Err(DataError::Manifest(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            )));
        }
        if self.fold_of.len() != self.count {
            return Err(DataError::Manifest(format!(
                "{} fold entries for {} records",
                self.fold_of.len(),
                self.count
            )));
        }
        if self.folds == 0 {
            return Err(DataError::Manifest("fold count must be positive".into()));
        }
        if let Some(&bad) = self.fold_of.iter().find(|&&f| f == 0 || f > self.folds) {
            return Err(DataError::InvalidFold {
                fold: bad,
                folds: self.folds,
            });
        }
        Ok(())
    }
}

/// Feature rows of a set of records, ready for a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub h_a: Tensor,
    pub h_t: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<FeatureRecord>,
    pub truth: Option<Vec<LatentTruth>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.manifest.d_in
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.y_e).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.manifest.validate()?;
        if self.manifest.count != self.records.len() {
            return Err(DataError::Manifest(format!(
                "manifest declares {} records, file holds {}",
                self.manifest.count,
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.validate(i, self.manifest.d_in, self.manifest.classes)?;
        }
        if let Some(truth) = &self.truth {
            if truth.len() != self.records.len() {
                return Err(DataError::Manifest(format!(
                    "{} ground-truth rows for {} records",
                    truth.len(),
                    self.records.len()
                )));
            }
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.manifest.d_in;
        let mut a = Vec::with_capacity(indices.len() * d);
        let mut t = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.records[i];
            a.extend_from_slice(&r.h_a);
            t.extend_from_slice(&r.h_t);
            labels.push(r.y_e);
        }
        Batch {
            h_a: Tensor::new(indices.len(), d, a).expect("validated widths"),
            h_t: Tensor::new(indices.len(), d, t).expect("validated widths"),
            labels,
            indices: indices.to_vec(),
        }
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class{c}")).collect()
}
