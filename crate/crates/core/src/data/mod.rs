//! Domain types shared by every stage: patient records, cohorts, feature
//! manifests, vocabularies and the standardizer.

mod archive;
mod split;

pub use archive::{load_archive, save_archive, ARCHIVE_MANIFEST};
pub use split::{stratified_split, stratified_split_labels, Splits, DEFAULT_FRACTIONS};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient after preprocessing.
///
/// `x` holds standardized values and is exactly zero wherever `m` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// `[T, D]`
    pub x: Array2<f32>,
    /// `[T, D]`, entries in `{0, 1}`
    pub m: Array2<u8>,
    /// One category code per static variable.
    pub s: Vec<u32>,
    /// One binary outcome per label.
    pub y: Vec<u8>,
}

impl PatientRecord {
    pub fn steps(&self) -> usize {
        self.x.nrows()
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }

    /// Fraction of observed cells.
    pub fn mask_rate(&self) -> f64 {
        self.m.iter().map(|&v| v as f64).sum::<f64>() / self.m.len() as f64
    }

    /// Checks the record invariants against a manifest and vocabulary.
    pub fn validate(&self, manifest: &FeatureManifest, vocab: &StaticVocabulary, n_labels: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidParam(format!("record {}: {reason}", self.id));
        if self.x.dim() != (manifest.steps, manifest.features()) || self.m.dim() != self.x.dim() {
            return Err(bad(format!(
                "grid shape {:?}/{:?}, expected ({}, {})",
                self.x.dim(),
                self.m.dim(),
                manifest.steps,
                manifest.features()
            )));
        }
        for (&x, &m) in self.x.iter().zip(self.m.iter()) {
            if m > 1 {
                return Err(bad(format!("mask value {m}")));
            }
            if m == 0 && x != 0.0 {
                return Err(bad("non-zero value at an unobserved cell".into()));
            }
            if !x.is_finite() {
                return Err(bad("non-finite value".into()));
            }
        }
        if self.s.len() != vocab.variables.len() {
            return Err(bad(format!("{} static codes for {} variables", self.s.len(), vocab.variables.len())));
        }
        for (j, (&code, var)) in self.s.iter().zip(&vocab.variables).enumerate() {
            if code as usize >= var.categories.len() {
                return Err(bad(format!("static variable {j} code {code} out of range")));
            }
        }
        if self.y.len() != n_labels || self.y.iter().any(|&v| v > 1) {
            return Err(bad("labels must be binary and one per label name".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub feature_names: Vec<String>,
    pub grid_step_hours: f64,
    /// Number of grid points `T`.
    pub steps: usize,
}

impl FeatureManifest {
    pub fn new(feature_names: Vec<String>, grid_step_hours: f64, steps: usize) -> Result<Self> {
        let m = FeatureManifest {
            feature_names,
            grid_step_hours,
            steps,
        };
        m.validate()?;
        Ok(m)
    }

    /// Default grid: 15 minute steps, 25 points covering six hours.
    pub fn with_features(feature_names: Vec<String>) -> Result<Self> {
        Self::new(feature_names, 0.25, 25)
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_names.is_empty() {
            return Err(Error::InvalidParam("manifest needs at least one feature".into()));
        }
        if self.steps < 2 {
            return Err(Error::InvalidParam(format!("manifest steps {} < 2", self.steps)));
        }
        if !(self.grid_step_hours > 0.0) {
            return Err(Error::InvalidParam("grid step must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticVariable {
    pub name: String,
    pub categories: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StaticVocabulary {
    pub variables: Vec<StaticVariable>,
}

impl StaticVocabulary {
    pub fn validate(&self) -> Result<()> {
        for v in &self.variables {
            if v.categories.is_empty() {
                return Err(Error::InvalidParam(format!("static variable {} has no categories", v.name)));
            }
        }
        Ok(())
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Total width of the one-hot encoding of all static variables.
    pub fn onehot_width(&self) -> usize {
        self.variables.iter().map(|v| v.categories.len()).sum()
    }

    /// Concatenated one-hot encoding of `codes`.
    pub fn onehot(&self, codes: &[u32]) -> Vec<f64> {
        let mut out = vec![0.0; self.onehot_width()];
        let mut at = 0;
        for (var, &c) in self.variables.iter().zip(codes) {
            out[at + c as usize] = 1.0;
            at += var.categories.len();
        }
        out
    }
}

/// Per-feature standardization statistics fitted on observed training
/// entries. Features with no observed entries, or zero variance, are flagged
/// constant and map to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn identity(features: usize) -> Self {
        Standardizer {
            mean: vec![0.0; features],
            std: vec![1.0; features],
            constant: vec![false; features],
        }
    }

    pub fn transform(&self, d: usize, value: f64) -> f64 {
        if self.constant[d] {
            0.0
        } else {
            (value - self.mean[d]) / self.std[d]
        }
    }

    pub fn inverse(&self, d: usize, value: f64) -> f64 {
        if self.constant[d] {
            self.mean[d]
        } else {
            value * self.std[d] + self.mean[d]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic {
        generator: String,
        plan: serde_json::Value,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub manifest: FeatureManifest,
    pub vocab: StaticVocabulary,
    pub label_names: Vec<String>,
    pub standardizer: Standardizer,
    pub splits: Splits,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.label_names
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::Unknown {
                kind: "label".into(),
                name: name.into(),
            })
    }

    pub fn select(&self, idx: &[usize]) -> Vec<&PatientRecord> {
        idx.iter().map(|&i| &self.records[i]).collect()
    }

    pub fn train(&self) -> Vec<&PatientRecord> {
        self.select(&self.splits.train)
    }

    pub fn val(&self) -> Vec<&PatientRecord> {
        self.select(&self.splits.val)
    }

    pub fn test(&self) -> Vec<&PatientRecord> {
        self.select(&self.splits.test)
    }

    /// Checks every record and the split partition.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        self.vocab.validate()?;
        for r in &self.records {
            r.validate(&self.manifest, &self.vocab, self.label_names.len())?;
        }
        self.splits.check_partition(self.records.len())
    }

    /// Positive rate of a label over a set of indices.
    pub fn positive_rate(&self, label: usize, idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().filter(|&&i| self.records[i].y[label] == 1).count() as f64 / idx.len() as f64
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onehot_layout() {
        let c = testutil::random_cohort(12, 2, 2, 0);
        assert_eq!(c.vocab.onehot_width(), 5);
        assert_eq!(c.vocab.onehot(&[2, 0]), vec![0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn random_cohort_is_valid() {
        let c = testutil::random_cohort(40, 4, 3, 9);
        c.validate().unwrap();
    }

    #[test]
    fn validate_catches_value_under_zero_mask() {
        let mut c = testutil::random_cohort(10, 4, 3, 1);
        let r = &mut c.records[0];
        let (t, d) = (0..4)
            .flat_map(|t| (0..3).map(move |d| (t, d)))
            .find(|&(t, d)| r.m[[t, d]] == 0)
            .unwrap();
        r.x[[t, d]] = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn manifest_invariants() {
        assert!(FeatureManifest::new(vec![], 0.25, 25).is_err());
        assert!(FeatureManifest::new(vec!["a".into()], 0.25, 1).is_err());
        assert!(FeatureManifest::new(vec!["a".into()], 0.0, 25).is_err());
    }
}
