use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientRecord, Standardizer, StaticVocabulary};
use crate::error::{Error, Result};
use crate::nn::Mat;

/// What a generative model conditions on and the grid it produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub steps: usize,
    pub features: usize,
    pub feature_names: Vec<String>,
    pub grid_step_hours: f64,
    /// Labels the model is conditioned on, in conditioning order.
    pub labels: Vec<String>,
    pub vocab: StaticVocabulary,
    /// Statistics of the training data, kept so samples can be mapped back
    /// to raw units.
    pub standardizer: Standardizer,
}

impl DataSchema {
    pub fn from_cohort(cohort: &Cohort, labels: &[String]) -> Result<Self> {
        for l in labels {
            cohort.label_index(l)?;
        }
        Ok(DataSchema {
            steps: cohort.manifest.steps,
            features: cohort.manifest.features(),
            feature_names: cohort.manifest.feature_names.clone(),
            grid_step_hours: cohort.manifest.grid_step_hours,
            labels: labels.to_vec(),
            vocab: cohort.vocab.clone(),
            standardizer: cohort.standardizer.clone(),
        })
    }

    pub fn manifest(&self) -> Result<crate::data::FeatureManifest> {
        crate::data::FeatureManifest::new(self.feature_names.clone(), self.grid_step_hours, self.steps)
    }

    pub fn dim_y(&self) -> usize {
        self.labels.len()
    }

    /// Index of each conditioning label in a cohort's label list.
    pub fn label_indices(&self, cohort_labels: &[String]) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| {
                cohort_labels.iter().position(|c| c == l).ok_or_else(|| Error::Unknown {
                    kind: "label".into(),
                    name: l.clone(),
                })
            })
            .collect()
    }

    /// Conditioning vector: static one-hots (when used) followed by labels.
    pub fn condition_row(&self, use_s: bool, s: &[u32], y: &[u8]) -> Vec<f64> {
        let mut row = if use_s { self.vocab.onehot(s) } else { Vec::new() };
        row.extend(y.iter().map(|&v| v as f64));
        row
    }

    pub fn condition_width(&self, use_s: bool) -> usize {
        self.dim_y() + if use_s { self.vocab.onehot_width() } else { 0 }
    }
}

/// Row-batched view of records in `f64`.
///
/// `x` is sanitized: cells with `m = 0` are set to zero whatever the record
/// holds, so masked values can never reach a computation.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    /// Per step, `[B, D]`.
    pub x: Vec<Mat>,
    pub m: Vec<Mat>,
    /// `[B, T·D]`, step-major.
    pub x_flat: Mat,
    pub m_flat: Mat,
    /// `[B, C]`
    pub cond: Mat,
}

impl SeqBatch {
    pub fn rows(&self) -> usize {
        self.x_flat.nrows()
    }

    pub fn steps(&self) -> usize {
        self.x.len()
    }

    /// `y` picks, for each record, the label values used for conditioning.
    pub fn from_records(
        records: &[&PatientRecord],
        schema: &DataSchema,
        use_s: bool,
        label_indices: &[usize],
    ) -> Result<Self> {
        let (t_len, d) = (schema.steps, schema.features);
        let b = records.len();
        let c = schema.condition_width(use_s);
        let mut x_flat = Mat::zeros((b, t_len * d));
        let mut m_flat = Mat::zeros((b, t_len * d));
        let mut cond = Mat::zeros((b, c));
        for (i, r) in records.iter().enumerate() {
            if r.x.dim() != (t_len, d) {
                return Err(Error::shape(format!("record {} steps×features", r.id), t_len * d, r.x.len()));
            }
            for t in 0..t_len {
                for j in 0..d {
                    let m = r.m[[t, j]] as f64;
                    m_flat[[i, t * d + j]] = m;
                    if m != 0.0 {
                        x_flat[[i, t * d + j]] = r.x[[t, j]] as f64;
                    }
                }
            }
            let y: Vec<u8> = label_indices.iter().map(|&l| r.y[l]).collect();
            let row = schema.condition_row(use_s, &r.s, &y);
            cond.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        Ok(Self::from_flat(x_flat, m_flat, cond, t_len, d))
    }

    pub fn from_flat(x_flat: Mat, m_flat: Mat, cond: Mat, steps: usize, features: usize) -> Self {
        let mut x_flat = x_flat;
        // explicit select rather than a product, so no -0.0 or NaN survives
        ndarray::Zip::from(&mut x_flat).and(&m_flat).for_each(|x, &m| {
            if m == 0.0 {
                *x = 0.0;
            }
        });
        let split = |a: &Mat| -> Vec<Mat> {
            (0..steps)
                .map(|t| a.slice(s![.., t * features..(t + 1) * features]).to_owned())
                .collect()
        };
        SeqBatch {
            x: split(&x_flat),
            m: split(&m_flat),
            x_flat,
            m_flat,
            cond,
        }
    }
}

/// Contiguous chunks of `idx` of at most `size` entries.
pub fn chunks(idx: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    idx.chunks(size.max(1))
}

/// Grid `[T, D]` of row `i` of a flat `[B, T·D]` matrix.
pub fn unflatten_row(flat: &Array2<f64>, i: usize, steps: usize, features: usize) -> Array2<f64> {
    flat.row(i).to_owned().into_shape_with_order((steps, features)).unwrap()
}
