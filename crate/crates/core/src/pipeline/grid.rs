use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureManifest, Standardizer};
use crate::error::{Error, Result};

/// One measurement in a raw stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time_hours: f64,
    pub feature: usize,
    pub value: f64,
}

/// A patient's irregular measurements before gridding.
///
/// `interventions[l]` is the per-step activity indicator of label `l` over
/// the full stay at grid resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEventStream {
    pub patient_id: String,
    pub events: Vec<Event>,
    pub interventions: Vec<Vec<u8>>,
    pub statics: Vec<u32>,
}

/// Observation window, hold-out gap and prediction window, in hours.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelWindowSpec {
    pub obs_hours: usize,
    pub gap_hours: usize,
    pub pred_hours: usize,
    pub steps_per_hour: usize,
}

impl Default for LabelWindowSpec {
    fn default() -> Self {
        LabelWindowSpec {
            obs_hours: 6,
            gap_hours: 2,
            pred_hours: 4,
            steps_per_hour: 4,
        }
    }
}

impl LabelWindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_hours == 0 || self.gap_hours == 0 || self.pred_hours == 0 || self.steps_per_hour == 0 {
            return Err(Error::InvalidParam(format!("label windows must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Number of intervention steps a stay must cover.
    pub fn total_steps(&self) -> usize {
        (self.obs_hours + self.gap_hours + self.pred_hours) * self.steps_per_hour
    }

    pub fn gap_start(&self) -> usize {
        self.obs_hours * self.steps_per_hour
    }

    /// Half-open step range of the prediction window.
    pub fn prediction_steps(&self) -> std::ops::Range<usize> {
        (self.obs_hours + self.gap_hours) * self.steps_per_hour..self.total_steps()
    }

    /// Grid points of the observation window, both endpoints included.
    pub fn observation_points(&self) -> usize {
        self.obs_hours * self.steps_per_hour + 1
    }
}

/// Grid index of the window centred on `k · step` that contains `t`.
pub fn grid_index(time_hours: f64, step: f64) -> usize {
    (time_hours / step + 0.5).floor() as usize
}

/// Places events on the `T × D` grid; NaN marks an empty cell.
///
/// Cell `k` collects events in `[k·step − step/2, k·step + step/2)`. When two
/// events land in one cell the one with the later timestamp wins, ties going
/// to the later event in stream order. Events past the last cell are dropped.
pub fn resample_to_grid(stream: &RawEventStream, manifest: &FeatureManifest) -> Result<Array2<f64>> {
    let (steps, features) = (manifest.steps, manifest.features());
    let malformed = |reason: String| Error::MalformedStream {
        patient: stream.patient_id.clone(),
        reason,
    };
    let mut order: Vec<usize> = (0..stream.events.len()).collect();
    for e in &stream.events {
        if e.feature >= features {
            return Err(malformed(format!("feature index {} >= {features}", e.feature)));
        }
        if !(e.time_hours.is_finite() && e.time_hours >= 0.0) {
            return Err(malformed(format!("timestamp {}", e.time_hours)));
        }
        if !e.value.is_finite() {
            return Err(malformed(format!("non-finite value for feature {}", e.feature)));
        }
    }
    order.sort_by(|&a, &b| stream.events[a].time_hours.total_cmp(&stream.events[b].time_hours));
    let mut grid = Array2::from_elem((steps, features), f64::NAN);
    for i in order {
        let e = stream.events[i];
        let k = grid_index(e.time_hours, manifest.grid_step_hours);
        if k < steps {
            grid[[k, e.feature]] = e.value;
        }
    }
    Ok(grid)
}

pub fn extract_masks(grid: &Array2<f64>) -> Array2<u8> {
    grid.mapv(|v| (!v.is_nan()) as u8)
}

/// Observed mean and population standard deviation per feature.
pub fn fit_standardizer<'a>(grids: impl IntoIterator<Item = &'a Array2<f64>>, features: usize) -> Standardizer {
    let mut count = vec![0usize; features];
    let mut sum = vec![0.0; features];
    let grids: Vec<&Array2<f64>> = grids.into_iter().collect();
    for g in &grids {
        for row in g.rows() {
            for (d, &v) in row.iter().enumerate() {
                if !v.is_nan() {
                    count[d] += 1;
                    sum[d] += v;
                }
            }
        }
    }
    let mean: Vec<f64> = (0..features)
        .map(|d| if count[d] > 0 { sum[d] / count[d] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; features];
    for g in &grids {
        for row in g.rows() {
            for (d, &v) in row.iter().enumerate() {
                if !v.is_nan() {
                    sq[d] += (v - mean[d]).powi(2);
                }
            }
        }
    }
    let mut std = vec![1.0; features];
    let mut constant = vec![false; features];
    for d in 0..features {
        let s = if count[d] > 0 { (sq[d] / count[d] as f64).sqrt() } else { 0.0 };
        if s > 1e-12 * mean[d].abs().max(1.0) {
            std[d] = s;
        } else {
            constant[d] = true;
        }
    }
    Standardizer { mean, std, constant }
}

/// Standardized values at observed cells, zero elsewhere.
pub fn apply_standardizer(standardizer: &Standardizer, grid: &Array2<f64>, m: &Array2<u8>) -> Array2<f32> {
    Array2::from_shape_fn(grid.dim(), |(t, d)| {
        if m[[t, d]] == 1 {
            standardizer.transform(d, grid[[t, d]]) as f32
        } else {
            0.0
        }
    })
}

/// A label is positive iff its intervention is active at any step of the
/// prediction window.
pub fn extract_labels(patient_id: &str, interventions: &[Vec<u8>], spec: &LabelWindowSpec) -> Result<Vec<u8>> {
    let pred = spec.prediction_steps();
    interventions
        .iter()
        .enumerate()
        .map(|(l, seq)| {
            if seq.len() < spec.total_steps() {
                return Err(Error::RejectedRecord {
                    patient: patient_id.to_string(),
                    reason: format!(
                        "intervention sequence {l} covers {} steps, need {}",
                        seq.len(),
                        spec.total_steps()
                    ),
                });
            }
            Ok(seq[pred.clone()].iter().any(|&a| a != 0) as u8)
        })
        .collect()
}
