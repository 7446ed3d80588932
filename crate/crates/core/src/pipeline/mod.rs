//! From raw measurement streams to standardized, split cohorts.

mod grid;
mod ingest;
mod toy;

pub use grid::{
    apply_standardizer, extract_labels, extract_masks, fit_standardizer, grid_index, resample_to_grid, Event,
    LabelWindowSpec, RawEventStream,
};
pub use ingest::ingest_csv;
pub use toy::{generate_toy_cohort, GroundTruth, LabelSpec, PlantedMinority, StaticSpec, ToyProcessParams};

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{
    stratified_split_labels, Cohort, FeatureManifest, PatientRecord, Provenance, StaticVocabulary, DEFAULT_FRACTIONS,
};
use crate::error::{Error, Result};

/// A stream dropped during cohort selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub patient: String,
    pub reason: String,
}

/// Everything needed to turn streams into a cohort.
#[derive(Clone, Debug)]
pub struct CohortSpec<'a> {
    pub manifest: &'a FeatureManifest,
    pub vocab: &'a StaticVocabulary,
    pub label_names: &'a [String],
    pub window: LabelWindowSpec,
    /// Label the split is stratified on.
    pub task_label: usize,
    pub split_seed: u64,
}

/// Grids, masks and labels every stream, drops stays that are too short,
/// splits on the task label and standardizes with training-split statistics.
pub fn build_cohort(streams: &[RawEventStream], spec: &CohortSpec) -> Result<(Cohort, Vec<Rejection>)> {
    spec.manifest.validate()?;
    spec.vocab.validate()?;
    spec.window.validate()?;
    if spec.task_label >= spec.label_names.len() {
        return Err(Error::InvalidParam(format!("task label index {}", spec.task_label)));
    }
    let step_hours = 1.0 / spec.window.steps_per_hour as f64;
    if (step_hours - spec.manifest.grid_step_hours).abs() > 1e-12 {
        return Err(Error::InvalidParam(format!(
            "grid step {} h does not match {} steps per hour",
            spec.manifest.grid_step_hours, spec.window.steps_per_hour
        )));
    }
    type Gridded = (String, Array2<f64>, Array2<u8>, Vec<u32>, Vec<u8>);
    let processed: Vec<Result<Gridded>> = streams
        .par_iter()
        .map(|s| {
            check_statics(s, spec.vocab)?;
            if s.interventions.len() != spec.label_names.len() {
                return Err(Error::MalformedStream {
                    patient: s.patient_id.clone(),
                    reason: format!(
                        "{} intervention sequences for {} labels",
                        s.interventions.len(),
                        spec.label_names.len()
                    ),
                });
            }
            let y = extract_labels(&s.patient_id, &s.interventions, &spec.window)?;
            let grid = resample_to_grid(s, spec.manifest)?;
            let m = extract_masks(&grid);
            Ok((s.patient_id.clone(), grid, m, s.statics.clone(), y))
        })
        .collect();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for p in processed {
        match p {
            Ok(g) => kept.push(g),
            Err(Error::RejectedRecord { patient, reason }) => rejected.push(Rejection { patient, reason }),
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidParam("no stream survived cohort selection".into()));
    }
    let labels: Vec<u8> = kept.iter().map(|k| k.4[spec.task_label]).collect();
    let splits = stratified_split_labels(&labels, DEFAULT_FRACTIONS, spec.split_seed)?;
    let standardizer = fit_standardizer(splits.train.iter().map(|&i| &kept[i].1), spec.manifest.features());
    let records = kept
        .into_par_iter()
        .map(|(id, grid, m, s, y)| PatientRecord {
            id,
            x: apply_standardizer(&standardizer, &grid, &m),
            m,
            s,
            y,
        })
        .collect();
    let cohort = Cohort {
        records,
        manifest: spec.manifest.clone(),
        vocab: spec.vocab.clone(),
        label_names: spec.label_names.to_vec(),
        standardizer,
        splits,
        provenance: Provenance::Real,
    };
    Ok((cohort, rejected))
}

fn check_statics(s: &RawEventStream, vocab: &StaticVocabulary) -> Result<()> {
    let ok = s.statics.len() == vocab.variables.len()
        && s.statics
            .iter()
            .zip(&vocab.variables)
            .all(|(&c, v)| (c as usize) < v.categories.len());
    if ok {
        Ok(())
    } else {
        Err(Error::MalformedStream {
            patient: s.patient_id.clone(),
            reason: format!("static codes {:?} do not fit the vocabulary", s.statics),
        })
    }
}

/// Toy streams pushed through the full preprocessing pipeline, split on
/// label 0 with the process seed.
pub fn toy_cohort(params: &ToyProcessParams) -> Result<(Cohort, Vec<GroundTruth>)> {
    let (streams, truth) = generate_toy_cohort(params)?;
    let manifest = params.manifest()?;
    let vocab = params.vocab();
    let label_names = params.label_names();
    let spec = CohortSpec {
        manifest: &manifest,
        vocab: &vocab,
        label_names: &label_names,
        window: params.window,
        task_label: 0,
        split_seed: params.seed,
    };
    let (cohort, rejected) = build_cohort(&streams, &spec)?;
    debug_assert!(rejected.is_empty());
    Ok((cohort, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_cohort_is_valid_and_standardized() {
        let (c, truth) = toy_cohort(&ToyProcessParams {
            n: 400,
            ..Default::default()
        })
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.len(), 400);
        assert_eq!(truth.len(), 400);
        let d = c.manifest.features();
        for f in 0..d {
            let vals: Vec<f64> = c
                .train()
                .iter()
                .flat_map(|r| (0..r.steps()).filter(move |&t| r.m[[t, f]] == 1).map(move |t| r.x[[t, f]] as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            // f32 storage limits the precision of the recomputed moments
            assert!(mean.abs() < 1e-5, "feature {f} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "feature {f} var {var}");
        }
    }

    #[test]
    fn short_stays_are_rejected() {
        let p = ToyProcessParams {
            n: 40,
            ..Default::default()
        };
        let (mut streams, _) = generate_toy_cohort(&p).unwrap();
        streams[3].interventions[0].truncate(40);
        let manifest = p.manifest().unwrap();
        let vocab = p.vocab();
        let names = p.label_names();
        let spec = CohortSpec {
            manifest: &manifest,
            vocab: &vocab,
            label_names: &names,
            window: p.window,
            task_label: 0,
            split_seed: 0,
        };
        let (c, rejected) = build_cohort(&streams, &spec).unwrap();
        assert_eq!(c.len(), 39);
        assert_eq!(rejected.len(), 1);
        assert_eq!(rejected[0].patient, streams[3].patient_id);
    }
}
