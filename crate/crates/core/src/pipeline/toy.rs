//! Synthetic ground-truth EHR process with label-dependent measurement
//! frequency.
//!
//! Each patient carries a scalar latent AR(1) trajectory whose drift depends
//! on the task label (label 0). Every feature is a noisy linear read-out of
//! that trajectory. A feature is measured in a grid interval with probability
//! `clamp(ρ_d · e^η · (1 + κ·y), 0, 1)`, where `η` is a per-patient
//! log-normal intensity with unit mean, so the masks alone carry label
//! information without separating the classes perfectly.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::{Event, LabelWindowSpec, RawEventStream};
use crate::data::{FeatureManifest, StaticVariable, StaticVocabulary};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticSpec {
    pub name: String,
    pub categories: Vec<String>,
    pub proportions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub name: String,
    pub base_rate: f64,
}

/// A subgroup whose missingness signal lives on different features than
/// everybody else's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedMinority {
    pub variable: usize,
    pub category: u32,
    pub informative_features: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyProcessParams {
    pub n: usize,
    pub features: usize,
    pub steps: usize,
    pub grid_step_hours: f64,
    pub statics: Vec<StaticSpec>,
    /// Label 0 drives the latent drift and the missingness.
    pub labels: Vec<LabelSpec>,
    /// AR coefficient `a_y` for y = 0 and y = 1.
    pub ar_coef: [f64; 2],
    /// Per-step drift for y = 0 and y = 1.
    pub drift: [f64; 2],
    pub latent_noise: f64,
    pub obs_noise: f64,
    /// Per-feature baselines; defaults to `10·(d+1)`.
    pub baseline: Option<Vec<f64>>,
    /// Per-feature loadings on the latent; defaults to `1 + (d mod 3)`.
    pub loading: Option<Vec<f64>>,
    /// Per-feature observation rate `ρ_d`; defaults to `base_obs_rate`.
    pub obs_rate: Option<Vec<f64>>,
    pub base_obs_rate: f64,
    pub kappa: f64,
    /// Standard deviation of the per-patient log-intensity.
    pub obs_rate_dispersion: f64,
    /// Added to the latent increment, one entry per category of static
    /// variable 0. Empty means no effect.
    pub subgroup_effect: Vec<f64>,
    /// Features whose rate responds to κ; `None` means all.
    pub informative_features: Option<Vec<usize>>,
    pub planted_minority: Option<PlantedMinority>,
    /// Chance that a y = 0 stay has an intervention episode confined to the
    /// observation window and gap.
    pub spurious_episode_rate: f64,
    pub window: LabelWindowSpec,
    pub seed: u64,
}

impl Default for ToyProcessParams {
    fn default() -> Self {
        ToyProcessParams {
            n: 2000,
            features: 12,
            steps: 25,
            grid_step_hours: 0.25,
            statics: vec![
                StaticSpec {
                    name: "insurance".into(),
                    categories: ["medicare", "private", "medicaid", "government", "self_pay"]
                        .map(String::from)
                        .to_vec(),
                    proportions: vec![0.53, 0.34, 0.08, 0.03, 0.01],
                },
                StaticSpec {
                    name: "sex".into(),
                    categories: vec!["m".into(), "f".into()],
                    proportions: vec![0.57, 0.43],
                },
            ],
            labels: vec![LabelSpec {
                name: "vent".into(),
                base_rate: 0.12,
            }],
            ar_coef: [0.8, 0.8],
            drift: [0.0, 0.05],
            latent_noise: 0.3,
            obs_noise: 0.5,
            baseline: None,
            loading: None,
            obs_rate: None,
            base_obs_rate: 0.15,
            kappa: 0.8,
            obs_rate_dispersion: 0.35,
            subgroup_effect: vec![],
            informative_features: None,
            planted_minority: None,
            spurious_episode_rate: 0.1,
            window: LabelWindowSpec::default(),
            seed: 0,
        }
    }
}

/// Latent quantities behind one generated stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub latent: Vec<f64>,
    pub intensity: f64,
    pub y: Vec<u8>,
    pub statics: Vec<u32>,
}

impl ToyProcessParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: String| Err(Error::InvalidParam(s));
        if self.n == 0 {
            return bad("toy process needs n >= 1".into());
        }
        if self.features == 0 || self.steps < 2 || !(self.grid_step_hours > 0.0) {
            return bad(format!(
                "toy grid {} features × {} steps at {} h",
                self.features, self.steps, self.grid_step_hours
            ));
        }
        if self.labels.is_empty() {
            return bad("toy process needs at least one label".into());
        }
        for l in &self.labels {
            if !(0.0..=1.0).contains(&l.base_rate) {
                return bad(format!("base rate of {} is {}", l.name, l.base_rate));
            }
        }
        for s in &self.statics {
            if s.categories.is_empty() || s.categories.len() != s.proportions.len() {
                return bad(format!("static {} has mismatched categories/proportions", s.name));
            }
            if s.proportions.iter().any(|&p| !(p >= 0.0)) || s.proportions.iter().sum::<f64>() <= 0.0 {
                return bad(format!("static {} has invalid proportions", s.name));
            }
        }
        if self.ar_coef.iter().any(|a| !(a.abs() < 1.0)) {
            return bad(format!("AR coefficients {:?} must lie in (-1, 1)", self.ar_coef));
        }
        if !(self.latent_noise >= 0.0 && self.obs_noise >= 0.0 && self.obs_rate_dispersion >= 0.0) {
            return bad("noise scales must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_episode_rate) {
            return bad("spurious episode rate must be a probability".into());
        }
        let d = self.features;
        for (name, v) in [("baseline", &self.baseline), ("loading", &self.loading), ("obs_rate", &self.obs_rate)] {
            if let Some(v) = v {
                if v.len() != d {
                    return Err(Error::shape(format!("toy {name}"), d, v.len()));
                }
            }
        }
        if self.rates().iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("observation rates must be probabilities".into());
        }
        if !self.subgroup_effect.is_empty() {
            let k = self.statics.first().map_or(0, |s| s.categories.len());
            if self.subgroup_effect.len() != k {
                return Err(Error::shape("toy subgroup_effect", k, self.subgroup_effect.len()));
            }
        }
        if let Some(f) = &self.informative_features {
            if f.iter().any(|&i| i >= d) {
                return bad("informative feature out of range".into());
            }
        }
        if let Some(p) = &self.planted_minority {
            let ok = self
                .statics
                .get(p.variable)
                .is_some_and(|s| (p.category as usize) < s.categories.len())
                && p.informative_features.iter().all(|&i| i < d);
            if !ok {
                return bad(format!("planted minority {p:?} does not match the statics"));
            }
        }
        self.window.validate()?;
        if self.steps > self.window.total_steps() {
            return bad("grid longer than the stay".into());
        }
        Ok(())
    }

    pub fn manifest(&self) -> Result<FeatureManifest> {
        FeatureManifest::new(
            (0..self.features).map(|d| format!("feature_{d:02}")).collect(),
            self.grid_step_hours,
            self.steps,
        )
    }

    pub fn vocab(&self) -> StaticVocabulary {
        StaticVocabulary {
            variables: self
                .statics
                .iter()
                .map(|s| StaticVariable {
                    name: s.name.clone(),
                    categories: s.categories.clone(),
                })
                .collect(),
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.name.clone()).collect()
    }

    fn baselines(&self) -> Vec<f64> {
        self.baseline
            .clone()
            .unwrap_or_else(|| (0..self.features).map(|d| 10.0 * (d + 1) as f64).collect())
    }

    fn loadings(&self) -> Vec<f64> {
        self.loading
            .clone()
            .unwrap_or_else(|| (0..self.features).map(|d| 1.0 + (d % 3) as f64).collect())
    }

    fn rates(&self) -> Vec<f64> {
        self.obs_rate.clone().unwrap_or_else(|| vec![self.base_obs_rate; self.features])
    }

    fn informative_mask(&self, statics: &[u32]) -> Vec<bool> {
        let pick = |set: &[usize]| {
            let mut v = vec![false; self.features];
            set.iter().for_each(|&i| v[i] = true);
            v
        };
        if let Some(p) = &self.planted_minority {
            if statics[p.variable] == p.category {
                return pick(&p.informative_features);
            }
        }
        match &self.informative_features {
            Some(f) => pick(f),
            None => vec![true; self.features],
        }
    }
}

/// Generates `n` raw streams plus the latent ground truth behind them.
/// Patient `i` draws from its own random stream, so output does not depend on
/// thread scheduling.
pub fn generate_toy_cohort(params: &ToyProcessParams) -> Result<(Vec<RawEventStream>, Vec<GroundTruth>)> {
    params.validate()?;
    let samplers: Vec<WeightedIndex<f64>> = params
        .statics
        .iter()
        .map(|s| WeightedIndex::new(&s.proportions).map_err(|e| Error::InvalidParam(format!("{}: {e}", s.name))))
        .collect::<Result<_>>()?;
    let baseline = params.baselines();
    let loading = params.loadings();
    let rates = params.rates();
    let pairs: Vec<(RawEventStream, GroundTruth)> = (0..params.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(params.seed, "toy-patient", i as u64);
            toy_patient(params, i, &samplers, &baseline, &loading, &rates, &mut rng)
        })
        .collect();
    Ok(pairs.into_iter().unzip())
}

fn toy_patient<R: Rng>(
    params: &ToyProcessParams,
    index: usize,
    samplers: &[WeightedIndex<f64>],
    baseline: &[f64],
    loading: &[f64],
    rates: &[f64],
    rng: &mut R,
) -> (RawEventStream, GroundTruth) {
    let statics: Vec<u32> = samplers.iter().map(|w| w.sample(rng) as u32).collect();
    let y: Vec<u8> = params.labels.iter().map(|l| rng.random_bool(l.base_rate) as u8).collect();
    let task = y[0] as usize;

    let effect = match (params.subgroup_effect.is_empty(), statics.first()) {
        (false, Some(&c)) => params.subgroup_effect[c as usize],
        _ => 0.0,
    };
    let mut latent = Vec::with_capacity(params.steps);
    let mut z = 0.0;
    for _ in 0..params.steps {
        let eps: f64 = StandardNormal.sample(rng);
        z = params.ar_coef[task] * z + params.drift[task] + effect + params.latent_noise * eps;
        latent.push(z);
    }

    let sigma = params.obs_rate_dispersion;
    let g: f64 = StandardNormal.sample(rng);
    let eta = sigma * g - 0.5 * sigma * sigma;
    let intensity = eta.exp();
    let informative = params.informative_mask(&statics);
    let step = params.grid_step_hours;
    let mut events = Vec::new();
    for (t, &z) in latent.iter().enumerate() {
        for d in 0..params.features {
            let boost = if informative[d] { params.kappa * task as f64 } else { 0.0 };
            let p = (rates[d] * intensity * (1.0 + boost)).clamp(0.0, 1.0);
            if rng.random_bool(p) {
                // stay strictly inside the cell centred on t·step
                let jitter = if t == 0 {
                    rng.random_range(0.0..0.49)
                } else {
                    rng.random_range(-0.49..0.49)
                };
                let noise: f64 = StandardNormal.sample(rng);
                events.push(Event {
                    time_hours: (t as f64 + jitter) * step,
                    feature: d,
                    value: baseline[d] + loading[d] * z + params.obs_noise * noise,
                });
            }
        }
    }

    let w = &params.window;
    let total = w.total_steps();
    let pred = w.prediction_steps();
    let interventions = y
        .iter()
        .map(|&label| {
            let mut seq = vec![0u8; total];
            if label == 1 {
                let onset = rng.random_range(w.gap_start()..total);
                seq[onset..].fill(1);
            } else if rng.random_bool(params.spurious_episode_rate) {
                let onset = rng.random_range(0..pred.start);
                let len = rng.random_range(1..=4);
                seq[onset..(onset + len).min(pred.start)].fill(1);
            }
            seq
        })
        .collect();

    let stream = RawEventStream {
        patient_id: format!("toy-{index:06}"),
        events,
        interventions,
        statics: statics.clone(),
    };
    let truth = GroundTruth {
        latent,
        intensity,
        y,
        statics,
    };
    (stream, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::grid::{extract_labels, extract_masks, resample_to_grid};

    #[test]
    fn deterministic_for_seed() {
        let p = ToyProcessParams {
            n: 50,
            ..Default::default()
        };
        let a = generate_toy_cohort(&p).unwrap();
        let b = generate_toy_cohort(&p).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_cohort(&ToyProcessParams { seed: 1, ..p }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn degenerate_process_emits_baselines() {
        let p = ToyProcessParams {
            n: 20,
            obs_noise: 0.0,
            latent_noise: 0.0,
            drift: [0.0, 0.0],
            ar_coef: [0.0, 0.0],
            ..Default::default()
        };
        let (streams, _) = generate_toy_cohort(&p).unwrap();
        let base = p.baselines();
        for e in streams.iter().flat_map(|s| &s.events) {
            assert_eq!(e.value, base[e.feature]);
        }
    }

    #[test]
    fn labels_follow_interventions() {
        let p = ToyProcessParams {
            n: 300,
            ..Default::default()
        };
        let (streams, truth) = generate_toy_cohort(&p).unwrap();
        for (s, t) in streams.iter().zip(&truth) {
            assert_eq!(extract_labels(&s.patient_id, &s.interventions, &p.window).unwrap(), t.y);
        }
    }

    #[test]
    fn events_stay_in_their_cell() {
        let p = ToyProcessParams {
            n: 100,
            ..Default::default()
        };
        let (streams, _) = generate_toy_cohort(&p).unwrap();
        let manifest = p.manifest().unwrap();
        for s in &streams {
            let m = extract_masks(&resample_to_grid(s, &manifest).unwrap());
            assert_eq!(m.iter().map(|&v| v as usize).sum::<usize>(), s.events.len());
        }
    }

    #[test]
    fn rejects_bad_params() {
        let bad = [
            ToyProcessParams {
                n: 0,
                ..Default::default()
            },
            ToyProcessParams {
                ar_coef: [1.0, 0.5],
                ..Default::default()
            },
            ToyProcessParams {
                base_obs_rate: 1.5,
                ..Default::default()
            },
            ToyProcessParams {
                subgroup_effect: vec![0.1],
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(generate_toy_cohort(&p).is_err(), "{p:?}");
        }
    }
}
