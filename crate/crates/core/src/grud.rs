//! GRU-D binary classifier, the downstream model of every TSTR run.
//!
//! Unobserved inputs decay from the last observation toward the training
//! mean with a per-feature rate, and the hidden state decays with a rate
//! driven by the full vector of times since last observation.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::nn::checkpoint::{load_checkpoint_into, read_checkpoint_manifest, save_checkpoint};
use crate::nn::{Activation, AdamState, Dense, Graph, Gru, Mat, ParamId, ParamStore, Var};
use crate::rng::substream;

pub const GRUD_TAG: &str = "grud";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrudConfig {
    pub hidden: usize,
    pub lr: f64,
    pub lr_decay_epoch: Option<usize>,
    pub epochs: usize,
    pub batch: usize,
    /// Zero every value so only masks and elapsed times are seen.
    pub masks_only: bool,
}

impl Default for GrudConfig {
    fn default() -> Self {
        GrudConfig {
            hidden: 64,
            lr: 5e-4,
            lr_decay_epoch: Some(20),
            epochs: 30,
            batch: 64,
            masks_only: false,
        }
    }
}

impl GrudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidParam(format!(
                "grud hidden {} batch {} lr {}",
                self.hidden, self.batch, self.lr
            )));
        }
        Ok(())
    }
}

/// Hours since the last observation of each feature, `[T, D]`: zero at the
/// first step, then one grid step plus the previous gap while unobserved.
pub fn compute_delta(m: &Array2<u8>, grid_step: f64) -> Array2<f64> {
    let (t_len, d) = m.dim();
    let mut delta = Array2::zeros((t_len, d));
    for t in 1..t_len {
        for j in 0..d {
            let carry = if m[[t - 1, j]] == 0 { delta[[t - 1, j]] } else { 0.0 };
            delta[[t, j]] = grid_step + carry;
        }
    }
    delta
}

/// `γ = exp(−max(0, w⊙δ + b))`, then
/// `x̂ = m⊙x + (1−m)⊙(γ⊙last + (1−γ)⊙x̄)`, for one record step.
pub fn decayed_input(
    x: &[f64],
    m: &[f64],
    last: &[f64],
    delta: &[f64],
    w: &[f64],
    b: &[f64],
    mean: &[f64],
) -> Vec<f64> {
    (0..x.len())
        .map(|d| {
            let gamma = (-(w[d] * delta[d] + b[d]).max(0.0)).exp();
            m[d] * x[d] + (1.0 - m[d]) * (gamma * last[d] + (1.0 - gamma) * mean[d])
        })
        .collect()
}

/// Per-step inputs with the data-only parts of the input decay folded in:
/// `x̂_t = base_t + γ_t ⊙ spread_t`.
#[derive(Clone, Debug)]
pub struct GrudBatch {
    pub m: Vec<Mat>,
    pub delta: Vec<Mat>,
    /// `m⊙x + (1−m)⊙x̄`
    pub base: Vec<Mat>,
    /// `(1−m)⊙(last − x̄)`
    pub spread: Vec<Mat>,
    /// `[B, 1]`
    pub y: Mat,
}

impl GrudBatch {
    pub fn rows(&self) -> usize {
        self.y.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct Grud {
    pub config: GrudConfig,
    /// Label the classifier predicts.
    pub task: String,
    pub grid_step: f64,
    /// Training-split observed mean per feature (zero when masks-only).
    pub x_mean: Vec<f64>,
    gx_w: ParamId,
    gx_b: ParamId,
    gh: Dense,
    gru: Gru,
    head: Dense,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrudEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug)]
pub struct GrudFit {
    pub model: Grud,
    pub curve: Vec<GrudEpoch>,
    pub best_epoch: usize,
    /// Validation AUROC of the returned parameters.
    pub best_val_auroc: Option<f64>,
}

/// Observed mean of each feature over `records`; zero when never observed.
pub fn observed_means(records: &[&PatientRecord], features: usize) -> Vec<f64> {
    let mut sum = vec![0.0; features];
    let mut n = vec![0usize; features];
    for r in records {
        for ((t, d), &m) in r.m.indexed_iter() {
            if m == 1 {
                sum[d] += r.x[[t, d]] as f64;
                n[d] += 1;
            }
        }
    }
    sum.iter().zip(&n).map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 }).collect()
}

impl Grud {
    pub fn new(config: GrudConfig, task: &str, features: usize, grid_step: f64, x_mean: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        if x_mean.len() != features || x_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("grud feature means must be finite, one per feature".into()));
        }
        let mut rng = substream(seed, "model-init", 0);
        let mut store = ParamStore::new();
        let gx_w = store.insert_weight("grud.gamma_x.w", 1, features, &mut rng);
        let gx_b = store.insert_bias("grud.gamma_x.b", features);
        let gh = Dense::init(&mut store, "grud.gamma_h", features, config.hidden, Activation::Identity, &mut rng);
        let gru = Gru::init(&mut store, "grud.gru", 2 * features, config.hidden, &mut rng);
        let head = Dense::init(&mut store, "grud.head", config.hidden, 1, Activation::Identity, &mut rng);
        Ok(Grud {
            config,
            task: task.to_string(),
            grid_step,
            x_mean,
            gx_w,
            gx_b,
            gh,
            gru,
            head,
            store,
        })
    }

    pub fn features(&self) -> usize {
        self.x_mean.len()
    }

    pub fn batch(&self, records: &[&PatientRecord], label: usize) -> Result<GrudBatch> {
        let d = self.features();
        let b = records.len();
        let t_len = records.first().map_or(0, |r| r.steps());
        let mut m = vec![Mat::zeros((b, d)); t_len];
        let mut delta = vec![Mat::zeros((b, d)); t_len];
        let mut base = vec![Mat::zeros((b, d)); t_len];
        let mut spread = vec![Mat::zeros((b, d)); t_len];
        let mut y = Mat::zeros((b, 1));
        for (i, r) in records.iter().enumerate() {
            if r.x.dim() != (t_len, d) {
                return Err(Error::shape(format!("grud record {}", r.id), t_len * d, r.x.len()));
            }
            y[[i, 0]] = r.y[label] as f64;
            let dl = compute_delta(&r.m, self.grid_step);
            let mut last = self.x_mean.clone();
            for t in 0..t_len {
                for j in 0..d {
                    let obs = r.m[[t, j]] == 1;
                    let x = if obs && !self.config.masks_only { r.x[[t, j]] as f64 } else { 0.0 };
                    m[t][[i, j]] = obs as u8 as f64;
                    delta[t][[i, j]] = dl[[t, j]];
                    if obs {
                        base[t][[i, j]] = x;
                        last[j] = x;
                    } else {
                        base[t][[i, j]] = self.x_mean[j];
                        spread[t][[i, j]] = last[j] - self.x_mean[j];
                    }
                }
            }
        }
        Ok(GrudBatch { m, delta, base, spread, y })
    }

    /// Logits `[B, 1]` on the tape.
    pub fn logits(&self, g: &mut Graph, batch: &GrudBatch) -> Var {
        let rows = batch.rows();
        let wx = g.param(self.gx_w);
        let bx = g.param(self.gx_b);
        let mut h = g.zeros(rows, self.config.hidden);
        for t in 0..batch.m.len() {
            let dl = g.constant(batch.delta[t].clone());
            let a = g.mul_row(dl, wx);
            let a = g.add_bias(a, bx);
            let a = g.relu(a);
            let a = g.scale(a, -1.0);
            let gamma_x = g.exp(a);
            let spread = g.constant(batch.spread[t].clone());
            let base = g.constant(batch.base[t].clone());
            let moved = g.mul(gamma_x, spread);
            let x_hat = g.add(base, moved);

            let a = self.gh.forward(g, dl);
            let a = g.relu(a);
            let a = g.scale(a, -1.0);
            let gamma_h = g.exp(a);
            h = g.mul(gamma_h, h);
            let m = g.constant(batch.m[t].clone());
            let inp = g.concat(&[x_hat, m]);
            h = self.gru.step(g, inp, h);
        }
        self.head.forward(g, h)
    }

    /// Mean binary cross-entropy from logits, `y·softplus(−l) + (1−y)·softplus(l)`.
    pub fn loss_graph(&self, g: &mut Graph, batch: &GrudBatch) -> Var {
        let l = self.logits(g, batch);
        let y = g.constant(batch.y.clone());
        let one_minus_y = g.constant(batch.y.mapv(|v| 1.0 - v));
        let neg = g.scale(l, -1.0);
        let sp_neg = g.softplus(neg);
        let sp_pos = g.softplus(l);
        let a = g.mul(y, sp_neg);
        let b = g.mul(one_minus_y, sp_pos);
        let per = g.add(a, b);
        let total = g.sum(per);
        g.scale(total, 1.0 / batch.rows() as f64)
    }

    pub fn loss_with(&self, store: &ParamStore, batch: &GrudBatch) -> f64 {
        let mut g = Graph::new(store);
        let l = self.loss_graph(&mut g, batch);
        g.scalar(l)
    }

    pub fn loss_grad(&self, batch: &GrudBatch) -> (f64, Vec<Mat>) {
        let mut g = Graph::new(&self.store);
        let l = self.loss_graph(&mut g, batch);
        (g.scalar(l), g.backward(l).into_dense(&self.store))
    }

    /// Positive-class probabilities, scored in parallel chunks.
    pub fn predict(&self, records: &[&PatientRecord], label: usize) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = records
            .par_chunks(256)
            .map(|chunk| {
                let batch = self.batch(chunk, label)?;
                let mut g = Graph::new(&self.store);
                let l = self.logits(&mut g, &batch);
                Ok(g.value(l).column(0).iter().map(|&v| crate::nn::tape::sigmoid(v)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.config,
            "task": self.task,
            "grid_step": self.grid_step,
            "x_mean": self.x_mean,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, GRUD_TAG, &self.store, self.config_echo(), seed, epoch)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        if manifest.model != GRUD_TAG {
            return Err(Error::CorruptArchive {
                path: dir.to_path_buf(),
                array: "checkpoint".into(),
                reason: format!("model tag {:?}, expected {GRUD_TAG:?}", manifest.model),
            });
        }
        let c = &manifest.config;
        let config: GrudConfig = serde_json::from_value(c["model"].clone())?;
        let task: String = serde_json::from_value(c["task"].clone())?;
        let grid_step: f64 = serde_json::from_value(c["grid_step"].clone())?;
        let x_mean: Vec<f64> = serde_json::from_value(c["x_mean"].clone())?;
        let mut model = Grud::new(config, &task, x_mean.len(), grid_step, x_mean, manifest.seed)?;
        load_checkpoint_into(dir, &mut model.store)?;
        Ok(model)
    }
}

/// Trains on `train` and keeps the epoch with the best AUROC on `val`
/// (lowest training loss when `val` has a single class or is empty).
pub fn grud_fit(cohort: &Cohort, train: &[usize], val: &[usize], task: &str, config: &GrudConfig, seed: u64) -> Result<GrudFit> {
    let label = cohort.label_index(task)?;
    let positives = train.iter().filter(|&&i| cohort.records[i].y[label] == 1).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::SingleClass { task: task.to_string() });
    }
    let features = cohort.manifest.features();
    let x_mean = if config.masks_only {
        vec![0.0; features]
    } else {
        observed_means(&cohort.select(train), features)
    };
    let mut model = Grud::new(config.clone(), task, features, cohort.manifest.grid_step_hours, x_mean, seed)?;
    let val_records = cohort.select(val);
    let val_labels: Vec<u8> = val_records.iter().map(|r| r.y[label]).collect();
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Option<f64>, ParamStore)> = None;
    for epoch in 0..config.epochs {
        if config.lr_decay_epoch.is_some_and(|e| epoch >= e) {
            adam.lr = config.lr * 0.1;
        }
        let mut order = train.to_vec();
        order.shuffle(&mut substream(seed, "grud-order", epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let batch = model.batch(&cohort.select(chunk), label)?;
            let (loss, grads) = model.loss_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut model.store, &grads)?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_auroc = if val_records.is_empty() {
            None
        } else {
            auroc(&model.predict(&val_records, label)?, &val_labels).ok()
        };
        let score = val_auroc.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, epoch, val_auroc, model.store.clone()));
        }
        curve.push(GrudEpoch {
            epoch,
            train_loss,
            val_auroc,
            lr: adam.lr,
        });
    }
    let (best_epoch, best_val_auroc) = match best {
        Some((_, e, a, store)) => {
            model.store = store;
            (e, a)
        }
        None => (0, None),
    };
    Ok(GrudFit {
        model,
        curve,
        best_epoch,
        best_val_auroc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub record_id: String,
    pub task: String,
    pub probability: f64,
    pub label: u8,
}

pub fn score_rows(model: &Grud, records: &[&PatientRecord], label: usize) -> Result<Vec<ScoreRow>> {
    let p = model.predict(records, label)?;
    Ok(records
        .iter()
        .zip(p)
        .map(|(r, probability)| ScoreRow {
            record_id: r.id.clone(),
            task: model.task.clone(),
            probability,
            label: r.y[label],
        })
        .collect())
}

pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
