use std::path::Path;

use rand::seq::SliceRandom;

use super::{ElboNoise, ElboTerms, HealthGen, HealthGenConfig, SeqBatch};
use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Mat, ParamStore};
use crate::rng::{substream, Rng};

/// One row of the training curve. Term columns are training-set means.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub mask_nll: f64,
    pub x_nll: f64,
    pub kl_v: f64,
    pub kl_z: f64,
    pub lr: f64,
    pub optimizer_steps: usize,
}

pub struct FitOutput<M> {
    /// Parameters of the epoch with the lowest validation loss.
    pub model: M,
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// What the shared minibatch loop needs from a sequence model.
pub(crate) trait Trainable: Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn make_batch(&self, records: &[&PatientRecord], cohort_labels: &[String]) -> Result<SeqBatch>;
    /// Loss (and gradient when asked) with noise drawn from `rng`.
    fn objective(&self, batch: &SeqBatch, rng: &mut Rng, grad: bool) -> Result<(ElboTerms, Option<Vec<Mat>>)>;
}

pub(crate) struct LoopSpec {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by 0.1.
    pub lr_decay_epoch: Option<usize>,
}

pub(crate) fn train_loop<M: Trainable>(
    mut model: M,
    cohort: &Cohort,
    spec: &LoopSpec,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats, &M, bool) -> Result<()>,
) -> Result<FitOutput<M>> {
    let train_idx = cohort.splits.train.clone();
    if train_idx.is_empty() {
        return Err(Error::InvalidParam("empty training split".into()));
    }
    let val_records = cohort.select(&cohort.splits.val);
    let val_batches: Vec<SeqBatch> = val_records
        .chunks(spec.batch.max(1))
        .map(|c| model.make_batch(c, &cohort.label_names))
        .collect::<Result<_>>()?;
    let mut adam = AdamState::new(model.params(), spec.lr);
    let mut curve = Vec::with_capacity(spec.epochs);
    let mut best: Option<(f64, usize, M)> = None;
    let mut steps = 0usize;
    for epoch in 0..spec.epochs {
        if spec.lr_decay_epoch.is_some_and(|e| epoch >= e) {
            adam.lr = spec.lr * 0.1;
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut substream(seed, "epoch-order", epoch as u64));
        let mut sums = ElboTerms::default();
        for chunk in order.chunks(spec.batch.max(1)) {
            let records = cohort.select(chunk);
            let batch = model.make_batch(&records, &cohort.label_names)?;
            let mut rng = substream(seed, "train-noise", steps as u64);
            let (terms, grads) = model.objective(&batch, &mut rng, true)?;
            adam.step(model.params_mut(), &grads.expect("gradient requested"))?;
            steps += 1;
            let w = chunk.len() as f64;
            sums.loss += terms.loss * w;
            sums.mask_nll += terms.mask_nll * w;
            sums.x_nll += terms.x_nll * w;
            sums.kl_v += terms.kl_v * w;
            sums.kl_z += terms.kl_z * w;
        }
        let n = train_idx.len() as f64;
        let train_loss = sums.loss / n;
        let val_loss = if val_batches.is_empty() {
            train_loss
        } else {
            let mut total = 0.0;
            for (i, b) in val_batches.iter().enumerate() {
                let mut rng = substream(seed, "val-noise", i as u64);
                total += model.objective(b, &mut rng, false)?.0.loss * b.rows() as f64;
            }
            total / val_records.len() as f64
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            mask_nll: sums.mask_nll / n,
            x_nll: sums.x_nll / n,
            kl_v: sums.kl_v / n,
            kl_z: sums.kl_z / n,
            lr: adam.lr,
            optimizer_steps: steps,
        };
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, epoch, model.clone()));
        }
        on_epoch(&stats, &model, improved)?;
        curve.push(stats);
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(FitOutput {
        model,
        curve,
        best_epoch,
    })
}

impl Trainable for HealthGen {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn make_batch(&self, records: &[&PatientRecord], cohort_labels: &[String]) -> Result<SeqBatch> {
        self.batch(records, cohort_labels)
    }

    fn objective(&self, batch: &SeqBatch, rng: &mut Rng, grad: bool) -> Result<(ElboTerms, Option<Vec<Mat>>)> {
        let noise = ElboNoise::sample(rng, batch.rows(), self.schema.steps, self.config.dim_v, self.config.dim_z);
        if grad {
            let (t, g) = self.elbo_grad(batch, &noise)?;
            Ok((t, Some(g)))
        } else {
            Ok((self.elbo(batch, &noise)?, None))
        }
    }
}

/// Trains on the cohort's training split, keeping the parameters of the
/// best validation epoch. `labels` are the conditioning labels.
pub fn fit(cohort: &Cohort, config: &HealthGenConfig, labels: &[String], seed: u64) -> Result<FitOutput<HealthGen>> {
    fit_with(cohort, config, labels, seed, |_, _, _| Ok(()))
}

/// Like [`fit`], calling `on_epoch(stats, current_model, is_new_best)` after
/// every epoch, e.g. to checkpoint.
pub fn fit_with(
    cohort: &Cohort,
    config: &HealthGenConfig,
    labels: &[String],
    seed: u64,
    on_epoch: impl FnMut(&EpochStats, &HealthGen, bool) -> Result<()>,
) -> Result<FitOutput<HealthGen>> {
    let schema = super::DataSchema::from_cohort(cohort, labels)?;
    let model = HealthGen::new(config.clone(), schema, seed)?;
    let spec = LoopSpec {
        epochs: config.epochs,
        batch: config.batch,
        lr: config.lr,
        lr_decay_epoch: None,
    };
    train_loop(model, cohort, &spec, seed, on_epoch)
}

pub fn write_curve_csv(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for row in curve {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
