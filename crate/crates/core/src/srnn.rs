//! SRNN baseline with label conditioning.
//!
//! Masks are not modelled separately: each step carries the channels
//! `[x_t, m_t, y]`, the label repeated at every step, and the Gaussian
//! decoder reconstructs `[x_t, m_t]` like any other feature. There is no
//! static latent and no mask decoder.

use std::path::Path;

use ndarray::s;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::generator::{synthesize_cohort, CompositionPlan, PlanCell, PlanMode, SequenceGenerator};
use crate::model::{train_loop, DataSchema, ElboTerms, EpochStats, FitOutput, LoopSpec, SeqBatch, Trainable};
use crate::nn::checkpoint::{load_checkpoint_into, read_checkpoint_manifest, save_checkpoint};
use crate::nn::dist::{gaussian_nll_tape, kl_tape};
use crate::nn::{Activation, Dense, GaussVar, Graph, Gru, Mat, Mlp, ParamStore, Var};
use crate::rng::{substream, Rng};

pub const SRNN_TAG: &str = "srnn";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrnnConfig {
    pub dim_z: usize,
    pub dim_h: usize,
    pub dim_g: usize,
    pub gru_input: usize,
    pub dyn_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epoch from which the learning rate drops tenfold.
    pub lr_decay_epoch: Option<usize>,
}

impl Default for SrnnConfig {
    fn default() -> Self {
        SrnnConfig {
            dim_z: 16,
            dim_h: 128,
            dim_g: 128,
            gru_input: 64,
            dyn_hidden: vec![64, 32],
            dec_hidden: vec![256],
            beta: 1.0,
            lr: 5e-4,
            batch: 32,
            epochs: 20,
            lr_decay_epoch: Some(20),
        }
    }
}

impl SrnnConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.dim_z, self.dim_h, self.dim_g, self.gru_input, self.batch];
        if dims.iter().chain(&self.dyn_hidden).chain(&self.dec_hidden).any(|&d| d == 0) {
            return Err(Error::InvalidParam("srnn dimensions must be positive".into()));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidParam(format!("beta {} / lr {}", self.beta, self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Srnn {
    pub config: SrnnConfig,
    pub schema: DataSchema,
    h_proj: Dense,
    h_gru: Gru,
    g_proj: Dense,
    g_gru: Gru,
    dyn_q: Mlp,
    dyn_p: Mlp,
    dec: Mlp,
    pub store: ParamStore,
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(out);
    s
}

fn acts(hidden: usize) -> Vec<Activation> {
    let mut a = vec![Activation::Tanh; hidden];
    a.push(Activation::Identity);
    a
}

/// Stored form of generated channels: mask thresholded at 0.5, values
/// zeroed where the mask is 0.
pub fn postprocess_channels(x: &mut [f64], m: &mut [f64]) {
    for (xv, mv) in x.iter_mut().zip(m.iter_mut()) {
        *mv = if *mv >= 0.5 { 1.0 } else { 0.0 };
        if *mv == 0.0 {
            *xv = 0.0;
        }
    }
}

impl Srnn {
    pub fn new(config: SrnnConfig, schema: DataSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "model-init", 0);
        let mut store = ParamStore::new();
        let c = &config;
        let d = schema.features;
        let ch = Self::channels_of(&schema);
        let h_proj = Dense::init(&mut store, "srnn.h.proj", ch, c.gru_input, Activation::Tanh, &mut rng);
        let h_gru = Gru::init(&mut store, "srnn.h.gru", c.gru_input, c.dim_h, &mut rng);
        let g_proj = Dense::init(&mut store, "srnn.g.proj", ch + c.dim_h, c.gru_input, Activation::Tanh, &mut rng);
        let g_gru = Gru::init(&mut store, "srnn.g.gru", c.gru_input, c.dim_g, &mut rng);
        let dyn_q = Mlp::init(
            &mut store,
            "srnn.zq",
            &sizes(c.dim_z + c.dim_g, &c.dyn_hidden, 2 * c.dim_z),
            &acts(c.dyn_hidden.len()),
            &mut rng,
        );
        let dyn_p = Mlp::init(
            &mut store,
            "srnn.zp",
            &sizes(c.dim_z + c.dim_h, &c.dyn_hidden, 2 * c.dim_z),
            &acts(c.dyn_hidden.len()),
            &mut rng,
        );
        let dec = Mlp::init(
            &mut store,
            "srnn.dec",
            &sizes(c.dim_z + c.dim_h + schema.dim_y(), &c.dec_hidden, 4 * d),
            &acts(c.dec_hidden.len()),
            &mut rng,
        );
        Ok(Srnn {
            config,
            schema,
            h_proj,
            h_gru,
            g_proj,
            g_gru,
            dyn_q,
            dyn_p,
            dec,
            store,
        })
    }

    fn channels_of(schema: &DataSchema) -> usize {
        2 * schema.features + schema.dim_y()
    }

    /// Per-step input width `2·D + |y|`.
    pub fn channels(&self) -> usize {
        Self::channels_of(&self.schema)
    }

    pub fn batch(&self, records: &[&PatientRecord], cohort_labels: &[String]) -> Result<SeqBatch> {
        let idx = self.schema.label_indices(cohort_labels)?;
        SeqBatch::from_records(records, &self.schema, false, &idx)
    }

    fn h_step(&self, g: &mut Graph, u: Var, h: Var) -> Var {
        let p = self.h_proj.forward(g, u);
        self.h_gru.step(g, p, h)
    }

    fn dynamics(&self, g: &mut Graph, mlp: &Mlp, z_prev: Var, ctx: Var) -> GaussVar {
        let inp = g.concat(&[z_prev, ctx]);
        let out = mlp.forward(g, inp);
        GaussVar::from_output(g, out, self.config.dim_z)
    }

    /// Gaussians over the x channels and the m channels.
    fn decode(&self, g: &mut Graph, z: Var, h: Var, y: Var) -> (GaussVar, GaussVar) {
        let d = self.schema.features;
        let inp = g.concat(&[z, h, y]);
        let out = self.dec.forward(g, inp);
        let both = GaussVar::from_output(g, out, 2 * d);
        let half = |g: &mut Graph, a: usize, b: usize| GaussVar {
            mu: g.slice(both.mu, a, b),
            logvar: g.slice(both.logvar, a, b),
        };
        (half(g, 0, d), half(g, d, 2 * d))
    }

    /// Negative ELBO: unmasked Gaussian NLL over all `2·D` channels plus
    /// `β · Σ_t KL(q(z_t) ‖ p(z_t))`, averaged over rows.
    pub fn objective_graph(&self, g: &mut Graph, batch: &SeqBatch, noise: &[Mat]) -> Result<(Var, ElboTerms)> {
        let rows = batch.rows();
        let t_len = self.schema.steps;
        if batch.steps() != t_len || noise.len() != t_len {
            return Err(Error::shape("srnn batch/noise steps", t_len, batch.steps()));
        }
        let y = g.constant(batch.cond.clone());
        let x: Vec<Var> = batch.x.iter().map(|a| g.constant(a.clone())).collect();
        let m: Vec<Var> = batch.m.iter().map(|a| g.constant(a.clone())).collect();
        let u: Vec<Var> = (0..t_len).map(|t| g.concat(&[x[t], m[t], y])).collect();

        let zero = g.zeros(rows, 2 * self.schema.features);
        let u0 = g.concat(&[zero, y]);
        let h0 = g.zeros(rows, self.config.dim_h);
        let mut h = vec![self.h_step(g, u0, h0)];
        for t in 1..t_len {
            let next = self.h_step(g, u[t - 1], h[t - 1]);
            h.push(next);
        }
        let mut gs = vec![None; t_len];
        let mut next = g.zeros(rows, self.config.dim_g);
        for t in (0..t_len).rev() {
            let inp = g.concat(&[u[t], h[t]]);
            let p = self.g_proj.forward(g, inp);
            next = self.g_gru.step(g, p, next);
            gs[t] = Some(next);
        }

        let mut z_prev = g.zeros(rows, self.config.dim_z);
        let (mut kl_z, mut x_nll, mut m_nll): (Option<Var>, Option<Var>, Option<Var>) = (None, None, None);
        let acc = |g: &mut Graph, a: Option<Var>, b: Var| Some(a.map_or(b, |a| g.add(a, b)));
        for t in 0..t_len {
            let q = self.dynamics(g, &self.dyn_q, z_prev, gs[t].unwrap());
            let p = self.dynamics(g, &self.dyn_p, z_prev, h[t]);
            let z = q.reparameterize(g, noise[t].clone());
            let kl = kl_tape(g, q, p);
            kl_z = acc(g, kl_z, kl);
            let (px, pm) = self.decode(g, z, h[t], y);
            let nx = gaussian_nll_tape(g, x[t], px);
            let nm = gaussian_nll_tape(g, m[t], pm);
            x_nll = acc(g, x_nll, nx);
            m_nll = acc(g, m_nll, nm);
            z_prev = z;
        }
        let (kl_z, x_nll, m_nll) = (kl_z.unwrap(), x_nll.unwrap(), m_nll.unwrap());
        let rec = g.add(x_nll, m_nll);
        let kl = g.scale(kl_z, self.config.beta);
        let per_row = g.add(rec, kl);
        let total = g.sum(per_row);
        let loss = g.scale(total, 1.0 / rows as f64);
        let mean = |g: &Graph, v: Var| g.value(v).sum() / rows as f64;
        let terms = ElboTerms {
            loss: g.scalar(loss),
            mask_nll: mean(g, m_nll),
            x_nll: mean(g, x_nll),
            kl_v: 0.0,
            kl_z: mean(g, kl_z),
        };
        if !terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                breakdown: terms.to_string(),
            });
        }
        Ok((loss, terms))
    }

    pub fn objective_with(&self, store: &ParamStore, batch: &SeqBatch, noise: &[Mat]) -> Result<ElboTerms> {
        let mut g = Graph::new(store);
        Ok(self.objective_graph(&mut g, batch, noise)?.1)
    }

    pub fn objective_grad(&self, batch: &SeqBatch, noise: &[Mat]) -> Result<(ElboTerms, Vec<Mat>)> {
        let mut g = Graph::new(&self.store);
        let (loss, terms) = self.objective_graph(&mut g, batch, noise)?;
        Ok((terms, g.backward(loss).into_dense(&self.store)))
    }

    fn draw_noise(&self, rng: &mut Rng, rows: usize) -> Vec<Mat> {
        (0..self.schema.steps)
            .map(|_| Mat::from_shape_fn((rows, self.config.dim_z), |_| StandardNormal.sample(&mut *rng)))
            .collect()
    }

    /// Ancestral sampling from `z_0 = 0`. Each step's sampled channels are
    /// post-processed before being fed to the next forward state.
    /// `noise[k]` holds, per step, `dim_z` draws for `z_t` then `2·D` for
    /// the channels.
    pub fn generate_rows(&self, y: &Mat, noise: &[Vec<Vec<f64>>]) -> Result<(Mat, Mat)> {
        let b = noise.len();
        let (t_len, d) = (self.schema.steps, self.schema.features);
        let dz = self.config.dim_z;
        if y.nrows() != b || y.ncols() != self.schema.dim_y() {
            return Err(Error::shape("srnn generation labels", b * self.schema.dim_y(), y.len()));
        }
        let mut g = Graph::new(&self.store);
        let yv = g.constant(y.clone());
        let zero = g.zeros(b, 2 * d);
        let u0 = g.concat(&[zero, yv]);
        let h0 = g.zeros(b, self.config.dim_h);
        let mut h = self.h_step(&mut g, u0, h0);
        let mut z = g.zeros(b, dz);
        let mut x_flat = Mat::zeros((b, t_len * d));
        let mut m_flat = Mat::zeros((b, t_len * d));
        for t in 0..t_len {
            let eps = |lo: usize, hi: usize| Mat::from_shape_fn((b, hi - lo), |(i, j)| noise[i][t][lo + j]);
            let p = self.dynamics(&mut g, &self.dyn_p, z, h);
            z = p.reparameterize(&mut g, eps(0, dz));
            let (px, pm) = self.decode(&mut g, z, h, yv);
            let xs = px.reparameterize(&mut g, eps(dz, dz + d));
            let ms = pm.reparameterize(&mut g, eps(dz + d, dz + 2 * d));
            let mut xt = g.value(xs).clone();
            let mut mt = g.value(ms).clone();
            for i in 0..b {
                postprocess_channels(
                    xt.row_mut(i).as_slice_mut().unwrap(),
                    mt.row_mut(i).as_slice_mut().unwrap(),
                );
            }
            x_flat.slice_mut(s![.., t * d..(t + 1) * d]).assign(&xt);
            m_flat.slice_mut(s![.., t * d..(t + 1) * d]).assign(&mt);
            if t + 1 < t_len {
                let xc = g.constant(xt);
                let mc = g.constant(mt);
                let u = g.concat(&[xc, mc, yv]);
                h = self.h_step(&mut g, u, h);
            }
        }
        Ok((x_flat, m_flat))
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "schema": self.schema })
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, SRNN_TAG, &self.store, self.config_echo(), seed, epoch)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        if manifest.model != SRNN_TAG {
            return Err(Error::CorruptArchive {
                path: dir.to_path_buf(),
                array: "checkpoint".into(),
                reason: format!("model tag {:?}, expected {SRNN_TAG:?}", manifest.model),
            });
        }
        let config: SrnnConfig = serde_json::from_value(manifest.config["model"].clone())?;
        let schema: DataSchema = serde_json::from_value(manifest.config["schema"].clone())?;
        let mut model = Srnn::new(config, schema, manifest.seed)?;
        load_checkpoint_into(dir, &mut model.store)?;
        Ok(model)
    }
}

impl Trainable for Srnn {
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
        let noise = self.draw_noise(rng, batch.rows());
        if grad {
            let (t, gr) = self.objective_grad(batch, &noise)?;
            Ok((t, Some(gr)))
        } else {
            Ok((self.objective_with(&self.store, batch, &noise)?, None))
        }
    }
}

impl SequenceGenerator for Srnn {
    fn schema(&self) -> &DataSchema {
        &self.schema
    }

    fn generator_id(&self) -> String {
        format!("{SRNN_TAG}:{:016x}", self.store.fingerprint())
    }

    /// Static codes are copied into the records but never reach the model.
    fn sample_block(&self, requests: &[(Vec<u32>, Vec<u8>)], first: usize, seed: u64) -> Result<Vec<PatientRecord>> {
        let (t_len, d, dz) = (self.schema.steps, self.schema.features, self.config.dim_z);
        let noise: Vec<Vec<Vec<f64>>> = (0..requests.len())
            .map(|k| {
                let mut rng = substream(seed, "sample", (first + k) as u64);
                (0..t_len)
                    .map(|_| (0..dz + 2 * d).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            })
            .collect();
        let dy = self.schema.dim_y();
        let y = Mat::from_shape_fn((requests.len(), dy), |(i, j)| requests[i].1[j] as f64);
        let (x, m) = self.generate_rows(&y, &noise)?;
        Ok(requests
            .iter()
            .enumerate()
            .map(|(i, (s, y))| crate::generator::to_record(String::new(), &x, &m, i, &self.schema, s, y))
            .collect())
    }
}

/// Trains on the cohort's training split with the shared minibatch loop.
pub fn srnn_fit(cohort: &Cohort, config: &SrnnConfig, labels: &[String], seed: u64) -> Result<FitOutput<Srnn>> {
    srnn_fit_with(cohort, config, labels, seed, |_, _, _| Ok(()))
}

pub fn srnn_fit_with(
    cohort: &Cohort,
    config: &SrnnConfig,
    labels: &[String],
    seed: u64,
    on_epoch: impl FnMut(&EpochStats, &Srnn, bool) -> Result<()>,
) -> Result<FitOutput<Srnn>> {
    let schema = DataSchema::from_cohort(cohort, labels)?;
    let model = Srnn::new(config.clone(), schema, seed)?;
    let spec = LoopSpec {
        epochs: config.epochs,
        batch: config.batch,
        lr: config.lr,
        lr_decay_epoch: config.lr_decay_epoch,
    };
    train_loop(model, cohort, &spec, seed, on_epoch)
}

/// `count` records all labelled `y`. Static codes are set to category 0;
/// the model never sees them.
pub fn srnn_generate(model: &Srnn, y: &[u8], count: usize, seed: u64) -> Result<Cohort> {
    let plan = CompositionPlan {
        mode: PlanMode::MirrorReal,
        labels: model.schema.labels.clone(),
        cells: vec![PlanCell {
            s: vec![0; model.schema.vocab.variables.len()],
            y: y.to_vec(),
            count,
        }],
        warnings: vec![],
    };
    synthesize_cohort(model, &plan, seed)
}
