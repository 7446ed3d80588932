//! The HealthGen conditional dynamical VAE: networks, objective, training
//! and posterior encoding.
//!
//! Parameter names carry the network group they belong to: `theta_m`,
//! `theta_x`, `theta_z`, `theta_h` for the generative side and `phi_v`,
//! `phi_z`, `phi_g` for inference.

mod batch;
mod train;

pub use batch::{chunks, unflatten_row, DataSchema, SeqBatch};
pub use train::{fit, fit_with, write_curve_csv, EpochStats, FitOutput};
pub(crate) use train::{train_loop, LoopSpec, Trainable};

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint_into, read_checkpoint_manifest, save_checkpoint};
use crate::nn::dist::{bernoulli_nll_tape, kl_tape, masked_gaussian_nll_tape};
use crate::nn::{Activation, Dense, GaussVar, Graph, Gru, Mat, Mlp, ParamStore, Var};
use crate::rng::substream;

pub const MODEL_TAG: &str = "healthgen";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HealthGenConfig {
    pub dim_v: usize,
    pub dim_z: usize,
    pub dim_h: usize,
    pub dim_g: usize,
    /// Width of the tanh projections feeding both GRUs.
    pub gru_input: usize,
    pub enc_v_hidden: Vec<usize>,
    pub dyn_hidden: Vec<usize>,
    pub dec_x_hidden: Vec<usize>,
    pub dec_m_hidden: Vec<usize>,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub condition_on_s: bool,
}

impl Default for HealthGenConfig {
    fn default() -> Self {
        HealthGenConfig {
            dim_v: 32,
            dim_z: 32,
            dim_h: 128,
            dim_g: 128,
            gru_input: 64,
            enc_v_hidden: vec![256, 128],
            dyn_hidden: vec![64, 32],
            dec_x_hidden: vec![256],
            dec_m_hidden: vec![128, 256],
            beta: 5.0,
            lr: 5e-4,
            batch: 64,
            epochs: 20,
            condition_on_s: false,
        }
    }
}

impl HealthGenConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.dim_v, self.dim_z, self.dim_h, self.dim_g, self.gru_input, self.batch];
        let hidden = self
            .enc_v_hidden
            .iter()
            .chain(&self.dyn_hidden)
            .chain(&self.dec_x_hidden)
            .chain(&self.dec_m_hidden);
        if dims.iter().chain(hidden).any(|&d| d == 0) {
            return Err(Error::InvalidParam("model dimensions must be positive".into()));
        }
        if !(self.beta >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::InvalidParam(format!("beta {} / lr {}", self.beta, self.lr)));
        }
        Ok(())
    }

    /// Length of the flattened posterior-mean embedding.
    pub fn latent_len(&self, steps: usize) -> usize {
        self.dim_v + steps * self.dim_z
    }
}

fn stack_acts(hidden: usize, last: Activation) -> Vec<Activation> {
    let mut a = vec![Activation::Tanh; hidden];
    a.push(last);
    a
}

fn sizes(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(out);
    s
}

/// Parameter handles of every sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub enc_v: Mlp,
    pub h_proj: Dense,
    pub h_gru: Gru,
    pub g_proj: Dense,
    pub g_gru: Gru,
    pub dyn_q: Mlp,
    pub dyn_p: Mlp,
    pub dec_x: Mlp,
    pub dec_m: Mlp,
}

/// Scalar terms of the objective, each averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ElboTerms {
    pub loss: f64,
    pub mask_nll: f64,
    pub x_nll: f64,
    pub kl_v: f64,
    pub kl_z: f64,
}

impl std::fmt::Display for ElboTerms {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "loss={} mask_nll={} x_nll={} kl_v={} kl_z={}",
            self.loss, self.mask_nll, self.x_nll, self.kl_v, self.kl_z
        )
    }
}

/// Standard-normal draws for one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    /// `[B, dim_v]`
    pub v: Mat,
    /// Per step, `[B, dim_z]`.
    pub z: Vec<Mat>,
}

impl ElboNoise {
    pub fn sample<R: Rng>(rng: &mut R, rows: usize, steps: usize, dim_v: usize, dim_z: usize) -> Self {
        let mut draw = |c: usize| Mat::from_shape_fn((rows, c), |_| StandardNormal.sample(rng));
        let v = draw(dim_v);
        let z = (0..steps).map(|_| draw(dim_z)).collect();
        ElboNoise { v, z }
    }

    pub fn zeros(rows: usize, steps: usize, dim_v: usize, dim_z: usize) -> Self {
        ElboNoise {
            v: Mat::zeros((rows, dim_v)),
            z: vec![Mat::zeros((rows, dim_z)); steps],
        }
    }
}

/// Tape nodes of the objective for one batch.
pub struct ElboGraph {
    pub loss: Var,
    pub terms: ElboTerms,
    /// Posterior over `v`.
    pub q_v: GaussVar,
    pub h: Vec<Var>,
    pub g: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct HealthGen {
    pub config: HealthGenConfig,
    pub schema: DataSchema,
    pub net: Network,
    pub store: ParamStore,
}

impl HealthGen {
    /// Fresh parameters, uniform `±1/√fan_in` weights and zero biases.
    pub fn new(config: HealthGenConfig, schema: DataSchema, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "model-init", 0);
        let mut store = ParamStore::new();
        let (t_len, d) = (schema.steps, schema.features);
        let c = &config;
        let cw = schema.condition_width(c.condition_on_s);
        let enc_v = Mlp::init(
            &mut store,
            "phi_v.enc",
            &sizes(2 * t_len * d + cw, &c.enc_v_hidden, 2 * c.dim_v),
            &stack_acts(c.enc_v_hidden.len(), Activation::Identity),
            &mut rng,
        );
        let h_proj = Dense::init(&mut store, "theta_h.proj", d + c.dim_v, c.gru_input, Activation::Tanh, &mut rng);
        let h_gru = Gru::init(&mut store, "theta_h.gru", c.gru_input, c.dim_h, &mut rng);
        let g_proj = Dense::init(
            &mut store,
            "phi_g.proj",
            d + c.dim_h + c.dim_v,
            c.gru_input,
            Activation::Tanh,
            &mut rng,
        );
        let g_gru = Gru::init(&mut store, "phi_g.gru", c.gru_input, c.dim_g, &mut rng);
        let dyn_acts = stack_acts(c.dyn_hidden.len(), Activation::Identity);
        let dyn_q = Mlp::init(
            &mut store,
            "phi_z.dyn",
            &sizes(c.dim_z + c.dim_g, &c.dyn_hidden, 2 * c.dim_z),
            &dyn_acts,
            &mut rng,
        );
        let dyn_p = Mlp::init(
            &mut store,
            "theta_z.dyn",
            &sizes(c.dim_z + c.dim_h, &c.dyn_hidden, 2 * c.dim_z),
            &dyn_acts,
            &mut rng,
        );
        let dec_x = Mlp::init(
            &mut store,
            "theta_x.dec",
            &sizes(c.dim_z + c.dim_h + c.dim_v + cw, &c.dec_x_hidden, 2 * d),
            &stack_acts(c.dec_x_hidden.len(), Activation::Identity),
            &mut rng,
        );
        let dec_m = Mlp::init(
            &mut store,
            "theta_m.dec",
            &sizes(c.dim_v + cw, &c.dec_m_hidden, t_len * d),
            &stack_acts(c.dec_m_hidden.len(), Activation::Sigmoid),
            &mut rng,
        );
        Ok(HealthGen {
            config,
            schema,
            net: Network {
                enc_v,
                h_proj,
                h_gru,
                g_proj,
                g_gru,
                dyn_q,
                dyn_p,
                dec_x,
                dec_m,
            },
            store,
        })
    }

    pub fn use_s(&self) -> bool {
        self.config.condition_on_s
    }

    pub fn condition_width(&self) -> usize {
        self.schema.condition_width(self.use_s())
    }

    pub fn batch(&self, records: &[&crate::data::PatientRecord], cohort_labels: &[String]) -> Result<SeqBatch> {
        let idx = self.schema.label_indices(cohort_labels)?;
        SeqBatch::from_records(records, &self.schema, self.use_s(), &idx)
    }

    fn cond_parts(&self, g: &mut Graph, cond: &Mat) -> Option<Var> {
        (cond.ncols() > 0).then(|| g.constant(cond.clone()))
    }

    /// Input projection and forward GRU step: `h' = GRU(tanh(W[x, v] + b), h)`.
    pub fn h_step(&self, g: &mut Graph, x: Var, v: Var, h: Var) -> Var {
        let inp = g.concat(&[x, v]);
        let p = self.net.h_proj.forward(g, inp);
        self.net.h_gru.step(g, p, h)
    }

    /// `h_1` from a zero input and zero state; `h_t` consumes `x_{t−1}`.
    pub fn forward_states(&self, g: &mut Graph, x: &[Var], v: Var, rows: usize) -> Vec<Var> {
        let d = self.schema.features;
        let zero_x = g.zeros(rows, d);
        let h0 = g.zeros(rows, self.config.dim_h);
        let mut h = vec![self.h_step(g, zero_x, v, h0)];
        for t in 1..x.len() {
            let prev = h[t - 1];
            let next = self.h_step(g, x[t - 1], v, prev);
            h.push(next);
        }
        h
    }

    /// Backward recurrence from `g_T` (zero successor) down to `g_1`.
    pub fn backward_states(&self, g: &mut Graph, x: &[Var], h: &[Var], v: Var, rows: usize) -> Vec<Var> {
        let t_len = x.len();
        let mut out = vec![None; t_len];
        let mut next = g.zeros(rows, self.config.dim_g);
        for t in (0..t_len).rev() {
            let inp = g.concat(&[x[t], h[t], v]);
            let p = self.net.g_proj.forward(g, inp);
            next = self.net.g_gru.step(g, p, next);
            out[t] = Some(next);
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    pub fn dynamics_q(&self, g: &mut Graph, z_prev: Var, g_t: Var) -> GaussVar {
        let inp = g.concat(&[z_prev, g_t]);
        let out = self.net.dyn_q.forward(g, inp);
        GaussVar::from_output(g, out, self.config.dim_z)
    }

    pub fn dynamics_p(&self, g: &mut Graph, z_prev: Var, h_t: Var) -> GaussVar {
        let inp = g.concat(&[z_prev, h_t]);
        let out = self.net.dyn_p.forward(g, inp);
        GaussVar::from_output(g, out, self.config.dim_z)
    }

    pub fn decode_x(&self, g: &mut Graph, z: Var, h: Var, v: Var, cond: Option<Var>) -> GaussVar {
        let mut parts = vec![z, h, v];
        parts.extend(cond);
        let inp = g.concat(&parts);
        let out = self.net.dec_x.forward(g, inp);
        GaussVar::from_output(g, out, self.schema.features)
    }

    /// Observation probabilities `[B, T·D]` from `v` and the conditioning
    /// vector only.
    pub fn decode_m(&self, g: &mut Graph, v: Var, cond: Option<Var>) -> Var {
        let mut parts = vec![v];
        parts.extend(cond);
        let inp = g.concat(&parts);
        self.net.dec_m.forward(g, inp)
    }

    /// Posterior over `v` from `[x_flat, m_flat, cond]`.
    pub fn infer_v(&self, g: &mut Graph, batch: &SeqBatch) -> Result<GaussVar> {
        let expected = self.net.enc_v.in_dim();
        let got = batch.x_flat.ncols() + batch.m_flat.ncols() + batch.cond.ncols();
        if got != expected {
            return Err(Error::shape("enc_v input", expected, got));
        }
        let x = g.constant(batch.x_flat.clone());
        let m = g.constant(batch.m_flat.clone());
        let mut parts = vec![x, m];
        parts.extend(self.cond_parts(g, &batch.cond));
        let inp = g.concat(&parts);
        let out = self.net.enc_v.forward(g, inp);
        Ok(GaussVar::from_output(g, out, self.config.dim_v))
    }

    /// Builds the negative ELBO on the tape with the given noise and the
    /// parameters in `store` (which may differ from `self.store`).
    pub fn elbo_graph(&self, g: &mut Graph, batch: &SeqBatch, noise: &ElboNoise) -> Result<ElboGraph> {
        let rows = batch.rows();
        let t_len = self.schema.steps;
        if batch.steps() != t_len || noise.z.len() != t_len || noise.v.nrows() != rows {
            return Err(Error::shape("elbo batch/noise steps", t_len, batch.steps()));
        }
        let q_v = self.infer_v(g, batch)?;
        let v = q_v.reparameterize(g, noise.v.clone());
        let prior = GaussVar::standard(g, rows, self.config.dim_v);
        let kl_v = kl_tape(g, q_v, prior);

        let x: Vec<Var> = batch.x.iter().map(|a| g.constant(a.clone())).collect();
        let m: Vec<Var> = batch.m.iter().map(|a| g.constant(a.clone())).collect();
        let cond = self.cond_parts(g, &batch.cond);
        let h = self.forward_states(g, &x, v, rows);
        let gs = self.backward_states(g, &x, &h, v, rows);

        let mut z_prev = g.zeros(rows, self.config.dim_z);
        let mut kl_z: Option<Var> = None;
        let mut x_nll: Option<Var> = None;
        for t in 0..t_len {
            let q = self.dynamics_q(g, z_prev, gs[t]);
            let p = self.dynamics_p(g, z_prev, h[t]);
            let z = q.reparameterize(g, noise.z[t].clone());
            let kl = kl_tape(g, q, p);
            kl_z = Some(match kl_z {
                Some(acc) => g.add(acc, kl),
                None => kl,
            });
            let px = self.decode_x(g, z, h[t], v, cond);
            let nll = masked_gaussian_nll_tape(g, x[t], m[t], px);
            x_nll = Some(match x_nll {
                Some(acc) => g.add(acc, nll),
                None => nll,
            });
            z_prev = z;
        }
        let (kl_z, x_nll) = (kl_z.unwrap(), x_nll.unwrap());

        let probs = self.decode_m(g, v, cond);
        let m_flat = g.constant(batch.m_flat.clone());
        let mask_nll = bernoulli_nll_tape(g, m_flat, probs);

        let kl = g.add(kl_v, kl_z);
        let kl = g.scale(kl, self.config.beta);
        let rec = g.add(mask_nll, x_nll);
        let per_row = g.add(rec, kl);
        let total = g.sum(per_row);
        let loss = g.scale(total, 1.0 / rows as f64);

        let mean = |g: &Graph, v: Var| g.value(v).sum() / rows as f64;
        let terms = ElboTerms {
            loss: g.scalar(loss),
            mask_nll: mean(g, mask_nll),
            x_nll: mean(g, x_nll),
            kl_v: mean(g, kl_v),
            kl_z: mean(g, kl_z),
        };
        if !terms.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                breakdown: terms.to_string(),
            });
        }
        Ok(ElboGraph {
            loss,
            terms,
            q_v,
            h,
            g: gs,
        })
    }

    /// Objective value under an arbitrary parameter store.
    pub fn elbo_with(&self, store: &ParamStore, batch: &SeqBatch, noise: &ElboNoise) -> Result<ElboTerms> {
        let mut g = Graph::new(store);
        Ok(self.elbo_graph(&mut g, batch, noise)?.terms)
    }

    pub fn elbo(&self, batch: &SeqBatch, noise: &ElboNoise) -> Result<ElboTerms> {
        self.elbo_with(&self.store, batch, noise)
    }

    /// Objective and its gradient, aligned with the parameter store.
    pub fn elbo_grad_with(
        &self,
        store: &ParamStore,
        batch: &SeqBatch,
        noise: &ElboNoise,
    ) -> Result<(ElboTerms, Vec<Mat>)> {
        let mut g = Graph::new(store);
        let eg = self.elbo_graph(&mut g, batch, noise)?;
        let grads = g.backward(eg.loss).into_dense(store);
        Ok((eg.terms, grads))
    }

    pub fn elbo_grad(&self, batch: &SeqBatch, noise: &ElboNoise) -> Result<(ElboTerms, Vec<Mat>)> {
        self.elbo_grad_with(&self.store, batch, noise)
    }

    /// Flattened posterior means `[v; z_1; …; z_T]`, one row per record.
    /// The z chain is run on means, starting from `z_0 = 0`.
    pub fn encode_mean(&self, batch: &SeqBatch) -> Result<Array2<f64>> {
        let rows = batch.rows();
        let mut g = Graph::new(&self.store);
        let q_v = self.infer_v(&mut g, batch)?;
        let v = q_v.mu;
        let x: Vec<Var> = batch.x.iter().map(|a| g.constant(a.clone())).collect();
        let h = self.forward_states(&mut g, &x, v, rows);
        let gs = self.backward_states(&mut g, &x, &h, v, rows);
        let mut parts = vec![v];
        let mut z_prev = g.zeros(rows, self.config.dim_z);
        for g_t in gs {
            let q = self.dynamics_q(&mut g, z_prev, g_t);
            parts.push(q.mu);
            z_prev = q.mu;
        }
        let flat = g.concat(&parts);
        Ok(g.value(flat).clone())
    }

    /// Parameter count per network group.
    pub fn group_sizes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for id in self.store.ids() {
            let group = self.store.name(id).split('.').next().unwrap_or("").to_string();
            let n = self.store.value(id).len();
            match out.iter_mut().find(|(g, _)| *g == group) {
                Some(e) => e.1 += n,
                None => out.push((group, n)),
            }
        }
        out
    }

    fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({ "model": self.config, "schema": self.schema })
    }

    pub fn save(&self, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
        save_checkpoint(dir, MODEL_TAG, &self.store, self.config_echo(), seed, epoch)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        if manifest.model != MODEL_TAG {
            return Err(Error::CorruptArchive {
                path: dir.to_path_buf(),
                array: "checkpoint".into(),
                reason: format!("model tag {:?}, expected {MODEL_TAG:?}", manifest.model),
            });
        }
        let config: HealthGenConfig = serde_json::from_value(manifest.config["model"].clone())?;
        let schema: DataSchema = serde_json::from_value(manifest.config["schema"].clone())?;
        let mut model = HealthGen::new(config, schema, manifest.seed)?;
        load_checkpoint_into(dir, &mut model.store)?;
        Ok(model)
    }
}

/// Row `i` of a tape value as a vector.
pub fn row_of(g: &Graph, v: Var, i: usize) -> Array1<f64> {
    g.value(v).row(i).to_owned()
}
