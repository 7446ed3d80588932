//! Diagonal Gaussian and Bernoulli terms used by the variational objectives.

use std::f64::consts::PI;

use ndarray::{Array1, ArrayView1};

use super::tape::{Graph, Mat, Var};

/// Log-variance outputs are clamped to this range.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
/// Bernoulli probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl GaussianParams {
    /// Builds the parameters, clamping `logvar` into its allowed range.
    pub fn new(mu: Array1<f64>, logvar: Array1<f64>) -> Self {
        assert_eq!(mu.len(), logvar.len());
        GaussianParams {
            mu,
            logvar: logvar.mapv(|l| l.clamp(LOGVAR_MIN, LOGVAR_MAX)),
        }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams {
            mu: Array1::zeros(dim),
            logvar: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `mu + exp(logvar / 2) ⊙ noise`
pub fn reparameterize(gauss: &GaussianParams, noise: ArrayView1<f64>) -> Array1<f64> {
    &gauss.mu + &(gauss.logvar.mapv(|l| (0.5 * l).exp()) * noise)
}

/// `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_diag_gauss(q: &GaussianParams, p: &GaussianParams) -> f64 {
    assert_eq!(q.dim(), p.dim(), "kl dims");
    q.mu.iter()
        .zip(q.logvar.iter())
        .zip(p.mu.iter().zip(p.logvar.iter()))
        .map(|((&mq, &lq), (&mp, &lp))| {
            0.5 * ((lq - lp).exp() + (mp - mq).powi(2) / lp.exp() - 1.0 + lp - lq)
        })
        .sum()
}

/// Negative log-density of `x` under `gauss`, counting only the
/// coordinates where `mask` is 1. Masked coordinates contribute exactly zero.
pub fn masked_gaussian_nll(x: ArrayView1<f64>, mask: ArrayView1<f64>, gauss: &GaussianParams) -> f64 {
    let mut total = 0.0;
    for d in 0..x.len() {
        if mask[d] != 0.0 {
            let lv = gauss.logvar[d];
            total += mask[d] * 0.5 * (LN_2PI + lv + (x[d] - gauss.mu[d]).powi(2) / lv.exp());
        }
    }
    total
}

/// `−Σ [m log μ + (1 − m) log(1 − μ)]` with `μ` clamped.
pub fn bernoulli_nll(mask: ArrayView1<f64>, probs: ArrayView1<f64>) -> f64 {
    mask.iter()
        .zip(probs.iter())
        .map(|(&m, &p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        })
        .sum()
}

/// Tape-side diagonal Gaussian, each field `[batch, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussVar {
    pub mu: Var,
    pub logvar: Var,
}

impl GaussVar {
    /// Splits a `[batch, 2·dim]` network output into mean and clamped
    /// log-variance halves.
    pub fn from_output(g: &mut Graph, out: Var, dim: usize) -> Self {
        let mu = g.slice(out, 0, dim);
        let lv = g.slice(out, dim, 2 * dim);
        let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
        GaussVar { mu, logvar }
    }

    pub fn standard(g: &mut Graph, rows: usize, dim: usize) -> Self {
        let mu = g.zeros(rows, dim);
        let logvar = g.zeros(rows, dim);
        GaussVar { mu, logvar }
    }

    pub fn reparameterize(&self, g: &mut Graph, noise: Mat) -> Var {
        let half = g.scale(self.logvar, 0.5);
        let sd = g.exp(half);
        let eps = g.constant(noise);
        let scaled = g.mul(sd, eps);
        g.add(self.mu, scaled)
    }

    /// Row `i` as owned parameters.
    pub fn row(&self, g: &Graph, i: usize) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).row(i).to_owned(),
            logvar: g.value(self.logvar).row(i).to_owned(),
        }
    }
}

/// Per-row `KL(q ‖ p)`, shape `[batch, 1]`.
pub fn kl_tape(g: &mut Graph, q: GaussVar, p: GaussVar) -> Var {
    let dl = g.sub(q.logvar, p.logvar);
    let ratio = g.exp(dl);
    let dm = g.sub(p.mu, q.mu);
    let dm2 = g.square(dm);
    let neg_lp = g.scale(p.logvar, -1.0);
    let inv_vp = g.exp(neg_lp);
    let quad = g.mul(dm2, inv_vp);
    let s = g.add(ratio, quad);
    let s = g.sub(s, dl);
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    g.row_sum(s)
}

/// Per-row masked Gaussian negative log-likelihood, shape `[batch, 1]`.
/// `x` and `mask` are data constants of shape `[batch, dim]`.
pub fn masked_gaussian_nll_tape(g: &mut Graph, x: Var, mask: Var, gauss: GaussVar) -> Var {
    let diff = g.sub(x, gauss.mu);
    let d2 = g.square(diff);
    let neg_lv = g.scale(gauss.logvar, -1.0);
    let inv_v = g.exp(neg_lv);
    let quad = g.mul(d2, inv_v);
    let s = g.add(quad, gauss.logvar);
    let s = g.add_scalar(s, LN_2PI);
    let s = g.scale(s, 0.5);
    let s = g.mul(s, mask);
    g.row_sum(s)
}

/// Per-row unmasked Gaussian negative log-likelihood.
pub fn gaussian_nll_tape(g: &mut Graph, x: Var, gauss: GaussVar) -> Var {
    let diff = g.sub(x, gauss.mu);
    let d2 = g.square(diff);
    let neg_lv = g.scale(gauss.logvar, -1.0);
    let inv_v = g.exp(neg_lv);
    let quad = g.mul(d2, inv_v);
    let s = g.add(quad, gauss.logvar);
    let s = g.add_scalar(s, LN_2PI);
    let s = g.scale(s, 0.5);
    g.row_sum(s)
}

/// Per-row Bernoulli negative log-likelihood of `mask` under `probs`
/// (clamped), shape `[batch, 1]`.
pub fn bernoulli_nll_tape(g: &mut Graph, mask: Var, probs: Var) -> Var {
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let lp = g.ln(p);
    let q = g.one_minus(p);
    let lq = g.ln(q);
    let a = g.mul(mask, lp);
    let not_m = g.one_minus(mask);
    let b = g.mul(not_m, lq);
    let s = g.add(a, b);
    let s = g.scale(s, -1.0);
    g.row_sum(s)
}

/// Log-density of a univariate normal, used by tests and oracles.
pub fn normal_logpdf(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mu).powi(2) / var)
}
