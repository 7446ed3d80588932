//! Dense layers, multilayer perceptrons and GRU cells.
//!
//! Each network comes in two forms: an owned parameter struct
//! ([`DenseParams`], [`GruParams`]) with single-vector forward functions, and
//! a handle ([`Dense`], [`Mlp`], [`Gru`]) whose parameters live in a
//! [`ParamStore`] and which builds batched operations on a [`Graph`].

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{sigmoid, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseParams {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// `act(W·u + b)`
pub fn dense_forward(params: &DenseParams, u: ArrayView1<f64>) -> Result<Array1<f64>> {
    if u.len() != params.in_dim() {
        return Err(Error::shape("dense input", params.in_dim(), u.len()));
    }
    if params.bias.len() != params.out_dim() {
        return Err(Error::shape("dense bias", params.out_dim(), params.bias.len()));
    }
    let act = params.activation;
    Ok((params.weight.dot(&u) + &params.bias).mapv(|x| act.apply(x)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_r: Array2<f64>,
    pub w_u: Array2<f64>,
    pub w_n: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_u: Array2<f64>,
    pub u_n: Array2<f64>,
    pub b_r: Array1<f64>,
    pub b_u: Array1<f64>,
    pub b_n: Array1<f64>,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((hidden, input));
        let u = || Array2::zeros((hidden, hidden));
        let b = || Array1::zeros(hidden);
        GruParams {
            w_r: w(),
            w_u: w(),
            w_n: w(),
            u_r: u(),
            u_u: u(),
            u_n: u(),
            b_r: b(),
            b_u: b(),
            b_n: b(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_r.nrows()
    }
}

/// One GRU update. The reset gate scales the recurrent term of the
/// candidate state only:
///
/// ```text
/// r = σ(W_r u + U_r h + b_r)
/// z = σ(W_u u + U_u h + b_u)
/// n = tanh(W_n u + r ⊙ (U_n h) + b_n)
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
pub fn gru_step(
    params: &GruParams,
    u: ArrayView1<f64>,
    h_prev: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if u.len() != params.input_dim() {
        return Err(Error::shape("gru input", params.input_dim(), u.len()));
    }
    if h_prev.len() != params.hidden_dim() {
        return Err(Error::shape("gru state", params.hidden_dim(), h_prev.len()));
    }
    let r = (params.w_r.dot(&u) + params.u_r.dot(&h_prev) + &params.b_r).mapv(sigmoid);
    let z = (params.w_u.dot(&u) + params.u_u.dot(&h_prev) + &params.b_u).mapv(sigmoid);
    let n = (params.w_n.dot(&u) + &r * &params.u_n.dot(&h_prev) + &params.b_n).mapv(f64::tanh);
    Ok((1.0 - &z) * &n + &z * &h_prev)
}

/// Store-backed dense layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert_weight(format!("{name}.weight"), out_dim, in_dim, rng);
        let bias = store.insert_bias(format!("{name}.bias"), out_dim);
        Dense {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let a = g.matmul_t(x, w);
        let a = g.add_bias(a, b);
        match self.activation {
            Activation::Tanh => g.tanh(a),
            Activation::Sigmoid => g.sigmoid(a),
            Activation::Identity => a,
        }
    }

    /// Pre-activation output, used where a caller wants the logits.
    pub fn forward_linear(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let a = g.matmul_t(x, w);
        g.add_bias(a, b)
    }

    pub fn to_params(&self, store: &ParamStore) -> DenseParams {
        DenseParams {
            weight: store.value(self.weight).clone(),
            bias: store.value(self.bias).row(0).to_owned(),
            activation: self.activation,
        }
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes` lists every width from input to output; `activations` has one
    /// entry per layer.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Self {
        assert_eq!(sizes.len(), activations.len() + 1);
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &act)| Dense::init(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], act, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.layers.iter().fold(x, |h, layer| layer.forward(g, h))
    }

    /// Forward pass that skips the final activation.
    pub fn forward_logits(&self, g: &mut Graph, x: Var) -> Var {
        let (last, rest) = self.layers.split_last().unwrap();
        let h = rest.iter().fold(x, |h, layer| layer.forward(g, h));
        last.forward_linear(g, h)
    }

    /// Widths from input to output, e.g. `[193, 256, 208]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.in_dim()];
        v.extend(self.layers.iter().map(|l| l.out_dim));
        v
    }
}

/// Store-backed GRU cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gru {
    pub w_r: ParamId,
    pub w_u: ParamId,
    pub w_n: ParamId,
    pub u_r: ParamId,
    pub u_u: ParamId,
    pub u_n: ParamId,
    pub b_r: ParamId,
    pub b_u: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.insert_weight(format!("{name}.w_{gate}"), hidden_dim, input_dim, rng)
        };
        let w_r = w("r", store, rng);
        let w_u = w("u", store, rng);
        let w_n = w("n", store, rng);
        let u = |gate: &str, store: &mut ParamStore, rng: &mut R| {
            store.insert_weight(format!("{name}.u_{gate}"), hidden_dim, hidden_dim, rng)
        };
        let u_r = u("r", store, rng);
        let u_u = u("u", store, rng);
        let u_n = u("n", store, rng);
        Gru {
            w_r,
            w_u,
            w_n,
            u_r,
            u_u,
            u_n,
            b_r: store.insert_bias(format!("{name}.b_r"), hidden_dim),
            b_u: store.insert_bias(format!("{name}.b_u"), hidden_dim),
            b_n: store.insert_bias(format!("{name}.b_n"), hidden_dim),
            input_dim,
            hidden_dim,
        }
    }

    fn gate(&self, g: &mut Graph, w: ParamId, u_mat: ParamId, b: ParamId, x: Var, h: Var) -> Var {
        let w = g.param(w);
        let u_mat = g.param(u_mat);
        let b = g.param(b);
        let a = g.matmul_t(x, w);
        let r = g.matmul_t(h, u_mat);
        let s = g.add(a, r);
        g.add_bias(s, b)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let r = self.gate(g, self.w_r, self.u_r, self.b_r, x, h);
        let r = g.sigmoid(r);
        let z = self.gate(g, self.w_u, self.u_u, self.b_u, x, h);
        let z = g.sigmoid(z);

        let w_n = g.param(self.w_n);
        let u_n = g.param(self.u_n);
        let b_n = g.param(self.b_n);
        let xn = g.matmul_t(x, w_n);
        let hn = g.matmul_t(h, u_n);
        let hn = g.mul(r, hn);
        let n = g.add(xn, hn);
        let n = g.add_bias(n, b_n);
        let n = g.tanh(n);

        // (1 − z) ⊙ n + z ⊙ h  =  n + z ⊙ (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }

    pub fn to_params(&self, store: &ParamStore) -> GruParams {
        let m = |id| store.value(id).clone();
        let v = |id| store.value(id).row(0).to_owned();
        GruParams {
            w_r: m(self.w_r),
            w_u: m(self.w_u),
            w_n: m(self.w_n),
            u_r: m(self.u_r),
            u_u: m(self.u_u),
            u_n: m(self.u_n),
            b_r: v(self.b_r),
            b_u: v(self.b_u),
            b_n: v(self.b_n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::{array, Array1};

    fn naive_matvec(w: &Array2<f64>, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.nrows()];
        for (i, o) in out.iter_mut().enumerate() {
            for (j, &uj) in u.iter().enumerate() {
                *o += w[[i, j]] * uj;
            }
        }
        out
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn dense_zero_and_identity() {
        let p = DenseParams {
            weight: Array2::zeros((3, 4)),
            bias: Array1::zeros(3),
            activation: Activation::Tanh,
        };
        let v = dense_forward(&p, array![1.0, -2.0, 3.0, 0.5].view()).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));

        let p = DenseParams {
            weight: Array2::eye(3),
            bias: Array1::zeros(3),
            activation: Activation::Identity,
        };
        let u = array![1.5, -2.0, 0.25];
        assert_eq!(dense_forward(&p, u.view()).unwrap(), u);
    }

    #[test]
    fn dense_matches_naive_matmul() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3);
        let layer = Dense::init(&mut store, "l", 7, 5, Activation::Sigmoid, &mut rng);
        store.value_mut(layer.bias).mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let p = layer.to_params(&store);
        let u: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = dense_forward(&p, ArrayView1::from(&u)).unwrap();
        let want: Vec<f64> = naive_matvec(&p.weight, &u)
            .iter()
            .zip(p.bias.iter())
            .map(|(a, b)| sig(a + b))
            .collect();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        // tape path agrees too
        let mut g = Graph::new(&store);
        let x = g.constant(Array2::from_shape_vec((1, 7), u.clone()).unwrap());
        let y = layer.forward(&mut g, x);
        for (a, b) in g.value(y).iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_rejects_wrong_input() {
        let p = DenseParams {
            weight: Array2::zeros((2, 3)),
            bias: Array1::zeros(2),
            activation: Activation::Identity,
        };
        assert!(matches!(
            dense_forward(&p, array![1.0].view()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gru_zero_params_stay_zero() {
        let p = GruParams::zeros(3, 4);
        let h = gru_step(&p, array![1.0, 2.0, 3.0].view(), Array1::zeros(4).view()).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let mut store = ParamStore::new();
        let mut rng = seeded(11);
        let gru = Gru::init(&mut store, "g", 3, 4, &mut rng);
        let mut p = gru.to_params(&store);
        p.b_u.fill(50.0);
        let h_prev = array![0.3, -0.7, 0.1, 0.9];
        let h = gru_step(&p, array![1.0, -1.0, 0.5].view(), h_prev.view()).unwrap();
        for (a, b) in h.iter().zip(h_prev.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    /// Scalar re-implementation, one hidden unit at a time.
    fn gru_scalar(p: &GruParams, u: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = h.len();
        let dot = |m: &Array2<f64>, v: &[f64], i: usize| -> f64 {
            (0..v.len()).map(|j| m[[i, j]] * v[j]).sum()
        };
        (0..hd)
            .map(|i| {
                let r = sig(dot(&p.w_r, u, i) + dot(&p.u_r, h, i) + p.b_r[i]);
                let z = sig(dot(&p.w_u, u, i) + dot(&p.u_u, h, i) + p.b_u[i]);
                let n = (dot(&p.w_n, u, i) + r * dot(&p.u_n, h, i) + p.b_n[i]).tanh();
                (1.0 - z) * n + z * h[i]
            })
            .collect()
    }

    #[test]
    fn gru_matches_scalar_oracle_and_tape() {
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let gru = Gru::init(&mut store, "g", 3, 4, &mut rng);
        for id in [gru.b_r, gru.b_u, gru.b_n] {
            store.value_mut(id).mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let p = gru.to_params(&store);
        let u = vec![0.2, -0.4, 1.1];
        let h = vec![0.5, -0.2, 0.0, 0.8];
        let got = gru_step(&p, ArrayView1::from(&u), ArrayView1::from(&h)).unwrap();
        let want = gru_scalar(&p, &u, &h);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Array2::from_shape_vec((1, 3), u).unwrap());
        let hv = g.constant(Array2::from_shape_vec((1, 4), h).unwrap());
        let out = gru.step(&mut g, x, hv);
        for (a, b) in g.value(out).iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_sizes_round_trip() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let mlp = Mlp::init(
            &mut store,
            "dec_x",
            &[193, 256, 208],
            &[Activation::Tanh, Activation::Identity],
            &mut rng,
        );
        assert_eq!(mlp.sizes(), vec![193, 256, 208]);
        assert_eq!(store.len(), 4);
    }

    proptest::proptest! {
        #[test]
        fn gru_output_stays_in_open_unit_box(
            seed in 0u64..1000,
            h in proptest::collection::vec(-0.999f64..0.999, 4),
            u in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let mut store = ParamStore::new();
            let mut rng = seeded(seed);
            let gru = Gru::init(&mut store, "g", 3, 4, &mut rng);
            let p = gru.to_params(&store);
            let out = gru_step(&p, ArrayView1::from(&u), ArrayView1::from(&h)).unwrap();
            for x in out.iter() {
                proptest::prop_assert!(x.abs() < 1.0);
            }
        }
    }
}
