//! Neural building blocks with exactly specified math.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use dist::{
    bernoulli_nll, kl_diag_gauss, masked_gaussian_nll, reparameterize, GaussVar, GaussianParams,
};
pub use gradcheck::{finite_diff_check, FdConfig, FdReport};
pub use layers::{dense_forward, gru_step, Activation, Dense, DenseParams, Gru, GruParams, Mlp};
pub use optim::AdamState;
pub use params::{ParamId, ParamStore};
pub use tape::{Graph, Gradients, Mat, Var};
