//! Meta-learning of Gaussian-process priors.
//!
//! The mean function, the kernel, or both are parameterized by small
//! feed-forward networks and fitted by stochastic gradient descent on the
//! summed negative log marginal likelihood of a set of meta-tasks. The frozen
//! prior is then conditioned on the few context points of a target task.
//!
//! The numeric core ([`linalg`], [`nn`], [`gp`], [`metatrain`], [`fpca`]) is
//! generic over the scalar type; the aliases at the crate root fix it to `f64`,
//! which is what every experiment uses.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fpca;
pub mod gp;
pub mod linalg;
pub mod metatrain;
pub mod nn;
pub mod scalar;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Cholesky = linalg::CholeskyFactor<f64>;
pub type Params = nn::ParamVector<f64>;
pub type Prior = gp::GpPrior<f64>;
pub type Mean = gp::MeanFunction<f64>;
pub type KernelFn = gp::Kernel<f64>;
pub type Posterior = gp::GaussianPosterior<f64>;
pub type Task = tasks::RegressionTask<f64>;
pub type Fpca = fpca::FpcaModel<f64>;
