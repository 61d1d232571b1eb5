//! Gaussian-process regression primitives.

mod data;
mod fit;
mod kernel;
mod laplace;
mod model;
mod parse;

pub use data::{Dataset, Points};
pub use fit::{fit_mmle, FitOptions, MmleFit, RestartSummary};
pub use kernel::{KernelExpr, NodePath, Param};
pub use laplace::{
    floor_and_invert, laplace_from_log_density, laplace_hyper_posterior, sample_hyperparameters,
    sample_log_space, HyperPosterior,
};
pub use model::{
    log_marginal_likelihood, lml_with_log_grad, standard_normal_quantile, FittedGp, FittedGpRecord,
    MeanFunction, Posterior,
};
pub(crate) use model::{joint_adjoint, joint_posterior, JointPosterior};
pub use parse::parse_kernel;
