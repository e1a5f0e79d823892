//! Linear multi-environment learning with a learned, per-covariate
//! transport cost for Wasserstein-robust training.
//!
//! The building blocks are [`model`] (linear models and losses), [`cost`]
//! (weighted transport cost and its weight set), [`adversary`] (the inner
//! maximization), [`sal`] (the joint θ/w trainer), [`baselines`],
//! [`datagen`], [`eval`], [`dataio`] and [`experiment`].

pub mod adversary;
pub mod baselines;
pub mod config;
pub mod cost;
pub mod datagen;
pub mod dataio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod sal;

pub use adversary::{perturb_batch, surrogate_loss, AdversaryConfig, PerturbationTrace};
pub use cost::{cost_w, empirical_radius, project_weights, CovariateWeights};
pub use dataset::{EnvDataset, EnvMeta};
pub use error::{Result, SalError};
pub use model::{LinearModel, LossKind, Task};
pub use sal::{train_sal, SalHyperParams, SalModel, SalTrainer};
