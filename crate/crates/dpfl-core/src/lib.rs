//! Deterministic federated-learning simulator with user-level and
//! instance-level differential privacy, a Rényi-DP accountant, a
//! poisoning-attack harness, and a certification engine that turns
//! Monte-Carlo ensembles into certified-prediction and certified-attack-cost
//! guarantees.
//!
//! Modules:
//! - [`datakit`]: IDX ingestion, synthetic blobs, binary filtering,
//!   user partitioning.
//! - [`modelkit`]: logistic-regression and small-MLP classifiers over flat
//!   parameter vectors, with analytic and per-example gradients.
//! - [`attackkit`]: backdoor / distributed-backdoor / label-flip poisoning
//!   and model-replacement scaling.
//! - [`privkit`]: clipping, Gaussian noising, RDP accounting, group DP,
//!   parallel composition.
//! - [`fedsim`]: the federated training algorithms with pluggable clipping
//!   strategies and attack injection.
//! - [`certkit`]: certified predictions, attack-cost bounds,
//!   minimum-attacker bounds, Hoeffding calibration.
//! - [`harness`]: seeded Monte-Carlo ensembles, experiment plans, sweeps,
//!   persistence, and plot-ready tables.

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attackkit;
pub mod certkit;
pub mod datakit;
pub mod error;
pub mod fedsim;
pub mod harness;
pub mod modelkit;
pub mod privkit;
pub mod seed;

pub use error::{DpflError, Result};
