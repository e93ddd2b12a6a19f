//! Federated sparse optimization over dictionaries.
//!
//! The crate simulates a federation of clients that jointly recover a signal
//! constrained to be a combination of few dictionary atoms. The main solver
//! is FedGradMP: clients run a few stochastic gradient matching pursuit
//! iterations locally, the server averages and re-thresholds. Variants cover
//! inexact local solves, partial client participation, and an l2 ball
//! constraint; FedAvg and FedIterHT serve as baselines. The `theory` module
//! evaluates the convergence constants (contraction factor and residual) the
//! analysis predicts for a given federation, and `synthdata` generates the
//! heterogeneous client datasets used in the experiments.
//!
//! With the default `parallel` feature, clients within a round run on a
//! rayon pool; results are bitwise identical to sequential execution because
//! every random draw comes from a per-(round, client) stream and reductions
//! happen in client order.

// Negated comparisons like `!(x > 0.0)` are deliberate throughout: they
// reject NaN (which passes `x <= 0.0`) without a separate is_nan check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod combin;
pub mod dictionary;
pub mod error;
pub mod federation;
pub mod local_engine;
pub mod matio;
pub mod objectives;
pub mod rng;
pub mod sparse_ops;
pub mod synthdata;
pub mod theory;

pub use dictionary::{Dictionary, DictionaryKind};
pub use error::{Error, Result};
pub use federation::{
    run_federation, run_federation_with, Algorithm, Execution, FederationConfig, RoundRecord,
    RunResult,
};
pub use local_engine::{CarrySupport, LocalConfig, LocalTrace, Subproblem};
pub use objectives::{ClientDataset, CurvatureMode, LossKind, Objective, RestrictedCurvature};
pub use sparse_ops::{ProjectionResult, SparseEstimate};
pub use synthdata::SynthSpec;
pub use theory::{
    compute_client_constants, corollary_objective_bound, optimize_theta, rate_prediction,
    write_rates_json, ClientConstants, RatePrediction, Variant,
};
