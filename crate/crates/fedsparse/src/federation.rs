//! The federated optimization loop: cohorts, local updates, aggregation.
//!
//! One round of FedGradMP: the server broadcasts the global model, each
//! participating client runs its local StoGradMP iterations, the server
//! takes the weighted average of the returned sparse iterates and
//! thresholds it back to `tau` atoms (factor `eta3`). FedAvg (local SGD,
//! dense averaging) and FedIterHT (local hard-thresholded SGD, thresholded
//! averaging) are provided as baselines over the same data and metrics.
//!
//! Determinism: every random draw comes from a stream keyed by (seed,
//! purpose, round, client), and aggregation always reduces in ascending
//! client order — so the parallel executor is bitwise identical to the
//! sequential one, and any run is reproducible from its config.

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::local_engine::{local_stogradmp, LocalConfig};
use crate::matio::fmt17;
use crate::objectives::Objective;
use crate::rng::{self, tags};
use crate::sparse_ops::{approx_project, support_f1, SparseEstimate};
use nalgebra::DVector;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedGradMp,
    FedAvg,
    FedIterHt,
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    /// Number of federated rounds to run.
    pub rounds: usize,
    /// Clients sampled per round; None means full participation.
    pub cohort_size: Option<usize>,
    /// Aggregation weights for full participation (None = uniform). Sampled
    /// cohorts always aggregate with weight 1/L per participant.
    pub weights: Option<Vec<f64>>,
    /// Approximation factor of the server thresholding step (>= 1).
    pub eta3: f64,
    /// Per-client iteration settings (tau, K, eta1/eta2, subproblem, ball).
    pub local: LocalConfig,
    /// Step size for the FedAvg / FedIterHT baselines; ignored by FedGradMP.
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            algorithm: Algorithm::FedGradMp,
            rounds: 10,
            cohort_size: None,
            weights: None,
            eta3: 1.0,
            local: LocalConfig::default(),
            learning_rate: None,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        if num_clients == 0 {
            return Err(Error::InvalidArgument("federation has no clients".into()));
        }
        self.local.validate()?;
        if !(self.eta3 >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eta3 must be >= 1, got {}",
                self.eta3
            )));
        }
        if let Some(l) = self.cohort_size {
            if l == 0 || l > num_clients {
                return Err(Error::InvalidArgument(format!(
                    "cohort_size must be in 1..={num_clients}, got {l}"
                )));
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != num_clients {
                return Err(Error::Dimension {
                    context: "aggregation weights vs clients",
                    expected: num_clients,
                    found: w.len(),
                });
            }
            if w.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidArgument(
                    "aggregation weights must be nonnegative and finite".into(),
                ));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!(
                    "aggregation weights must sum to 1, got {sum}"
                )));
            }
        }
        match self.algorithm {
            Algorithm::FedGradMp => {}
            Algorithm::FedAvg | Algorithm::FedIterHt => match self.learning_rate {
                Some(g) if g > 0.0 && g.is_finite() => {}
                _ => {
                    return Err(Error::InvalidArgument(
                        "FedAvg and FedIterHT need a positive learning_rate".into(),
                    ))
                }
            },
        }
        Ok(())
    }

    fn resolved_weights(&self, num_clients: usize) -> Vec<f64> {
        self.weights
            .clone()
            .unwrap_or_else(|| vec![1.0 / num_clients as f64; num_clients])
    }
}

/// Metrics of the global model after one round. `round` is zero-based:
/// record `t` describes the model produced by round `t + 1`.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// `||x - x*|| / ||x*||` against the reference signal (NaN without one).
    pub rel_error: f64,
    /// Weighted global objective over all clients.
    pub loss: f64,
    /// F1 overlap between the model's support and the reference support
    /// (NaN without a reference).
    pub support_f1: f64,
    pub cohort_size: usize,
    /// Wall-clock duration of the round. Excluded from equivalence checks.
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    /// Global model after the final round.
    pub final_signal: DVector<f64>,
    /// Sparse form of the final model (None for FedAvg, whose global model
    /// is dense).
    pub final_sparse: Option<SparseEstimate>,
}

/// How per-round client updates are executed. Results are identical either
/// way; only wall time differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

// Not derivable: the default depends on the `parallel` feature.
#[allow(clippy::derivable_impls)]
impl Default for Execution {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Execution::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Execution::Sequential
        }
    }
}

/// Draws the round's participating clients: a uniformly random
/// `cohort_size`-subset, ascending.
pub fn sample_cohort(
    num_clients: usize,
    cohort_size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<usize> {
    rng::sample_distinct(rng, num_clients, cohort_size)
}

/// Server step shared by FedGradMP and FedIterHT: weighted average of the
/// client signals, thresholded to `tau` atoms (factor `eta3`), optionally
/// pulled into the l2 ball.
pub fn aggregate_and_threshold(
    parts: &[(f64, DVector<f64>)],
    tau: usize,
    eta3: f64,
    dict: &Dictionary,
    ball_radius: Option<f64>,
) -> Result<SparseEstimate> {
    let mut agg = DVector::zeros(dict.n());
    for (w, signal) in parts {
        agg.axpy(*w, signal, 1.0);
    }
    let mut est = approx_project(&agg, tau, dict, eta3)?.estimate;
    if let Some(radius) = ball_radius {
        let norm = est.signal.norm();
        if norm > radius {
            est.scale(radius / norm);
        }
    }
    Ok(est)
}

enum ClientUpdate {
    Sparse(SparseEstimate),
    Dense(DVector<f64>),
}

impl ClientUpdate {
    fn signal(&self) -> &DVector<f64> {
        match self {
            ClientUpdate::Sparse(est) => &est.signal,
            ClientUpdate::Dense(x) => x,
        }
    }

    fn into_signal(self) -> DVector<f64> {
        match self {
            ClientUpdate::Sparse(est) => est.signal,
            ClientUpdate::Dense(x) => x,
        }
    }
}

/// Runs the federation with the default executor (parallel when the
/// feature is enabled).
pub fn run_federation(
    objectives: &[Objective],
    config: &FederationConfig,
    truth: Option<&SparseEstimate>,
) -> Result<RunResult> {
    run_federation_with(Execution::default(), objectives, config, truth)
}

pub fn run_federation_with(
    execution: Execution,
    objectives: &[Objective],
    config: &FederationConfig,
    truth: Option<&SparseEstimate>,
) -> Result<RunResult> {
    let n_clients = objectives.len();
    config.validate(n_clients)?;
    let dict = shared_dictionary(objectives)?;
    for obj in objectives {
        if obj.model_dim() != dict.n() {
            return Err(Error::Unsupported(
                "federated runs support single-block (squared or binary logistic) models".into(),
            ));
        }
    }
    if config.local.tau > dict.num_atoms() {
        return Err(Error::InvalidArgument(format!(
            "tau = {} exceeds the dictionary's {} atoms",
            config.local.tau,
            dict.num_atoms()
        )));
    }

    let weights = config.resolved_weights(n_clients);
    let truth_norm = truth.map(|t| t.signal.norm());
    let mut x = DVector::zeros(dict.n());
    let mut sparse: Option<SparseEstimate> = None;
    let mut records = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let started = Instant::now();

        // Participants and their aggregation weights for this round.
        let (cohort, agg_weights): (Vec<usize>, Vec<f64>) = match config.cohort_size {
            Some(l) if l < n_clients => {
                let mut crng = rng::stream(config.seed, tags::COHORT, t as u64, 0);
                let cohort = sample_cohort(n_clients, l, &mut crng);
                let w = vec![1.0 / l as f64; l];
                (cohort, w)
            }
            _ => ((0..n_clients).collect(), weights.clone()),
        };

        let run_client = |&i: &usize| -> Result<ClientUpdate> {
            let obj = &objectives[i];
            let mut brng = rng::stream(config.seed, tags::BATCH, t as u64, i as u64);
            let update = match config.algorithm {
                Algorithm::FedGradMp => {
                    let (est, _) = local_stogradmp(obj, &x, &config.local, &mut brng)?;
                    ClientUpdate::Sparse(est)
                }
                Algorithm::FedAvg => {
                    let gamma = config.learning_rate.expect("validated");
                    ClientUpdate::Dense(fedavg_local_update(
                        obj,
                        &x,
                        config.local.k_iters,
                        gamma,
                        &mut brng,
                    ))
                }
                Algorithm::FedIterHt => {
                    let gamma = config.learning_rate.expect("validated");
                    ClientUpdate::Sparse(fediterht_local_update(
                        obj,
                        &x,
                        config.local.k_iters,
                        gamma,
                        config.local.tau,
                        config.local.ball_radius,
                        &mut brng,
                    )?)
                }
            };
            Ok(update)
        };

        // Client updates are independent; order of evaluation is free, but
        // the reduction below is always in ascending client order.
        let updates: Vec<ClientUpdate> = match execution {
            Execution::Sequential => cohort
                .iter()
                .map(|i| run_client(i).map_err(|e| e.at_client(t, *i)))
                .collect::<Result<_>>()?,
            #[cfg(feature = "parallel")]
            Execution::Parallel => cohort
                .par_iter()
                .map(|i| run_client(i).map_err(|e| e.at_client(t, *i)))
                .collect::<Result<_>>()?,
        };

        match config.algorithm {
            Algorithm::FedGradMp | Algorithm::FedIterHt => {
                let parts: Vec<(f64, DVector<f64>)> = agg_weights
                    .iter()
                    .zip(updates)
                    .map(|(&w, u)| (w, u.into_signal()))
                    .collect();
                let est = aggregate_and_threshold(
                    &parts,
                    config.local.tau,
                    config.eta3,
                    &dict,
                    config.local.ball_radius,
                )?;
                x = est.signal.clone();
                sparse = Some(est);
            }
            Algorithm::FedAvg => {
                let mut agg = DVector::zeros(dict.n());
                for (&w, u) in agg_weights.iter().zip(&updates) {
                    agg.axpy(w, u.signal(), 1.0);
                }
                x = agg;
                sparse = None;
            }
        }

        // Round metrics: global objective over every client, error and
        // support overlap against the reference when available.
        let loss = objectives
            .iter()
            .zip(&weights)
            .map(|(o, &p)| p * o.loss(&x))
            .sum();
        let (rel_error, f1) = match truth {
            None => (f64::NAN, f64::NAN),
            Some(tr) => {
                let rel = (&x - &tr.signal).norm() / truth_norm.unwrap().max(f64::MIN_POSITIVE);
                let model_support = match &sparse {
                    Some(est) => est.support.clone(),
                    None => {
                        approx_project(&x, config.local.tau, &dict, 1.0)?
                            .estimate
                            .support
                    }
                };
                (rel, support_f1(&model_support, &tr.support))
            }
        };
        records.push(RoundRecord {
            round: t,
            rel_error,
            loss,
            support_f1: f1,
            cohort_size: cohort.len(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(RunResult {
        records,
        final_signal: x,
        final_sparse: sparse,
    })
}

fn shared_dictionary(objectives: &[Objective]) -> Result<Arc<Dictionary>> {
    let first = objectives
        .first()
        .ok_or_else(|| Error::InvalidArgument("federation has no clients".into()))?
        .dict();
    for obj in objectives {
        if !Arc::ptr_eq(obj.dict(), first) && obj.dict().atoms() != first.atoms() {
            return Err(Error::InvalidArgument(
                "all clients must share one dictionary".into(),
            ));
        }
    }
    Ok(first.clone())
}

/// FedAvg local work: `k` plain SGD steps on fresh mini-batches.
fn fedavg_local_update(
    obj: &Objective,
    x0: &DVector<f64>,
    k: usize,
    gamma: f64,
    rng: &mut impl rand::Rng,
) -> DVector<f64> {
    let mut x = x0.clone();
    for _ in 0..k {
        let batch = obj.sample_batch(rng);
        let g = obj.stochastic_gradient(&x, &batch);
        x.axpy(-gamma, &g, 1.0);
    }
    x
}

/// FedIterHT local work: `k` SGD steps, each hard-thresholded to the best
/// `tau`-atom approximation (and optionally pulled into the l2 ball).
fn fediterht_local_update(
    obj: &Objective,
    x0: &DVector<f64>,
    k: usize,
    gamma: f64,
    tau: usize,
    ball_radius: Option<f64>,
    rng: &mut impl rand::Rng,
) -> Result<SparseEstimate> {
    let dict = obj.dict();
    let mut x = x0.clone();
    let mut est = None;
    for _ in 0..k {
        let batch = obj.sample_batch(rng);
        let g = obj.stochastic_gradient(&x, &batch);
        x.axpy(-gamma, &g, 1.0);
        let mut thresholded = approx_project(&x, tau, dict, 1.0)?.estimate;
        if let Some(radius) = ball_radius {
            let norm = thresholded.signal.norm();
            if norm > radius {
                thresholded.scale(radius / norm);
            }
        }
        x = thresholded.signal.clone();
        est = Some(thresholded);
    }
    Ok(est.expect("k_iters >= 1 is validated"))
}

/// Writes round records as CSV (full-precision floats, one row per round).
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::from("round,rel_error,loss,support_f1,cohort_size,wall_ms\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.round,
            fmt17(r.rel_error),
            fmt17(r.loss),
            fmt17(r.support_f1),
            r.cohort_size,
            fmt17(r.wall_ms)
        ));
    }
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Number of rounds needed to bring the relative error strictly below
/// `threshold` (None if the run never got there).
pub fn rounds_to_threshold(records: &[RoundRecord], threshold: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.rel_error < threshold)
        .map(|r| r.round + 1)
}

/// Determinism comparison: every metric must match exactly except wall
/// time, which is execution-dependent by nature.
pub fn records_equivalent(a: &[RoundRecord], b: &[RoundRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.round == y.round
                && bits_eq(x.rel_error, y.rel_error)
                && bits_eq(x.loss, y.loss)
                && bits_eq(x.support_f1, y.support_f1)
                && x.cohort_size == y.cohort_size
        })
}

fn bits_eq(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}
