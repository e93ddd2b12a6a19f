//! Convergence-rate predictions for FedGradMP from measurable problem
//! constants.
//!
//! The guarantees bound the expected squared recovery error after round
//! `t + 1` by `kappa^{t+1} ||x_0 - x*||^2 + residual`. Everything here is
//! derived from per-client restricted curvature (`rho` constants at
//! sparsity `4*tau`, batch smoothness moments at `tau`), gradient norms at
//! the solution, and the stochastic-gradient variance bound. Four variants
//! are covered: exact local solves, `delta`-inexact solves (which double
//! the per-iteration factor and add `delta^2` to the residual), uniform
//! partial participation (cohort of `L`), and a variant whose constants
//! avoid the bounded-variance assumption entirely.
//!
//! Free parameter: every bound holds for any `theta > 0`, which trades the
//! `1/theta^2` term inside `beta2` against `theta^2` factors in the
//! residual; [`optimize_theta`] picks the best over a grid.
//!
//! For the partial-participation variant the per-round contraction uses the
//! worst cohort (the mean of the `L` largest per-client factors), and the
//! residual accumulates local iterations with the worst per-iteration
//! factor `max_i mu(i)` — the geometric sum a per-iteration recursion
//! actually yields.

use crate::error::{Error, Result};
use crate::objectives::{CurvatureMode, Objective};
use crate::sparse_ops::SparseEstimate;
use serde::Serialize;
use std::fs;
use std::path::Path;

/// Probe points used when estimating the variance bound.
pub const SIGMA_PROBES: usize = 8;

/// Everything the rate formulas need from one client.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClientConstants {
    /// Restricted strong convexity of the full objective at sparsity `4*tau`.
    pub rho_minus_4tau: f64,
    /// Mean over batches of the restricted smoothness at `4*tau`.
    pub rho_plus_bar_4tau: f64,
    /// Mean over batches of the squared restricted smoothness at `tau`.
    pub rho_plus_sq_mean_tau: f64,
    /// Mean over batches of the restricted smoothness at `tau`.
    pub rho_plus_mean_tau: f64,
    /// Stochastic-gradient variance bound at `tau`-sparse points.
    pub sigma_sq: f64,
    /// `||grad f_i(x*)||^2`.
    pub grad_at_opt_sq: f64,
    /// `max over supports of size 4*tau` of `||P_S grad f_i(x*)||^2`.
    pub max_restricted_grad_sq: f64,
    /// `E_j ||grad g_{i,j}(x*)||^2` (used by the no-variance-bound variant).
    pub stoch_grad_at_opt_sq: f64,
}

/// `beta1 = rho_plus_bar / (2 rho_minus - rho_plus_bar)`, defined only in
/// the well-conditioned regime `rho_plus_bar < 2 rho_minus`.
pub fn beta1(c: &ClientConstants, client: usize) -> Result<f64> {
    let denom = 2.0 * c.rho_minus_4tau - c.rho_plus_bar_4tau;
    if denom <= 0.0 || c.rho_minus_4tau <= 0.0 {
        return Err(Error::WellConditioning {
            client,
            rho_minus: c.rho_minus_4tau,
            rho_plus_bar: c.rho_plus_bar_4tau,
        });
    }
    Ok(c.rho_plus_bar_4tau / denom)
}

/// Treat approximation factors this close to 1 as exactly 1 (the
/// `sqrt(eta1^2 - 1)` terms vanish).
const ETA_ONE_TOL: f64 = 1e-12;

fn eta1_slack(eta1: f64) -> f64 {
    if eta1 <= 1.0 + ETA_ONE_TOL {
        0.0
    } else {
        (eta1 * eta1 - 1.0).sqrt() / eta1
    }
}

/// The bounded-variance `beta2`:
/// `2[(rho_plus_bar + 1/theta^2) - eta1^2 rho_minus] / (eta1^2 rho_minus)
///  + (2 sqrt(eta1^2-1) / (eta1 rho_minus)) (3 E (rho_tau^+)^2 + 1)`.
pub fn beta2(c: &ClientConstants, eta1: f64, theta: f64) -> f64 {
    let e1sq = eta1 * eta1;
    let rho_m = c.rho_minus_4tau;
    let base =
        2.0 * ((c.rho_plus_bar_4tau + 1.0 / (theta * theta)) - e1sq * rho_m) / (e1sq * rho_m);
    let slack = 2.0 * eta1_slack(eta1) / rho_m * (3.0 * c.rho_plus_sq_mean_tau + 1.0);
    base + slack
}

/// `beta2` without the bounded-variance assumption. Returns the pair
/// (primary, alternative): the primary form uses second moments of the
/// batch smoothness, the alternative first moments with different
/// constants — both are reported since they are not algebraically equal
/// and neither dominates the other.
pub fn beta2_no_variance(c: &ClientConstants, eta1: f64, theta: f64) -> (f64, f64) {
    let e1sq = eta1 * eta1;
    let rho_m = c.rho_minus_4tau;
    let tsq = theta * theta;
    let s = eta1_slack(eta1);

    let primary = 2.0 * ((c.rho_plus_bar_4tau + 1.0 / tsq) - e1sq * rho_m) / (e1sq * rho_m)
        + 3.0 * tsq * (c.rho_plus_sq_mean_tau + c.rho_plus_bar_4tau) / rho_m
        + s * (3.0 * c.rho_plus_sq_mean_tau + 1.0);

    let alt = 4.0 * ((2.0 * e1sq - 1.0) * (c.rho_plus_bar_4tau + 1.0 / tsq) - e1sq * rho_m)
        / (e1sq * rho_m)
        + 3.0 * tsq * (c.rho_plus_mean_tau + c.rho_plus_bar_4tau) / rho_m
        + 2.0 * (e1sq - 1.0) / e1sq;

    (primary, alt)
}

/// Which convergence guarantee to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Variant {
    /// Full participation, exact restricted solves.
    Exact,
    /// Local solves within distance `delta` of the restricted minimizer.
    Inexact { delta: f64 },
    /// Uniform sampling of `cohort_size` clients per round (uniform
    /// weights assumed).
    Partial { cohort_size: usize },
    /// Full participation without assuming bounded gradient variance.
    NoVarianceBound,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatePrediction {
    pub variant: Variant,
    pub k_iters: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub theta: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    /// First-moment alternative `beta2` (no-variance-bound variant only).
    pub beta2_alt: Option<Vec<f64>>,
    /// Per-iteration contraction factor of each client.
    pub mu_per_client: Vec<f64>,
    /// Per-round contraction factor of the recovery error.
    pub kappa: f64,
    /// Noise floor entering the residual.
    pub nu: f64,
    /// Full residual term of the bound; infinite when `kappa >= 1`.
    pub residual_bound: f64,
    pub warnings: Vec<String>,
}

/// `sum_{k=0}^{K-1} m^k`, stable at `m = 1`.
pub(crate) fn geometric_sum(m: f64, k: usize) -> f64 {
    if (1.0 - m).abs() < 1e-12 {
        k as f64
    } else {
        (1.0 - m.powi(k as i32)) / (1.0 - m)
    }
}

fn validate_inputs(
    constants: &[ClientConstants],
    weights: &[f64],
    k_iters: usize,
    eta1: f64,
    eta2: f64,
    eta3: f64,
    theta: f64,
) -> Result<()> {
    if constants.is_empty() {
        return Err(Error::InvalidArgument("no client constants given".into()));
    }
    if weights.len() != constants.len() {
        return Err(Error::Dimension {
            context: "rate weights vs client constants",
            expected: constants.len(),
            found: weights.len(),
        });
    }
    if k_iters == 0 {
        return Err(Error::InvalidArgument("k_iters must be >= 1".into()));
    }
    for (name, v) in [("eta1", eta1), ("eta2", eta2), ("eta3", eta3)] {
        if !(v >= 1.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{name} must be >= 1 and finite, got {v}"
            )));
        }
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "theta must be positive and finite, got {theta}"
        )));
    }
    if weights.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and finite".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!(
            "weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// The `4 / (rho_plus_bar (2 rho_minus - rho_plus_bar))` aggregation term.
fn inv_gap(c: &ClientConstants) -> f64 {
    4.0 / (c.rho_plus_bar_4tau * (2.0 * c.rho_minus_4tau - c.rho_plus_bar_4tau))
}

/// Noise floor for the bounded-variance variants. For partial
/// participation the variance sum runs over every client scaled by `1/L`
/// rather than by the weights.
fn nu_bounded(
    constants: &[ClientConstants],
    weights: &[f64],
    beta1s: &[f64],
    eta1: f64,
    eta2: f64,
    theta: f64,
    cohort: Option<usize>,
) -> f64 {
    let amp = (1.0 + eta2) * (1.0 + eta2);
    let s = eta1_slack(eta1);
    let tsq = theta * theta;
    let n = constants.len();

    let (signal_term, variance_bracket): (f64, Vec<f64>) = if s > 0.0 {
        let worst = constants
            .iter()
            .zip(beta1s)
            .map(|(c, &b1)| {
                8.0 * b1 / (c.rho_minus_4tau * c.rho_minus_4tau)
                    + inv_gap(c)
                    + b1 / c.rho_minus_4tau * 6.0 * s
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let zeta_sq: f64 = constants
            .iter()
            .zip(weights)
            .map(|(c, &p)| p * c.grad_at_opt_sq)
            .sum();
        let bracket = constants
            .iter()
            .zip(beta1s)
            .map(|(c, &b1)| b1 / c.rho_minus_4tau * (2.0 * tsq + 6.0 * s) + inv_gap(c))
            .collect();
        (worst * zeta_sq, bracket)
    } else {
        // Exact support identification: the heterogeneity enters through
        // the worst restricted gradient at the solution instead.
        let worst = constants
            .iter()
            .zip(beta1s)
            .map(|(c, &b1)| 8.0 * b1 / (c.rho_minus_4tau * c.rho_minus_4tau) + inv_gap(c))
            .fold(f64::NEG_INFINITY, f64::max);
        let restricted: f64 = match cohort {
            // Uniform weights are assumed for partial participation.
            Some(_) => {
                constants
                    .iter()
                    .map(|c| c.max_restricted_grad_sq)
                    .sum::<f64>()
                    / n as f64
            }
            None => constants
                .iter()
                .zip(weights)
                .map(|(c, &p)| p * c.max_restricted_grad_sq)
                .sum(),
        };
        let bracket = constants
            .iter()
            .zip(beta1s)
            .map(|(c, &b1)| 2.0 * b1 * tsq / c.rho_minus_4tau + inv_gap(c))
            .collect();
        (worst * restricted, bracket)
    };

    let variance_term: f64 = match cohort {
        Some(l) => {
            constants
                .iter()
                .zip(&variance_bracket)
                .map(|(c, br)| br * c.sigma_sq)
                .sum::<f64>()
                / l as f64
        }
        None => constants
            .iter()
            .zip(weights)
            .zip(&variance_bracket)
            .map(|((c, &p), br)| p * br * c.sigma_sq)
            .sum(),
    };
    amp * (signal_term + variance_term)
}

/// Noise floor for the no-variance-bound variant: the restricted gradient
/// term uses only the `8 beta1 / rho_minus^2` amplification, and the
/// variance term is the product of the weighted bracket sum and the
/// weighted mean squared stochastic gradient at the solution.
fn nu_no_variance(
    constants: &[ClientConstants],
    weights: &[f64],
    beta1s: &[f64],
    eta1: f64,
    eta2: f64,
    theta: f64,
) -> f64 {
    let amp = (1.0 + eta2) * (1.0 + eta2);
    let s = eta1_slack(eta1);
    let tsq = theta * theta;

    let worst = constants
        .iter()
        .zip(beta1s)
        .map(|(c, &b1)| 8.0 * b1 / (c.rho_minus_4tau * c.rho_minus_4tau))
        .fold(f64::NEG_INFINITY, f64::max);
    let restricted: f64 = constants
        .iter()
        .zip(weights)
        .map(|(c, &p)| p * c.max_restricted_grad_sq)
        .sum();

    let bracket_sum: f64 = constants
        .iter()
        .zip(weights)
        .zip(beta1s)
        .map(|((c, &p), &b1)| p * (b1 / c.rho_minus_4tau * (2.0 * tsq + 6.0 * s) + inv_gap(c)))
        .sum();
    let stoch_sum: f64 = constants
        .iter()
        .zip(weights)
        .map(|(c, &p)| p * c.stoch_grad_at_opt_sq)
        .sum();

    amp * (worst * restricted + bracket_sum * stoch_sum)
}

/// Evaluates the convergence guarantee for the given variant at a fixed
/// `theta`.
// The flat parameter list mirrors the guarantee's own parameter roster.
#[allow(clippy::too_many_arguments)]
pub fn rate_prediction(
    constants: &[ClientConstants],
    weights: &[f64],
    k_iters: usize,
    eta1: f64,
    eta2: f64,
    eta3: f64,
    theta: f64,
    variant: Variant,
) -> Result<RatePrediction> {
    validate_inputs(constants, weights, k_iters, eta1, eta2, eta3, theta)?;
    let n = constants.len();
    let mut warnings = Vec::new();

    let beta1s: Vec<f64> = constants
        .iter()
        .enumerate()
        .map(|(i, c)| beta1(c, i))
        .collect::<Result<_>>()?;

    let (beta2s, beta2_alt): (Vec<f64>, Option<Vec<f64>>) = match variant {
        Variant::NoVarianceBound => {
            let pairs: Vec<(f64, f64)> = constants
                .iter()
                .map(|c| beta2_no_variance(c, eta1, theta))
                .collect();
            (
                pairs.iter().map(|p| p.0).collect(),
                Some(pairs.iter().map(|p| p.1).collect()),
            )
        }
        _ => (
            constants.iter().map(|c| beta2(c, eta1, theta)).collect(),
            None,
        ),
    };

    let amp = (1.0 + eta2) * (1.0 + eta2);
    let inexact_delta = match variant {
        Variant::Inexact { delta } => {
            if !(delta >= 0.0) || !delta.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "inexact delta must be nonnegative and finite, got {delta}"
                )));
            }
            Some(delta)
        }
        _ => None,
    };
    // Inexact solves double the per-iteration factor.
    let mu_scale = if inexact_delta.is_some() { 2.0 } else { 1.0 };
    let mu_per_client: Vec<f64> = beta1s
        .iter()
        .zip(&beta2s)
        .map(|(&b1, &b2)| mu_scale * amp * b1 * b2)
        .collect();
    if mu_per_client.iter().any(|&m| m < 0.0) {
        warnings
            .push("a per-iteration factor is negative; treating the bound as vacuous there".into());
    }

    let server_amp = 2.0 * eta3 * eta3 + 2.0;
    let kappa = match variant {
        Variant::Partial { cohort_size } => {
            if cohort_size == 0 || cohort_size > n {
                return Err(Error::InvalidArgument(format!(
                    "cohort_size must be in 1..={n}, got {cohort_size}"
                )));
            }
            if weights.iter().any(|&p| (p - 1.0 / n as f64).abs() > 1e-8) {
                warnings.push(
                    "partial-participation guarantee assumes uniform weights; results use 1/N"
                        .into(),
                );
            }
            // Worst cohort: the mean of the L largest per-client factors.
            let mut powered: Vec<f64> = mu_per_client
                .iter()
                .map(|&m| m.powi(k_iters as i32))
                .collect();
            powered.sort_by(|a, b| b.partial_cmp(a).expect("finite factors"));
            let worst_mean: f64 = powered[..cohort_size].iter().sum::<f64>() / cohort_size as f64;
            server_amp * worst_mean
        }
        _ => {
            let weighted: f64 = mu_per_client
                .iter()
                .zip(weights)
                .map(|(&m, &p)| p * m.powi(k_iters as i32))
                .sum();
            server_amp * weighted
        }
    };

    let nu = match variant {
        Variant::NoVarianceBound => nu_no_variance(constants, weights, &beta1s, eta1, eta2, theta),
        Variant::Partial { cohort_size } => nu_bounded(
            constants,
            weights,
            &beta1s,
            eta1,
            eta2,
            theta,
            Some(cohort_size),
        ),
        _ => nu_bounded(constants, weights, &beta1s, eta1, eta2, theta, None),
    };

    let residual_bound = if kappa >= 1.0 {
        warnings.push(format!("kappa = {kappa} >= 1: the bound does not contract"));
        f64::INFINITY
    } else {
        let noise = nu + inexact_delta.map_or(0.0, |d| d * d);
        let accumulation = match variant {
            // Local iterations accumulate with the worst per-iteration
            // factor under partial participation.
            Variant::Partial { .. } => {
                let worst = mu_per_client
                    .iter()
                    .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                geometric_sum(worst, k_iters)
            }
            _ => mu_per_client
                .iter()
                .zip(weights)
                .map(|(&m, &p)| p * geometric_sum(m, k_iters))
                .sum(),
        };
        server_amp * noise * accumulation / (1.0 - kappa)
    };

    Ok(RatePrediction {
        variant,
        k_iters,
        eta1,
        eta2,
        eta3,
        theta,
        beta1: beta1s,
        beta2: beta2s,
        beta2_alt,
        mu_per_client,
        kappa,
        nu,
        residual_bound,
        warnings,
    })
}

/// Evaluates the guarantee over a grid of `theta` values and keeps the one
/// with the smallest residual (smallest `kappa` as tiebreak, and as the
/// criterion when no `theta` yields a contraction).
pub fn optimize_theta(
    constants: &[ClientConstants],
    weights: &[f64],
    k_iters: usize,
    eta1: f64,
    eta2: f64,
    eta3: f64,
    variant: Variant,
) -> Result<RatePrediction> {
    let mut grid: Vec<f64> = (-6..=6).map(|k| (k as f64).exp2()).collect();
    grid.push(10.0);
    let mut best: Option<RatePrediction> = None;
    for theta in grid {
        let pred = rate_prediction(
            constants, weights, k_iters, eta1, eta2, eta3, theta, variant,
        )?;
        let better = match &best {
            None => true,
            Some(b) => (pred.residual_bound, pred.kappa) < (b.residual_bound, b.kappa),
        };
        if better {
            best = Some(pred);
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Objective-value form of the guarantee:
/// `E f(x_{t+1}) <= f(x*) + ||grad f(x*)||^2 / (2 rho) + rho * bound`,
/// with `rho` the weighted mean of the clients' batch smoothness at
/// sparsity `tau` and `bound` the recovery-error bound after `round + 1`
/// rounds.
pub fn corollary_objective_bound(
    pred: &RatePrediction,
    rho: f64,
    grad_norm_sq_at_opt: f64,
    f_at_opt: f64,
    x0_dist_sq: f64,
    round: usize,
) -> f64 {
    let error_bound = pred.kappa.powi(round as i32 + 1) * x0_dist_sq + pred.residual_bound;
    f_at_opt + grad_norm_sq_at_opt / (2.0 * rho) + rho * error_bound
}

/// Measures every [`ClientConstants`] field for one client around the
/// reference solution.
pub fn compute_client_constants(
    obj: &Objective,
    tau: usize,
    truth: &SparseEstimate,
    mode: CurvatureMode,
    radius: Option<f64>,
    rng: &mut impl rand::Rng,
) -> Result<ClientConstants> {
    let d = obj.dict().num_atoms();
    let four_tau = (4 * tau).min(d);
    let at_4tau = obj.estimate_rsc_rss(four_tau, mode, radius, rng)?;
    let at_tau = obj.estimate_rsc_rss(tau, mode, radius, rng)?;
    let sigma_sq = obj.estimate_sigma(tau, SIGMA_PROBES, rng)?;

    let grad = obj.full_gradient(&truth.signal);
    let grad_at_opt_sq = grad.norm_squared();
    let max_restricted_grad_sq = max_restricted_sq(obj, &grad, four_tau, mode, rng)?;
    let stoch_grad_at_opt_sq = obj.batch_gradient_sq_mean(&truth.signal, rng);

    Ok(ClientConstants {
        rho_minus_4tau: at_4tau.rho_minus,
        rho_plus_bar_4tau: at_4tau.rho_plus_bar,
        rho_plus_sq_mean_tau: at_tau.rho_plus_sq_mean,
        rho_plus_mean_tau: at_tau.rho_plus_mean,
        sigma_sq,
        grad_at_opt_sq,
        max_restricted_grad_sq,
        stoch_grad_at_opt_sq,
    })
}

/// `max over supports of size k` of the squared norm of the gradient's
/// orthogonal projection onto the support's span. Exact for standard and
/// orthonormal dictionaries (top-k correlations); general dictionaries
/// enumerate supports exhaustively when feasible, else sample as many
/// supports as the curvature mode did.
fn max_restricted_sq(
    obj: &Objective,
    grad: &nalgebra::DVector<f64>,
    k: usize,
    mode: CurvatureMode,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    use crate::combin;
    use crate::dictionary::DictionaryKind;
    use crate::sparse_ops::{orthogonal_project, EXHAUSTIVE_CAP};

    let d = obj.dict().num_atoms();
    match obj.dict().kind() {
        DictionaryKind::StandardBasis | DictionaryKind::Orthonormal => {
            let mut corr_sq: Vec<f64> = obj.dict().correlate(grad).iter().map(|v| v * v).collect();
            corr_sq.sort_by(|a, b| b.partial_cmp(a).expect("finite correlations"));
            Ok(corr_sq[..k.min(corr_sq.len())].iter().sum())
        }
        DictionaryKind::General => {
            let mut worst = 0.0f64;
            if combin::count_combinations(d, k) <= EXHAUSTIVE_CAP as u128 {
                let mut result = Ok(());
                combin::for_each_combination(d, k, |s| {
                    if result.is_err() {
                        return;
                    }
                    match orthogonal_project(grad, s, obj.dict()) {
                        Ok(p) => worst = worst.max(p.signal.norm_squared()),
                        Err(e) => result = Err(e),
                    }
                });
                result?;
            } else {
                let trials = match mode {
                    CurvatureMode::Exhaustive => 256,
                    CurvatureMode::Sampled { supports, .. } => supports.max(1),
                };
                for _ in 0..trials {
                    let s = crate::rng::sample_distinct(rng, d, k);
                    let p = orthogonal_project(grad, &s, obj.dict())?;
                    worst = worst.max(p.signal.norm_squared());
                }
            }
            Ok(worst)
        }
    }
}

/// Writes one or more predictions as pretty JSON.
pub fn write_rates_json(path: &Path, predictions: &[RatePrediction]) -> Result<()> {
    let body = serde_json::to_string_pretty(predictions)?;
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::Dictionary;
    use crate::objectives::{ClientDataset, LossKind};
    use crate::rng;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng as _;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    /// A constants block with every field set explicitly.
    fn consts(rho_minus: f64, rho_plus_bar: f64) -> ClientConstants {
        ClientConstants {
            rho_minus_4tau: rho_minus,
            rho_plus_bar_4tau: rho_plus_bar,
            rho_plus_sq_mean_tau: rho_plus_bar * rho_plus_bar,
            rho_plus_mean_tau: rho_plus_bar,
            sigma_sq: 0.0,
            grad_at_opt_sq: 0.0,
            max_restricted_grad_sq: 0.0,
            stoch_grad_at_opt_sq: 0.0,
        }
    }

    #[test]
    fn beta1_hand_values_and_conditioning() {
        // rho_plus_bar / (2 rho_minus - rho_plus_bar) = 1.2 / 0.8 = 1.5.
        let c = consts(1.0, 1.2);
        assert!((beta1(&c, 0).unwrap() - 1.5).abs() < 1e-15);
        // Boundary and beyond: not well conditioned.
        assert!(beta1(&consts(1.0, 2.0), 3).is_err());
        match beta1(&consts(1.0, 2.5), 3).unwrap_err() {
            Error::WellConditioning { client, .. } => assert_eq!(client, 3),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn beta2_hand_value_at_unit_eta() {
        // eta1 = 1, rho_minus = 1, rho_plus_bar = 1.2, theta = 10:
        // 2 * ((1.2 + 0.01) - 1) / 1 = 0.42, no slack term.
        let c = consts(1.0, 1.2);
        assert!((beta2(&c, 1.0, 10.0) - 0.42).abs() < 1e-15);
        // eta1 > 1 adds the slack term:
        // slack = 2 sqrt(eta1^2-1)/(eta1 rho) (3 E (rho_tau^+)^2 + 1).
        let eta1 = 1.25f64;
        let s = (eta1 * eta1 - 1.0).sqrt() / eta1;
        let expected =
            2.0 * ((1.2 + 0.01) - eta1 * eta1) / (eta1 * eta1) + 2.0 * s * (3.0 * 1.44 + 1.0);
        assert!((beta2(&c, eta1, 10.0) - expected).abs() < 1e-14);
    }

    #[test]
    fn beta2_no_variance_hand_values() {
        let c = consts(1.0, 1.2);
        let theta = 2.0f64;
        // eta1 = 1: primary = 2((1.2 + 0.25) - 1)/1 + 3*4*(1.44 + 1.2)/1
        //                   = 0.9 + 31.68 = 32.58
        //           alt     = 4((1.2 + 0.25) - 1)/1 + 3*4*(1.2 + 1.2)/1
        //                   = 1.8 + 28.8 = 30.6
        let (primary, alt) = beta2_no_variance(&c, 1.0, theta);
        assert!((primary - 32.58).abs() < 1e-12, "primary {primary}");
        assert!((alt - 30.6).abs() < 1e-12, "alt {alt}");
    }

    #[test]
    fn geometric_sum_limits() {
        assert_eq!(geometric_sum(1.0, 5), 5.0);
        assert!((geometric_sum(0.5, 3) - 1.75).abs() < 1e-15);
        assert_eq!(geometric_sum(0.0, 4), 1.0);
    }

    #[test]
    fn kappa_hand_value_single_client() {
        // rho_minus = 1, rho_plus_bar = 1.02, theta = 10, eta = 1:
        // beta1 = 1.02/0.98, beta2 = 2(1.03 - 1) = 0.06,
        // mu = 4 beta1 beta2, kappa = 4 mu^3.
        let c = consts(1.0, 1.02);
        let pred = rate_prediction(&[c], &[1.0], 3, 1.0, 1.0, 1.0, 10.0, Variant::Exact).unwrap();
        let b1 = 1.02 / 0.98;
        let mu = 4.0 * b1 * 0.06;
        assert!((pred.mu_per_client[0] - mu).abs() < 1e-14);
        assert!((pred.kappa - 4.0 * mu.powi(3)).abs() < 1e-14);
        assert!(pred.kappa < 1.0);
        assert!(pred.warnings.is_empty());
        // Zero gradients and variance: the residual vanishes entirely.
        assert_eq!(pred.nu, 0.0);
        assert_eq!(pred.residual_bound, 0.0);
    }

    #[test]
    fn kappa_above_one_gives_infinite_residual_and_warning() {
        let c = consts(2.0, 2.5);
        let pred = rate_prediction(&[c], &[1.0], 2, 1.0, 1.0, 1.0, 10.0, Variant::Exact).unwrap();
        // beta1 = 2.5/1.5, beta2 = 2((2.5 + 0.01) - 2)/2 = 0.51,
        // mu = 4 * (5/3) * 0.51 = 3.4, kappa = 4 * 3.4^2 = 46.24.
        assert!((pred.mu_per_client[0] - 3.4).abs() < 1e-12);
        assert!((pred.kappa - 46.24).abs() < 1e-10);
        assert!(pred.residual_bound.is_infinite());
        assert!(pred.warnings.iter().any(|w| w.contains("kappa")));
    }

    #[test]
    fn inexact_doubles_mu_and_adds_delta_to_residual() {
        let c = consts(1.0, 1.02);
        let mut noisy = c;
        noisy.sigma_sq = 0.01;
        let exact =
            rate_prediction(&[noisy], &[1.0], 2, 1.0, 1.0, 1.0, 10.0, Variant::Exact).unwrap();
        let inexact = rate_prediction(
            &[noisy],
            &[1.0],
            2,
            1.0,
            1.0,
            1.0,
            10.0,
            Variant::Inexact { delta: 0.0 },
        )
        .unwrap();
        assert!(
            (inexact.mu_per_client[0] - 2.0 * exact.mu_per_client[0]).abs() < 1e-14,
            "inexact mu must double"
        );
        assert_eq!(inexact.nu, exact.nu);

        // A positive delta enlarges the residual by exactly the delta^2
        // share of the noise term.
        let with_delta = rate_prediction(
            &[noisy],
            &[1.0],
            2,
            1.0,
            1.0,
            1.0,
            10.0,
            Variant::Inexact { delta: 0.1 },
        )
        .unwrap();
        assert!(with_delta.residual_bound > inexact.residual_bound);
        let ratio = with_delta.residual_bound / inexact.residual_bound;
        assert!((ratio - (inexact.nu + 0.01) / inexact.nu).abs() < 1e-10);
    }

    #[test]
    fn partial_kappa_non_increasing_in_cohort_size() {
        // Heterogeneous clients: larger cohorts average away the worst one.
        let constants: Vec<ClientConstants> = [1.01, 1.02, 1.05, 1.1, 1.15]
            .iter()
            .map(|&r| consts(1.0, r))
            .collect();
        let weights = vec![0.2; 5];
        let mut previous = f64::INFINITY;
        for l in 1..=5 {
            let pred = rate_prediction(
                &constants,
                &weights,
                3,
                1.0,
                1.0,
                1.0,
                10.0,
                Variant::Partial { cohort_size: l },
            )
            .unwrap();
            assert!(
                pred.kappa <= previous + 1e-15,
                "kappa grew from {previous} at cohort {l}: {}",
                pred.kappa
            );
            previous = pred.kappa;
        }

        // Full cohort equals full participation under uniform weights.
        let full = rate_prediction(
            &constants,
            &weights,
            3,
            1.0,
            1.0,
            1.0,
            10.0,
            Variant::Partial { cohort_size: 5 },
        )
        .unwrap();
        let exact =
            rate_prediction(&constants, &weights, 3, 1.0, 1.0, 1.0, 10.0, Variant::Exact).unwrap();
        assert!((full.kappa - exact.kappa).abs() < 1e-14);
    }

    #[test]
    fn no_variance_variant_reports_both_beta2_forms() {
        let mut c = consts(1.0, 1.05);
        c.stoch_grad_at_opt_sq = 0.5;
        c.max_restricted_grad_sq = 0.2;
        let pred = rate_prediction(
            &[c],
            &[1.0],
            2,
            1.0,
            1.0,
            1.0,
            1.0,
            Variant::NoVarianceBound,
        )
        .unwrap();
        let alt = pred.beta2_alt.as_ref().expect("alt form reported");
        assert_eq!(alt.len(), 1);
        let (p, a) = beta2_no_variance(&consts(1.0, 1.05), 1.0, 1.0);
        assert!((pred.beta2[0] - p).abs() < 1e-14);
        assert!((alt[0] - a).abs() < 1e-14);
        // Hand-check nu: amp = 4, worst = 8 b1 / 1, restricted = 0.2,
        // bracket = b1 (2 + 0) + inv_gap, stoch = 0.5.
        let b1 = 1.05 / 0.95;
        let inv_gap = 4.0 / (1.05 * 0.95);
        let expected_nu = 4.0 * (8.0 * b1 * 0.2 + (2.0 * b1 + inv_gap) * 0.5);
        assert!(
            (pred.nu - expected_nu).abs() < 1e-12,
            "nu {} vs {expected_nu}",
            pred.nu
        );
    }

    #[test]
    fn nu_hand_value_exact_variant_eta1_one() {
        // Single client, eta1 = 1, theta = 1:
        // worst = 8 b1 / rho^2 + inv_gap, restricted term weighted by 1;
        // bracket = 2 b1 theta^2 / rho + inv_gap times sigma^2.
        let mut c = consts(1.0, 1.2);
        c.sigma_sq = 0.3;
        c.max_restricted_grad_sq = 0.7;
        let pred = rate_prediction(&[c], &[1.0], 1, 1.0, 1.0, 1.0, 1.0, Variant::Exact).unwrap();
        let b1 = 1.5;
        let inv_gap = 4.0 / (1.2 * 0.8);
        let expected = 4.0 * ((8.0 * b1 + inv_gap) * 0.7 + (2.0 * b1 + inv_gap) * 0.3);
        assert!((pred.nu - expected).abs() < 1e-12, "nu {}", pred.nu);
    }

    #[test]
    fn partial_variance_scales_with_cohort_not_weights() {
        // With sigma > 0, the partial-participation noise term divides the
        // total client variance by L: halving L doubles that part of nu.
        let mut c = consts(1.0, 1.02);
        c.sigma_sq = 1.0;
        let constants = vec![c; 4];
        let weights = vec![0.25; 4];
        let nu_at = |l: usize| {
            rate_prediction(
                &constants,
                &weights,
                1,
                1.0,
                1.0,
                1.0,
                1.0,
                Variant::Partial { cohort_size: l },
            )
            .unwrap()
            .nu
        };
        let nu2 = nu_at(2);
        let nu4 = nu_at(4);
        assert!((nu2 / nu4 - 2.0).abs() < 1e-12, "ratio {}", nu2 / nu4);
    }

    #[test]
    fn theta_optimizer_beats_fixed_choices() {
        let mut c = consts(1.0, 1.05);
        c.sigma_sq = 0.2;
        c.grad_at_opt_sq = 0.1;
        c.max_restricted_grad_sq = 0.05;
        let constants = [c];
        let weights = [1.0];
        let best = optimize_theta(&constants, &weights, 2, 1.0, 1.0, 1.0, Variant::Exact).unwrap();
        for theta in [1.0, 10.0] {
            let fixed = rate_prediction(
                &constants,
                &weights,
                2,
                1.0,
                1.0,
                1.0,
                theta,
                Variant::Exact,
            )
            .unwrap();
            assert!(
                best.residual_bound <= fixed.residual_bound + 1e-15,
                "optimizer lost to theta = {theta}"
            );
        }
    }

    #[test]
    fn corollary_bound_shape() {
        let pred = RatePrediction {
            variant: Variant::Exact,
            k_iters: 1,
            eta1: 1.0,
            eta2: 1.0,
            eta3: 1.0,
            theta: 1.0,
            beta1: vec![],
            beta2: vec![],
            beta2_alt: None,
            mu_per_client: vec![],
            kappa: 0.5,
            nu: 0.0,
            residual_bound: 0.3,
            warnings: vec![],
        };
        // round = 1: kappa^2 = 0.25; bound = f* + g/(2 rho) + rho (0.25 d + 0.3).
        let got = corollary_objective_bound(&pred, 2.0, 0.8, 1.5, 4.0, 1);
        let expected = 1.5 + 0.8 / 4.0 + 2.0 * (0.25 * 4.0 + 0.3);
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn measured_constants_match_direct_estimates() {
        let n = 6;
        let l = 5;
        let tau = 1;
        let mut r = rng::stream(300, "test.constants", 0, 0);
        let data = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let targets = DVector::from_fn(l, |_, _| r.sample::<f64, _>(StandardNormal));
        let dict = Arc::new(Dictionary::standard_basis(n));
        let obj = Objective::new(
            LossKind::Squared,
            ClientDataset::new(data.clone(), targets, 2, 0).unwrap(),
            dict.clone(),
        )
        .unwrap();
        let truth = crate::sparse_ops::best_sparse_approx(
            &DVector::from_fn(n, |i, _| if i == 2 { 1.0 } else { 0.0 }),
            tau,
            &dict,
        )
        .unwrap();

        let mut rng1 = rng::stream(301, "test.constants", 1, 0);
        let got = compute_client_constants(
            &obj,
            tau,
            &truth,
            CurvatureMode::Exhaustive,
            None,
            &mut rng1,
        )
        .unwrap();

        let mut rng2 = rng::stream(301, "test.constants", 1, 0);
        let at4 = obj
            .estimate_rsc_rss(4, CurvatureMode::Exhaustive, None, &mut rng2)
            .unwrap();
        assert_eq!(got.rho_minus_4tau, at4.rho_minus);
        assert_eq!(got.rho_plus_bar_4tau, at4.rho_plus_bar);

        let grad = obj.full_gradient(&truth.signal);
        assert_eq!(got.grad_at_opt_sq, grad.norm_squared());

        // Best 4-entry restricted gradient on the standard basis = sum of
        // the 4 largest squared entries.
        let mut sq: Vec<f64> = grad.iter().map(|v| v * v).collect();
        sq.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected: f64 = sq[..4].iter().sum();
        assert!((got.max_restricted_grad_sq - expected).abs() < 1e-14);

        // Exhaustive batch enumeration for the stochastic gradient moment.
        let mut acc = 0.0;
        let mut count = 0.0;
        crate::combin::for_each_combination(l, 2, |b| {
            acc += obj.stochastic_gradient(&truth.signal, b).norm_squared();
            count += 1.0;
        });
        assert!((got.stoch_grad_at_opt_sq - acc / count).abs() < 1e-13);
    }

    #[test]
    fn rates_json_is_valid() {
        let c = consts(1.0, 1.02);
        let pred = rate_prediction(&[c], &[1.0], 2, 1.0, 1.0, 1.0, 10.0, Variant::Exact).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rates.json");
        write_rates_json(&path, &[pred]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert!(parsed[0]["kappa"].is_number());
        assert!(parsed[0]["mu_per_client"].is_array());
    }
}
