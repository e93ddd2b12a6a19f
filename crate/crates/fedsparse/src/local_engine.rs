//! The per-client local update: StoGradMP iterations over a dictionary.
//!
//! One local iteration from the current iterate `x`:
//! 1. draw a mini-batch and take its stochastic gradient `r`,
//! 2. identify a `2*tau`-sparse gradient proxy support (approximation
//!    factor `eta1`),
//! 3. merge it with the carried support (at most `3*tau` atoms),
//! 4. solve the objective restricted to the merged span — exactly, or
//!    inexactly to within `delta` of the restricted minimizer,
//! 5. threshold back to `tau` atoms (factor `eta2`) and project onto the
//!    chosen span; optionally pull back into an l2 ball.
//!
//! Multiclass objectives are rejected: the sparse support structure here is
//! per-atom in a single signal block.

use crate::error::{Error, Result};
use crate::objectives::{LossKind, Objective};
use crate::sparse_ops::{approx_project, best_sparse_approx, union_supports, SparseEstimate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Iteration cap for the inexact restricted solvers.
const GD_MAX_ITERS: usize = 50_000;
const NEWTON_MAX_ITERS: usize = 100;

/// How the restricted subproblem (step 4) is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Subproblem {
    /// Closed-form least squares; squared loss only.
    Exact,
    /// Fixed-step gradient descent, run until the iterate is certified
    /// within `delta` of the restricted minimizer.
    GradientDescent { delta: f64 },
    /// Damped Newton steps with the same `delta` certificate.
    Newton { delta: f64 },
}

/// What the carried support starts from at the beginning of a local run.
///
/// The merge step solves over the union of the gradient support and the
/// carried support, and the contraction argument needs the incoming
/// iterate's own support inside that union — otherwise the first local
/// solve of a round may discard the aggregate model instead of refining
/// it. [`CarrySupport::GlobalSupport`] provides exactly that and is the
/// default; starting empty is kept for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarrySupport {
    /// Start from the empty support.
    Empty,
    /// Start from the best `tau`-term support of the incoming global model.
    GlobalSupport,
}

#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Number of StoGradMP iterations per round.
    pub k_iters: usize,
    /// Target sparsity.
    pub tau: usize,
    /// Approximation factor for the gradient-support step (>= 1).
    pub eta1: f64,
    /// Approximation factor for the thresholding step (>= 1).
    pub eta2: f64,
    pub subproblem: Subproblem,
    /// Radius for the optional l2-ball projection after thresholding.
    pub ball_radius: Option<f64>,
    pub carry_support: CarrySupport,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            k_iters: 3,
            tau: 10,
            eta1: 1.0,
            eta2: 1.0,
            subproblem: Subproblem::Exact,
            ball_radius: None,
            carry_support: CarrySupport::GlobalSupport,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_iters == 0 {
            return Err(Error::InvalidArgument("k_iters must be >= 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::InvalidArgument("tau must be >= 1".into()));
        }
        if !(self.eta1 >= 1.0) || !(self.eta2 >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "approximation factors must be >= 1, got eta1={}, eta2={}",
                self.eta1, self.eta2
            )));
        }
        match self.subproblem {
            Subproblem::Exact => {}
            Subproblem::GradientDescent { delta } | Subproblem::Newton { delta } => {
                if !(delta > 0.0) || !delta.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "subproblem delta must be positive and finite, got {delta}"
                    )));
                }
            }
        }
        if let Some(r) = self.ball_radius {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "ball_radius must be positive and finite, got {r}"
                )));
            }
        }
        Ok(())
    }
}

/// Diagnostics for one local StoGradMP iteration.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// Support chosen from the stochastic gradient (size <= 2*tau).
    pub grad_support: Vec<usize>,
    /// Merged support the subproblem was solved over (size <= 3*tau).
    pub solve_support: Vec<usize>,
    /// Support of the iterate after thresholding (size <= tau).
    pub support: Vec<usize>,
    /// Full local objective at the new iterate.
    pub objective: f64,
    /// Certified distance bound to the restricted minimizer (0 for exact).
    pub subproblem_certificate: f64,
    pub subproblem_iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LocalTrace {
    pub iterations: Vec<IterationTrace>,
}

/// Result of one restricted solve: the minimizer (or a certified
/// approximation) of the objective over the span of the support's atoms.
#[derive(Debug, Clone)]
pub struct RestrictedSolution {
    /// Solution as a signal-space vector (lies in the restricted span).
    pub signal: DVector<f64>,
    /// Coefficients in support order.
    pub coefficients: DVector<f64>,
    /// Certified bound on the signal-space distance to the true restricted
    /// minimizer. Exact solves certify 0. For logistic losses the bound uses
    /// the curvature at the final iterate, which is exact only for quadratic
    /// objectives.
    pub certificate: f64,
    pub iterations: usize,
    pub rank_deficient: bool,
}

/// Minimizes the client objective over `span(atoms[support])`.
///
/// `warm` optionally seeds the iterative solvers with coefficients in
/// support order (ignored by the exact path).
pub fn solve_restricted(
    obj: &Objective,
    support: &[usize],
    method: Subproblem,
    warm: Option<&DVector<f64>>,
) -> Result<RestrictedSolution> {
    if matches!(obj.kind(), LossKind::MulticlassLogistic { .. }) {
        return Err(Error::Unsupported(
            "restricted solves support squared and binary logistic losses only".into(),
        ));
    }
    if support.is_empty() {
        return Ok(RestrictedSolution {
            signal: DVector::zeros(obj.dict().n()),
            coefficients: DVector::zeros(0),
            certificate: 0.0,
            iterations: 0,
            rank_deficient: false,
        });
    }
    let design = obj.restricted_design(support);
    match method {
        Subproblem::Exact => {
            if obj.kind() != LossKind::Squared {
                return Err(Error::Unsupported(
                    "exact restricted solve requires the squared loss".into(),
                ));
            }
            let (coeffs, rank_deficient) =
                crate::sparse_ops::lstsq_min_norm(&design, &obj.dataset().targets);
            let signal = obj.dict().synthesize(support, &coeffs);
            Ok(RestrictedSolution {
                signal,
                coefficients: coeffs,
                certificate: 0.0,
                iterations: 1,
                rank_deficient,
            })
        }
        Subproblem::GradientDescent { delta } => {
            iterative_restricted(obj, support, &design, delta, warm, IterMethod::Gd)
        }
        Subproblem::Newton { delta } => {
            iterative_restricted(obj, support, &design, delta, warm, IterMethod::Newton)
        }
    }
}

enum IterMethod {
    Gd,
    Newton,
}

/// Shared machinery for the coefficient-space iterative solvers.
///
/// The subproblem is `phi(c) = f(A_S c)` with gradient `design^T w(u) / l`
/// for per-sample weights `w` of the loss at scores `u = design * c`. The
/// `delta` certificate converts the projected signal-space gradient into a
/// distance via restricted strong convexity of the pencil against the atom
/// Gram: `||b - b*|| <= ||P_V grad f(b)|| / rho_minus`.
fn iterative_restricted(
    obj: &Objective,
    support: &[usize],
    design: &DMatrix<f64>,
    delta: f64,
    warm: Option<&DVector<f64>>,
    method: IterMethod,
) -> Result<RestrictedSolution> {
    let l = design.nrows() as f64;
    let dim = support.len();
    let y = &obj.dataset().targets;
    let gram = design.tr_mul(design) / l;
    let whiten = obj.support_whitener(support);

    // Loss-specific pieces. Weights give the per-sample gradient factor;
    // hessian_scale gives the per-sample curvature factor (both at scores u).
    let is_squared = obj.kind() == LossKind::Squared;
    let loss_at = |u: &DVector<f64>| -> f64 {
        if is_squared {
            (u - y).norm_squared() / (2.0 * l)
        } else {
            (0..u.len())
                .map(|j| log1p_exp(-2.0 * y[j] * u[j]))
                .sum::<f64>()
                / l
        }
    };
    let weights_at = |u: &DVector<f64>| -> DVector<f64> {
        if is_squared {
            u - y
        } else {
            DVector::from_fn(u.len(), |j, _| -2.0 * y[j] * sigmoid(2.0 * y[j] * u[j]))
        }
    };
    let curvature_at = |u: &DVector<f64>| -> Option<DVector<f64>> {
        if is_squared {
            None // constant curvature: the gram itself
        } else {
            Some(DVector::from_fn(u.len(), |j, _| {
                let s = sigmoid(2.0 * y[j] * u[j]);
                4.0 * s * (1.0 - s)
            }))
        }
    };
    let hessian_at = |u: &DVector<f64>| -> DMatrix<f64> {
        match curvature_at(u) {
            None => gram.clone(),
            Some(lam) => {
                let mut scaled = design.clone();
                for j in 0..scaled.nrows() {
                    scaled.row_mut(j).scale_mut(lam[j]);
                }
                design.tr_mul(&scaled) / l
            }
        }
    };

    // The data Gram dominates the coefficient-space Hessian for both losses
    // (logistic per-sample curvature is at most 1), so 1/lambda_max is a
    // safe descent step.
    let lip = symmetric_eigen_range(&gram).1;
    let mut c = match warm {
        Some(w) => {
            debug_assert_eq!(w.len(), dim);
            w.clone()
        }
        None => DVector::zeros(dim),
    };

    let grad_scale = y.amax().max(1.0);
    let mut iterations = 0;
    let certificate = loop {
        let u = design * &c;
        let grad_phi = design.tr_mul(&weights_at(&u)) / l;

        // Certified distance to the restricted minimizer.
        let pgrad_sq = match &whiten {
            None => grad_phi.norm_squared(),
            Some(w) => w.tr_mul(&grad_phi).norm_squared(),
        };
        let rho_minus = pencil_min(&hessian_at(&u), whiten.as_ref());
        let cert = if pgrad_sq.sqrt() <= 1e-15 * grad_scale {
            0.0
        } else if rho_minus > 0.0 {
            pgrad_sq.sqrt() / rho_minus
        } else {
            f64::INFINITY
        };
        if cert <= delta {
            break cert;
        }
        let max_iters = match method {
            IterMethod::Gd => GD_MAX_ITERS,
            IterMethod::Newton => NEWTON_MAX_ITERS,
        };
        if iterations >= max_iters {
            return Err(Error::SubproblemAccuracy {
                target: delta,
                achieved: cert,
                iters: iterations,
            });
        }

        match method {
            IterMethod::Gd => {
                if lip <= 0.0 {
                    // Flat subproblem with a nonzero gradient cannot occur
                    // for these losses; a zero design means c = 0 is optimal.
                    break cert;
                }
                c -= grad_phi / lip;
            }
            IterMethod::Newton => {
                let h = hessian_at(&u);
                let step = newton_direction(&h, &grad_phi);
                // Backtrack if the full step overshoots (possible for the
                // logistic loss far from the optimum).
                let f0 = loss_at(&u);
                let mut t = 1.0;
                let mut accepted = false;
                for _ in 0..40 {
                    let trial = &c - &step * t;
                    if loss_at(&(design * &trial)) <= f0 {
                        c = trial;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    // No descent along the Newton direction: already at the
                    // numerical floor.
                    break cert;
                }
            }
        }
        iterations += 1;
    };

    let signal = obj.dict().synthesize(support, &c);
    Ok(RestrictedSolution {
        signal,
        coefficients: c,
        certificate,
        iterations,
        rank_deficient: false,
    })
}

/// Newton direction `H^{-1} g`, with an escalating ridge when the Hessian
/// is numerically singular.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = h.clone().cholesky() {
        return chol.solve(g);
    }
    let scale = (h.trace() / h.nrows() as f64).max(f64::MIN_POSITIVE);
    let mut ridge = 1e-10 * scale;
    loop {
        let damped = h + DMatrix::identity(h.nrows(), h.ncols()) * ridge;
        if let Some(chol) = damped.cholesky() {
            return chol.solve(g);
        }
        ridge *= 100.0;
        if ridge > 1e3 * scale {
            // Fully dominated by the ridge: effectively a gradient step.
            return g / ridge;
        }
    }
}

fn symmetric_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = ((m + m.transpose()) * 0.5).symmetric_eigen().eigenvalues;
    (ev.min(), ev.max())
}

/// Minimum generalized eigenvalue of the pencil (h, atom Gram), computed
/// through the pre-factored whitener (None means the Gram is the identity).
fn pencil_min(h: &DMatrix<f64>, whiten: Option<&DMatrix<f64>>) -> f64 {
    match whiten {
        None => symmetric_eigen_range(h).0,
        Some(w) => symmetric_eigen_range(&(w.tr_mul(h) * w)).0,
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        let t = (-z).exp();
        t / (1.0 + t)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Runs `k_iters` StoGradMP iterations on one client from the global model
/// `x_init`, drawing mini-batches from `rng`. Returns the final sparse
/// iterate and per-iteration diagnostics.
pub fn local_stogradmp(
    obj: &Objective,
    x_init: &DVector<f64>,
    cfg: &LocalConfig,
    rng: &mut impl Rng,
) -> Result<(SparseEstimate, LocalTrace)> {
    cfg.validate()?;
    if matches!(obj.kind(), LossKind::MulticlassLogistic { .. }) {
        return Err(Error::Unsupported(
            "local StoGradMP supports squared and binary logistic losses only".into(),
        ));
    }
    let dict = obj.dict();
    let d = dict.num_atoms();
    if cfg.tau > d {
        return Err(Error::InvalidArgument(format!(
            "tau = {} exceeds the dictionary's {d} atoms",
            cfg.tau
        )));
    }
    if x_init.len() != dict.n() {
        return Err(Error::Dimension {
            context: "local model vector vs dictionary dimension",
            expected: dict.n(),
            found: x_init.len(),
        });
    }

    let mut x = x_init.clone();
    // The carried support Lambda, plus the sparse representation of the
    // current iterate when we have one (used to warm-start solves).
    let mut current: Option<SparseEstimate> = None;
    let mut lambda: Vec<usize> = match cfg.carry_support {
        CarrySupport::Empty => Vec::new(),
        CarrySupport::GlobalSupport => {
            if x.iter().all(|&v| v == 0.0) {
                Vec::new()
            } else {
                let est = best_sparse_approx(&x, cfg.tau, dict)?;
                let support = est.support.clone();
                current = Some(est);
                support
            }
        }
    };

    let mut trace = LocalTrace::default();
    for _ in 0..cfg.k_iters {
        let batch = obj.sample_batch(rng);
        let r = obj.stochastic_gradient(&x, &batch);
        let grad_tau = (2 * cfg.tau).min(d);
        let gamma = approx_project(&r, grad_tau, dict, cfg.eta1)?;
        let grad_support = gamma.estimate.support;
        let solve_support = union_supports(&grad_support, &lambda);
        debug_assert!(solve_support.len() <= 3 * cfg.tau);

        let warm = current
            .as_ref()
            .and_then(|est| embed_coefficients(est, &solve_support));
        let sol = solve_restricted(obj, &solve_support, cfg.subproblem, warm.as_ref())?;

        let thresh = approx_project(&sol.signal, cfg.tau, dict, cfg.eta2)?;
        let mut est = thresh.estimate;
        if let Some(radius) = cfg.ball_radius {
            let norm = est.signal.norm();
            if norm > radius {
                est.scale(radius / norm);
            }
        }
        lambda = est.support.clone();
        x = est.signal.clone();

        trace.iterations.push(IterationTrace {
            grad_support,
            solve_support,
            support: lambda.clone(),
            objective: obj.loss(&x),
            subproblem_certificate: sol.certificate,
            subproblem_iterations: sol.iterations,
        });
        current = Some(est);
    }

    // k_iters >= 1, so current is always set by the loop.
    let est = current.expect("at least one local iteration");
    Ok((est, trace))
}

/// Embeds a sparse estimate's coefficients into a larger support's
/// coordinate order; None when the estimate uses atoms outside `support`.
fn embed_coefficients(est: &SparseEstimate, support: &[usize]) -> Option<DVector<f64>> {
    let mut out = DVector::zeros(support.len());
    for (k, &atom) in est.support.iter().enumerate() {
        let pos = support.binary_search(&atom).ok()?;
        out[pos] = est.coefficients[k];
    }
    Some(out)
}
