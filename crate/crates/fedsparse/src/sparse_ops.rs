//! Sparse approximation operators over a dictionary.
//!
//! Three projections drive the whole optimizer: `orthogonal_project` (least
//! squares onto the span of a fixed atom set), `best_sparse_approx` (the
//! optimal `tau`-atom approximation), and `approx_project` (an
//! `eta`-approximate version of the latter that is exact for structured
//! dictionaries and greedy for general ones). `project_l2_ball` handles the
//! norm constraint.

use crate::combin;
use crate::dictionary::{Dictionary, DictionaryKind};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Exhaustive support enumeration is refused beyond this many candidates.
pub const EXHAUSTIVE_CAP: usize = 200_000;

/// A signal together with its dictionary representation.
///
/// Invariants: `support` is strictly increasing with entries below the atom
/// count, `support.len() == coefficients.len() <= capacity.max(support.len())`,
/// and `signal == sum_k coefficients[k] * atom[support[k]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    pub signal: DVector<f64>,
    pub support: Vec<usize>,
    pub coefficients: DVector<f64>,
    /// The sparsity budget this estimate was built under.
    pub capacity: usize,
    /// Set when the restricted least-squares system was rank deficient and
    /// the minimum-norm solution was taken.
    pub rank_deficient: bool,
}

impl SparseEstimate {
    /// The all-zeros estimate in `R^n` with the given sparsity budget.
    pub fn zero(n: usize, capacity: usize) -> Self {
        SparseEstimate {
            signal: DVector::zeros(n),
            support: Vec::new(),
            coefficients: DVector::zeros(0),
            capacity,
            rank_deficient: false,
        }
    }

    pub fn new(
        signal: DVector<f64>,
        support: Vec<usize>,
        coefficients: DVector<f64>,
        capacity: usize,
    ) -> Result<Self> {
        if support.len() != coefficients.len() {
            return Err(Error::Dimension {
                context: "SparseEstimate support vs coefficients",
                expected: support.len(),
                found: coefficients.len(),
            });
        }
        if !support.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "SparseEstimate support must be strictly increasing".into(),
            ));
        }
        Ok(SparseEstimate {
            signal,
            support,
            coefficients,
            capacity,
            rank_deficient: false,
        })
    }

    /// Rescales the estimate by `factor` (signal and coefficients together,
    /// so the representation invariant is preserved).
    pub fn scale(&mut self, factor: f64) {
        self.signal *= factor;
        self.coefficients *= factor;
    }

    /// Checks the representation invariant against a dictionary.
    pub fn consistent_with(&self, dict: &Dictionary, tol: f64) -> bool {
        if !self.support.windows(2).all(|w| w[0] < w[1]) {
            return false;
        }
        if self.support.iter().any(|&j| j >= dict.num_atoms()) {
            return false;
        }
        let rebuilt = dict.synthesize(&self.support, &self.coefficients);
        (&rebuilt - &self.signal).norm() <= tol * self.signal.norm().max(1.0)
    }
}

/// Result of an approximate projection.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub estimate: SparseEstimate,
    /// `||w - estimate.signal||_2`.
    pub residual_norm: f64,
    /// Whether the eta-approximation inequality was verified against the
    /// exhaustive optimum (always true on the exact paths).
    pub eta_certified: bool,
}

fn validate_support(support: &[usize], d: usize) -> Result<Vec<usize>> {
    let mut s = support.to_vec();
    s.sort_unstable();
    s.dedup();
    if let Some(&j) = s.iter().find(|&&j| j >= d) {
        return Err(Error::InvalidArgument(format!(
            "support index {j} out of range for {d} atoms"
        )));
    }
    Ok(s)
}

/// Orthogonal projection of `w` onto the span of the atoms in `support`
/// (duplicate or unsorted indices are normalized first).
///
/// Standard basis: coordinate restriction. Orthonormal atoms: analysis
/// coefficients. General atoms: least squares via SVD; a rank-deficient
/// system takes the minimum-norm solution and sets `rank_deficient`.
pub fn orthogonal_project(
    w: &DVector<f64>,
    support: &[usize],
    dict: &Dictionary,
) -> Result<SparseEstimate> {
    if w.len() != dict.n() {
        return Err(Error::Dimension {
            context: "orthogonal_project signal length",
            expected: dict.n(),
            found: w.len(),
        });
    }
    let support = validate_support(support, dict.num_atoms())?;
    if support.is_empty() {
        return Ok(SparseEstimate::zero(dict.n(), 0));
    }
    let capacity = support.len();
    match dict.kind() {
        DictionaryKind::StandardBasis => {
            let coefficients = DVector::from_fn(support.len(), |k, _| w[support[k]]);
            let signal = dict.synthesize(&support, &coefficients);
            Ok(SparseEstimate {
                signal,
                support,
                coefficients,
                capacity,
                rank_deficient: false,
            })
        }
        DictionaryKind::Orthonormal => {
            let atoms = dict.atoms_for(&support);
            let coefficients = atoms.tr_mul(w);
            let signal = &atoms * &coefficients;
            Ok(SparseEstimate {
                signal,
                support,
                coefficients,
                capacity,
                rank_deficient: false,
            })
        }
        DictionaryKind::General => {
            let atoms = dict.atoms_for(&support);
            let (coefficients, rank_deficient) = lstsq_min_norm(&atoms, w);
            let signal = &atoms * &coefficients;
            Ok(SparseEstimate {
                signal,
                support,
                coefficients,
                capacity,
                rank_deficient,
            })
        }
    }
}

/// Minimum-norm least squares `argmin ||M c - w||`, flagging rank deficiency.
pub(crate) fn lstsq_min_norm(m: &DMatrix<f64>, w: &DVector<f64>) -> (DVector<f64>, bool) {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * m.nrows().max(m.ncols()) as f64 * f64::EPSILON;
    let rank_deficient = svd.singular_values.iter().any(|&s| s <= eps);
    let solution = svd
        .solve(w, eps)
        .expect("SVD factors were requested, solve cannot fail");
    (solution, rank_deficient)
}

/// The best `tau`-atom approximation of `w` (ties broken toward lower
/// indices). Exact by magnitude sorting for standard/orthonormal
/// dictionaries; exhaustive over supports for general ones, refusing beyond
/// [`EXHAUSTIVE_CAP`] candidates.
pub fn best_sparse_approx(
    w: &DVector<f64>,
    tau: usize,
    dict: &Dictionary,
) -> Result<SparseEstimate> {
    if w.len() != dict.n() {
        return Err(Error::Dimension {
            context: "best_sparse_approx signal length",
            expected: dict.n(),
            found: w.len(),
        });
    }
    let d = dict.num_atoms();
    if tau == 0 {
        return Ok(SparseEstimate::zero(dict.n(), 0));
    }
    let tau_eff = tau.min(d);
    match dict.kind() {
        DictionaryKind::StandardBasis | DictionaryKind::Orthonormal => {
            let support = top_by_magnitude(&dict.correlate(w), tau_eff);
            let mut est = orthogonal_project(w, &support, dict)?;
            est.capacity = tau;
            Ok(est)
        }
        DictionaryKind::General => {
            let count = combin::count_combinations(d, tau_eff);
            if count > EXHAUSTIVE_CAP as u128 {
                return Err(Error::ExhaustiveCap {
                    needed: count,
                    cap: EXHAUSTIVE_CAP,
                });
            }
            let mut best: Option<(f64, Vec<usize>)> = None;
            combin::for_each_combination(d, tau_eff, |support| {
                let atoms = dict.atoms_for(support);
                let (c, _) = lstsq_min_norm(&atoms, w);
                let residual = (w - atoms * c).norm_squared();
                // Strict improvement keeps the lexicographically first
                // support on ties.
                if best.as_ref().is_none_or(|(r, _)| residual < *r) {
                    best = Some((residual, support.to_vec()));
                }
            });
            let (_, support) = best.expect("at least one support was enumerated");
            let mut est = orthogonal_project(w, &support, dict)?;
            est.capacity = tau;
            Ok(est)
        }
    }
}

/// Indices of the `tau` largest magnitudes, ties toward the lower index;
/// returned sorted ascending. Total order on the magnitudes, so inputs from
/// a diverged iteration (infinities, NaN) still threshold deterministically
/// instead of panicking.
fn top_by_magnitude(values: &DVector<f64>, tau: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut support = order[..tau.min(order.len())].to_vec();
    support.sort_unstable();
    support
}

/// `eta`-approximate best `tau`-atom projection.
///
/// Standard and orthonormal dictionaries take the exact path (certified for
/// every `eta >= 1`). General dictionaries run orthogonal matching pursuit
/// with a full least-squares re-solve after each atom selection; the eta
/// inequality `||w - P w|| <= eta * ||w - H_tau(w)||` is certified against
/// the exhaustive optimum when enumeration is affordable, otherwise
/// `eta_certified` stays false.
pub fn approx_project(
    w: &DVector<f64>,
    tau: usize,
    dict: &Dictionary,
    eta: f64,
) -> Result<ProjectionResult> {
    if !(eta >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "approximation factor eta must be >= 1, got {eta}"
        )));
    }
    if w.len() != dict.n() {
        return Err(Error::Dimension {
            context: "approx_project signal length",
            expected: dict.n(),
            found: w.len(),
        });
    }
    if tau == 0 {
        return Ok(ProjectionResult {
            estimate: SparseEstimate::zero(dict.n(), 0),
            residual_norm: w.norm(),
            eta_certified: true,
        });
    }
    match dict.kind() {
        DictionaryKind::StandardBasis | DictionaryKind::Orthonormal => {
            let estimate = best_sparse_approx(w, tau, dict)?;
            let residual_norm = (w - &estimate.signal).norm();
            Ok(ProjectionResult {
                estimate,
                residual_norm,
                eta_certified: true,
            })
        }
        DictionaryKind::General => {
            let mut estimate = omp(w, tau, dict)?;
            estimate.capacity = tau;
            let residual_norm = (w - &estimate.signal).norm();
            let d = dict.num_atoms();
            let affordable = combin::count_combinations(d, tau.min(d)) <= EXHAUSTIVE_CAP as u128;
            let eta_certified = if affordable {
                let opt = best_sparse_approx(w, tau, dict)?;
                let opt_residual = (w - &opt.signal).norm();
                residual_norm <= eta * opt_residual + 1e-12 * w.norm().max(1.0)
            } else {
                false
            };
            Ok(ProjectionResult {
                estimate,
                residual_norm,
                eta_certified,
            })
        }
    }
}

/// Orthogonal matching pursuit: greedily add the atom with the largest
/// normalized correlation to the current residual, re-solving the full
/// least-squares problem on the grown support each step.
fn omp(w: &DVector<f64>, tau: usize, dict: &Dictionary) -> Result<SparseEstimate> {
    let d = dict.num_atoms();
    let mut support: Vec<usize> = Vec::with_capacity(tau.min(d));
    let mut residual = w.clone();
    let mut estimate = SparseEstimate::zero(dict.n(), tau);
    for _ in 0..tau.min(d) {
        let correlations = dict.correlate(&residual);
        let mut best: Option<(f64, usize)> = None;
        for j in 0..d {
            if support.contains(&j) {
                continue;
            }
            let score = correlations[j].abs() / dict.atom_norms()[j];
            // Strictly-greater keeps the lowest index on ties.
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, j));
            }
        }
        let Some((score, pick)) = best else { break };
        if score <= 1e-14 * w.norm().max(1.0) {
            break; // residual carries no atom correlation worth chasing
        }
        support.push(pick);
        support.sort_unstable();
        estimate = orthogonal_project(w, &support, dict)?;
        residual = w - &estimate.signal;
    }
    Ok(estimate)
}

/// Euclidean projection onto the ball of the given radius (radius must be
/// positive; enforced by config validation upstream).
pub fn project_l2_ball(u: &DVector<f64>, radius: f64) -> DVector<f64> {
    debug_assert!(radius > 0.0);
    let norm = u.norm();
    if norm <= radius {
        u.clone()
    } else {
        u * (radius / norm)
    }
}

/// Merges two sorted supports into a sorted, deduplicated union.
pub fn union_supports(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// F1 score between an estimated support and the true one (1.0 when both are
/// empty, 0.0 when exactly one is).
pub fn support_f1(estimate: &[usize], truth: &[usize]) -> f64 {
    if estimate.is_empty() && truth.is_empty() {
        return 1.0;
    }
    if estimate.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let hits = estimate
        .iter()
        .filter(|j| truth.binary_search(j).is_ok())
        .count() as f64;
    let precision = hits / estimate.len() as f64;
    let recall = hits / truth.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_vec(n: usize, seed: u64) -> DVector<f64> {
        let mut r = rng::stream(seed, "test.vec", 0, 0);
        DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal))
    }

    fn random_orthonormal(n: usize, d: usize, seed: u64) -> Dictionary {
        let mut r = rng::stream(seed, "test.orth", 0, 0);
        let m = DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal));
        let q = m.qr().q().columns(0, d).into_owned();
        Dictionary::from_matrix(q).unwrap()
    }

    fn general_dict(n: usize, d: usize, seed: u64) -> Dictionary {
        let mut r = rng::stream(seed, "test.gen", 0, 0);
        Dictionary::gaussian(n, d, None, &mut r).unwrap()
    }

    #[test]
    fn orthogonal_project_standard_is_coordinate_restriction() {
        let dict = Dictionary::standard_basis(6);
        let w = DVector::from_vec(vec![3.0, -1.0, 0.5, 2.0, -4.0, 1.0]);
        let est = orthogonal_project(&w, &[1, 4], &dict).unwrap();
        assert_eq!(est.support, vec![1, 4]);
        assert_eq!(est.coefficients, DVector::from_vec(vec![-1.0, -4.0]));
        assert_eq!(est.signal[1], -1.0);
        assert_eq!(est.signal[4], -4.0);
        assert_eq!(est.signal.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn orthogonal_project_matches_normal_equations() {
        // Independent oracle: solve the normal equations directly.
        let dict = general_dict(10, 14, 21);
        let w = gaussian_vec(10, 22);
        let support = [2, 5, 11];
        let est = orthogonal_project(&w, &support, &dict).unwrap();
        let atoms = dict.atoms_for(&support);
        let gram = atoms.tr_mul(&atoms);
        let rhs = atoms.tr_mul(&w);
        let oracle = gram.cholesky().unwrap().solve(&rhs);
        assert!((&est.coefficients - &oracle).norm() < 1e-10);
        // Residual is orthogonal to every selected atom.
        let residual = &w - &est.signal;
        for &j in &support {
            assert!(dict.atoms().column(j).dot(&residual).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_project_normalizes_support_input() {
        let dict = Dictionary::standard_basis(5);
        let w = gaussian_vec(5, 23);
        let a = orthogonal_project(&w, &[3, 1, 3], &dict).unwrap();
        let b = orthogonal_project(&w, &[1, 3], &dict).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.signal, b.signal);
    }

    #[test]
    fn orthogonal_project_rank_deficiency_takes_min_norm() {
        // Two identical atoms: the system is rank deficient; SVD gives the
        // minimum-norm coefficient split.
        let mut atoms = DMatrix::zeros(4, 3);
        atoms[(0, 0)] = 1.0;
        atoms[(0, 1)] = 1.0;
        atoms[(1, 2)] = 1.0;
        let dict = Dictionary::from_matrix(atoms).unwrap();
        let w = DVector::from_vec(vec![2.0, 0.0, 0.0, 0.0]);
        let est = orthogonal_project(&w, &[0, 1], &dict).unwrap();
        assert!(est.rank_deficient);
        assert!((est.signal[0] - 2.0).abs() < 1e-12);
        // Min-norm splits the weight evenly.
        assert!((est.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((est.coefficients[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn best_sparse_approx_standard_matches_brute_force() {
        let dict = Dictionary::standard_basis(9);
        let w = gaussian_vec(9, 31);
        for tau in [1, 3, 5] {
            let fast = best_sparse_approx(&w, tau, &dict).unwrap();
            // Oracle: exhaustive over all supports via residual comparison.
            let mut best_residual = f64::INFINITY;
            let mut best_support = Vec::new();
            combin::for_each_combination(9, tau, |s| {
                let est = orthogonal_project(&w, s, &dict).unwrap();
                let r = (&w - &est.signal).norm_squared();
                if r < best_residual - 1e-15 {
                    best_residual = r;
                    best_support = s.to_vec();
                }
            });
            assert_eq!(fast.support, best_support, "tau = {tau}");
        }
    }

    #[test]
    fn best_sparse_approx_tie_takes_lowest_indices() {
        let dict = Dictionary::standard_basis(4);
        let w = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let est = best_sparse_approx(&w, 2, &dict).unwrap();
        assert_eq!(est.support, vec![0, 1]);
    }

    #[test]
    fn best_sparse_approx_tau_zero_is_zero_estimate() {
        let dict = Dictionary::standard_basis(4);
        let est = best_sparse_approx(&gaussian_vec(4, 33), 0, &dict).unwrap();
        assert_eq!(est.signal, DVector::zeros(4));
        assert!(est.support.is_empty());
        assert_eq!(est.capacity, 0);
    }

    #[test]
    fn best_sparse_approx_general_exhaustive_oracle() {
        // Signal built from two known atoms must be recovered exactly.
        let dict = general_dict(8, 10, 34);
        let coeffs = DVector::from_vec(vec![2.0, -1.5]);
        let w = dict.synthesize(&[3, 7], &coeffs);
        let est = best_sparse_approx(&w, 2, &dict).unwrap();
        assert_eq!(est.support, vec![3, 7]);
        assert!((&est.signal - &w).norm() < 1e-10);
    }

    #[test]
    fn best_sparse_approx_general_respects_cap() {
        let dict = general_dict(6, 200, 35);
        assert!(matches!(
            best_sparse_approx(&gaussian_vec(6, 36), 4, &dict),
            Err(Error::ExhaustiveCap { .. })
        ));
    }

    #[test]
    fn approx_project_exact_paths_certify() {
        for dict in [Dictionary::standard_basis(8), random_orthonormal(8, 8, 41)] {
            let w = gaussian_vec(8, 42);
            let proj = approx_project(&w, 3, &dict, 1.0).unwrap();
            assert!(proj.eta_certified);
            let opt = best_sparse_approx(&w, 3, &dict).unwrap();
            assert!((proj.residual_norm - (&w - &opt.signal).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn approx_project_omp_recovers_single_atom() {
        let dict = general_dict(12, 20, 43);
        let w = dict.atoms().column(13) * 5.0;
        let proj = approx_project(&w.into_owned(), 1, &dict, 1.0).unwrap();
        assert_eq!(proj.estimate.support, vec![13]);
        assert!(proj.residual_norm < 1e-10);
        assert!(proj.eta_certified);
    }

    #[test]
    fn approx_project_certificate_against_exhaustive() {
        // OMP on a coherent dictionary may be suboptimal; certification must
        // compare against the true optimum rather than trust the greedy path.
        let dict = general_dict(10, 16, 44);
        for trial in 0..50 {
            let w = gaussian_vec(10, 100 + trial);
            let proj = approx_project(&w, 3, &dict, 2.0).unwrap();
            let opt = best_sparse_approx(&w, 3, &dict).unwrap();
            let opt_res = (&w - &opt.signal).norm();
            let holds = proj.residual_norm <= 2.0 * opt_res + 1e-12 * w.norm().max(1.0);
            assert_eq!(proj.eta_certified, holds, "trial {trial}");
        }
    }

    #[test]
    fn approx_project_rejects_eta_below_one() {
        let dict = Dictionary::standard_basis(4);
        assert!(approx_project(&gaussian_vec(4, 45), 2, &dict, 0.5).is_err());
    }

    #[test]
    fn pythagoras_on_exact_paths() {
        for dict in [
            Dictionary::standard_basis(10),
            random_orthonormal(10, 10, 46),
        ] {
            let w = gaussian_vec(10, 47);
            let proj = approx_project(&w, 4, &dict, 1.0).unwrap();
            let lhs = w.norm_squared();
            let rhs = proj.estimate.signal.norm_squared() + proj.residual_norm.powi(2);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.max(1.0));
        }
    }

    #[test]
    fn idempotence_on_sparse_signals() {
        let dict = Dictionary::standard_basis(12);
        let mut w = DVector::zeros(12);
        w[2] = 1.5;
        w[7] = -0.25;
        w[9] = 3.0;
        let proj = approx_project(&w, 3, &dict, 1.0).unwrap();
        assert!((proj.estimate.signal.clone() - &w).norm() < 1e-14);
        let again = approx_project(&proj.estimate.signal, 3, &dict, 1.0).unwrap();
        assert!((again.estimate.signal - &proj.estimate.signal).norm() < 1e-14);
    }

    #[test]
    fn thresholding_contraction_toward_sparse_targets() {
        // For a tau-sparse target x*, ||P(b) - x*|| <= (1 + eta2)||b - x*||
        // whenever the projector achieves factor eta2; exact paths achieve 1.
        let n = 16;
        let tau = 4;
        for (which, dict) in [Dictionary::standard_basis(n), random_orthonormal(n, n, 48)]
            .iter()
            .enumerate()
        {
            for trial in 0..1000u64 {
                let mut r = rng::stream(49, "test.proj_error", which as u64, trial);
                let support = rng::sample_distinct(&mut r, n, tau);
                let coeffs = DVector::from_fn(tau, |_, _| r.sample::<f64, _>(StandardNormal));
                let x_star = dict.synthesize(&support, &coeffs);
                let noise = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
                let b = &x_star + noise * 0.3;
                let proj = approx_project(&b, tau, dict, 1.0).unwrap();
                let lhs = (&proj.estimate.signal - &x_star).norm();
                let rhs = 2.0 * (&b - &x_star).norm();
                assert!(lhs <= rhs + 1e-10, "dict {which}, trial {trial}");
            }
        }
    }

    #[test]
    fn union_and_f1_helpers() {
        assert_eq!(union_supports(&[1, 4, 6], &[0, 4, 9]), vec![0, 1, 4, 6, 9]);
        assert_eq!(union_supports(&[], &[2]), vec![2]);
        assert!((support_f1(&[1, 2, 3], &[1, 2, 3]) - 1.0).abs() < 1e-15);
        assert_eq!(support_f1(&[], &[1]), 0.0);
        assert_eq!(support_f1(&[], &[]), 1.0);
        // Half precision, half recall.
        let f1 = support_f1(&[1, 2], &[2, 3]);
        assert!((f1 - 0.5).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn ball_projection_is_nonexpansive(
            u in prop::collection::vec(-50.0f64..50.0, 6),
            v in prop::collection::vec(-50.0f64..50.0, 6),
            radius in 0.1f64..20.0,
        ) {
            let u = DVector::from_vec(u);
            let v = DVector::from_vec(v);
            let pu = project_l2_ball(&u, radius);
            let pv = project_l2_ball(&v, radius);
            prop_assert!(pu.norm() <= radius + 1e-12);
            prop_assert!((pu.clone() - pv).norm() <= (u.clone() - v).norm() + 1e-12);
            // Idempotence.
            let ppu = project_l2_ball(&pu, radius);
            prop_assert!((ppu - pu).norm() <= 1e-12);
        }

        #[test]
        fn standard_basis_ops_are_coordinate_topk(
            values in prop::collection::vec(-10.0f64..10.0, 8),
            tau in 1usize..8,
        ) {
            let dict = Dictionary::standard_basis(8);
            let w = DVector::from_vec(values);
            let proj = approx_project(&w, tau, &dict, 1.5).unwrap();
            // Coordinate top-tau oracle with lowest-index ties.
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| {
                w[b].abs().partial_cmp(&w[a].abs()).unwrap().then(a.cmp(&b))
            });
            let mut expect = order[..tau].to_vec();
            expect.sort_unstable();
            prop_assert_eq!(proj.estimate.support.clone(), expect);
            for &j in &proj.estimate.support {
                prop_assert_eq!(proj.estimate.signal[j], w[j]);
            }
            prop_assert!(proj.estimate.support.len() <= tau);
            prop_assert!(proj.estimate.consistent_with(&dict, 1e-12));
        }

        #[test]
        fn estimates_keep_representation_invariant(
            seed in 0u64..500,
            tau in 1usize..5,
        ) {
            let dict = general_dict(9, 12, 1000 + seed);
            let w = gaussian_vec(9, 2000 + seed);
            let proj = approx_project(&w, tau, &dict, 2.0).unwrap();
            prop_assert!(proj.estimate.support.len() <= tau);
            prop_assert!(proj.estimate.consistent_with(&dict, 1e-10));
            prop_assert!(
                proj.estimate.support.windows(2).all(|p| p[0] < p[1])
            );
        }
    }
}
