//! Client datasets and local objective functions.
//!
//! A client holds a data matrix (rows are samples) and a target vector. The
//! objective is the empirical risk of one of three losses: squared error,
//! binary logistic (labels in {-1, +1}, factor-2 exponent convention), or
//! multiclass logistic (labels are class indices `0..K`, model stacked as
//! `K` blocks of length `n`). Models live in signal space: with a dictionary
//! the iterate is `A * coefficients`, so evaluating the loss at a signal is
//! the same as using the effective data matrix `data * atoms` in coefficient
//! space.
//!
//! Mini-batches are index subsets drawn uniformly over all
//! `C(|D_i|, batch_size)` possibilities, so the batch gradient is an
//! unbiased estimate of the full one.

use crate::combin;
use crate::dictionary::{Dictionary, DictionaryKind};
use crate::error::{Error, Result};
use crate::matio;
use crate::rng;
use crate::sparse_ops::EXHAUSTIVE_CAP;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use std::sync::Arc;

/// Batch enumeration for variance/curvature estimates stays exhaustive up to
/// this many batches, and falls back to sampling this many otherwise.
const BATCH_ENUM_CAP: usize = 2048;
const BATCH_SAMPLES: usize = 256;

#[derive(Debug, Clone)]
pub struct ClientDataset {
    /// `|D_i| x n` data matrix; rows are samples.
    pub data: DMatrix<f64>,
    /// One target per row: real values, {-1, +1} labels, or class indices.
    pub targets: DVector<f64>,
    pub batch_size: usize,
    pub client_id: usize,
}

impl ClientDataset {
    pub fn new(
        data: DMatrix<f64>,
        targets: DVector<f64>,
        batch_size: usize,
        client_id: usize,
    ) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        if targets.len() != data.nrows() {
            return Err(Error::Dimension {
                context: "dataset targets vs data rows",
                expected: data.nrows(),
                found: targets.len(),
            });
        }
        if batch_size == 0 || batch_size > data.nrows() {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be in 1..={}, got {batch_size}",
                data.nrows()
            )));
        }
        Ok(ClientDataset {
            data,
            targets,
            batch_size,
            client_id,
        })
    }

    /// Loads a dataset from a matrix file plus a targets file (one value per
    /// line). With `normalize`, every data row is scaled to unit norm.
    pub fn load(
        matrix_path: &Path,
        targets_path: &Path,
        normalize: bool,
        batch_size: usize,
        client_id: usize,
    ) -> Result<Self> {
        let mut data = matio::read_matrix(matrix_path)?;
        let targets = matio::read_vector_text(targets_path)?;
        if normalize {
            for r in 0..data.nrows() {
                let norm = data.row(r).norm();
                if norm == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "cannot normalize zero row {r} of {}",
                        matrix_path.display()
                    )));
                }
                data.row_mut(r).scale_mut(1.0 / norm);
            }
        }
        Self::new(data, targets, batch_size, client_id)
    }

    pub fn num_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Squared,
    BinaryLogistic,
    /// Multinomial logistic over this many classes.
    MulticlassLogistic {
        classes: usize,
    },
}

/// A client's local empirical risk, tied to the shared dictionary.
#[derive(Debug, Clone)]
pub struct Objective {
    kind: LossKind,
    dataset: ClientDataset,
    dict: Arc<Dictionary>,
}

impl Objective {
    pub fn new(kind: LossKind, dataset: ClientDataset, dict: Arc<Dictionary>) -> Result<Self> {
        if dataset.dim() != dict.n() {
            return Err(Error::Dimension {
                context: "dataset columns vs dictionary dimension",
                expected: dict.n(),
                found: dataset.dim(),
            });
        }
        match kind {
            LossKind::Squared => {}
            LossKind::BinaryLogistic => {
                if !dataset.targets.iter().all(|&y| y == 1.0 || y == -1.0) {
                    return Err(Error::InvalidArgument(
                        "binary logistic targets must be -1 or +1".into(),
                    ));
                }
            }
            LossKind::MulticlassLogistic { classes } => {
                if classes < 2 {
                    return Err(Error::InvalidArgument(
                        "multiclass logistic needs at least 2 classes".into(),
                    ));
                }
                let ok = dataset
                    .targets
                    .iter()
                    .all(|&y| y.fract() == 0.0 && y >= 0.0 && (y as usize) < classes);
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "multiclass targets must be class indices in 0..{classes}"
                    )));
                }
            }
        }
        Ok(Objective {
            kind,
            dataset,
            dict,
        })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn dataset(&self) -> &ClientDataset {
        &self.dataset
    }

    pub fn dict(&self) -> &Arc<Dictionary> {
        &self.dict
    }

    pub fn client_id(&self) -> usize {
        self.dataset.client_id
    }

    /// Length of the model vector: `n`, or `n * K` for multiclass (class
    /// blocks stacked).
    pub fn model_dim(&self) -> usize {
        match self.kind {
            LossKind::MulticlassLogistic { classes } => self.dict.n() * classes,
            _ => self.dict.n(),
        }
    }

    /// The `|rows| x |support|` design matrix of the restricted subproblem:
    /// columns of `data * atoms` selected by `support`.
    pub fn restricted_design(&self, support: &[usize]) -> DMatrix<f64> {
        if self.dict.is_standard() {
            self.dataset.data.select_columns(support.iter())
        } else {
            &self.dataset.data * self.dict.atoms_for(support)
        }
    }

    /// Draws a mini-batch: `batch_size` distinct row indices, uniform over
    /// all subsets of that size.
    pub fn sample_batch(&self, rng: &mut impl Rng) -> Vec<usize> {
        rng::sample_distinct(rng, self.dataset.num_samples(), self.dataset.batch_size)
    }

    /// Full-data loss at the model `x`.
    pub fn loss(&self, x: &DVector<f64>) -> f64 {
        self.loss_impl(x, &self.dataset.data, &self.dataset.targets)
    }

    /// Full-data gradient at `x`.
    pub fn full_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.gradient_impl(x, &self.dataset.data, &self.dataset.targets)
    }

    /// Mini-batch loss over the given row indices.
    pub fn batch_loss(&self, x: &DVector<f64>, batch: &[usize]) -> f64 {
        let (b, y) = self.select(batch);
        self.loss_impl(x, &b, &y)
    }

    /// Mini-batch gradient over the given row indices.
    pub fn stochastic_gradient(&self, x: &DVector<f64>, batch: &[usize]) -> DVector<f64> {
        let (b, y) = self.select(batch);
        self.gradient_impl(x, &b, &y)
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (
            self.dataset.data.select_rows(idx.iter()),
            DVector::from_fn(idx.len(), |k, _| self.dataset.targets[idx[k]]),
        )
    }

    fn loss_impl(&self, x: &DVector<f64>, b: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.model_dim());
        let l = b.nrows() as f64;
        match self.kind {
            LossKind::Squared => {
                let r = b * x - y;
                r.norm_squared() / (2.0 * l)
            }
            LossKind::BinaryLogistic => {
                let u = b * x;
                (0..b.nrows())
                    .map(|j| log1p_exp(-2.0 * y[j] * u[j]))
                    .sum::<f64>()
                    / l
            }
            LossKind::MulticlassLogistic { classes } => {
                let scores = class_scores(b, x, classes);
                let mut total = 0.0;
                for j in 0..b.nrows() {
                    let row = scores.row(j);
                    let c = y[j] as usize;
                    total += log_sum_exp(row.iter().copied()) - row[c];
                }
                total / l
            }
        }
    }

    fn gradient_impl(&self, x: &DVector<f64>, b: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.model_dim());
        let l = b.nrows() as f64;
        match self.kind {
            LossKind::Squared => {
                let r = b * x - y;
                b.tr_mul(&r) / l
            }
            LossKind::BinaryLogistic => {
                let u = b * x;
                // d/du log(1 + exp(-2 y u)) = -2 y s(2 y u), s(z) = 1/(1+e^z).
                let weights =
                    DVector::from_fn(b.nrows(), |j, _| -2.0 * y[j] * sigmoid(2.0 * y[j] * u[j]));
                b.tr_mul(&weights) / l
            }
            LossKind::MulticlassLogistic { classes } => {
                let n = self.dict.n();
                let scores = class_scores(b, x, classes);
                let mut grad = DVector::zeros(n * classes);
                // Softmax residuals per class, then one transposed product
                // per class block.
                let mut resid = DMatrix::zeros(b.nrows(), classes);
                for j in 0..b.nrows() {
                    let row = scores.row(j);
                    let m = row.max();
                    let denom: f64 = row.iter().map(|&s| (s - m).exp()).sum();
                    let c = y[j] as usize;
                    for k in 0..classes {
                        let p = (row[k] - m).exp() / denom;
                        resid[(j, k)] = p - if k == c { 1.0 } else { 0.0 };
                    }
                }
                for k in 0..classes {
                    let gk = b.tr_mul(&resid.column(k).into_owned()) / l;
                    grad.rows_mut(k * n, n).copy_from(&gk);
                }
                grad
            }
        }
    }
}

/// Per-sample class scores `data * x_block(c)` as an `l x K` matrix.
fn class_scores(b: &DMatrix<f64>, x: &DVector<f64>, classes: usize) -> DMatrix<f64> {
    let n = x.len() / classes;
    let mut scores = DMatrix::zeros(b.nrows(), classes);
    for k in 0..classes {
        let block = x.rows(k * n, n);
        scores.column_mut(k).copy_from(&(b * block));
    }
    scores
}

/// `log(1 + exp(z))` without overflow.
fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + exp(z))` without overflow.
fn sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        let t = (-z).exp();
        t / (1.0 + t)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Restricted curvature of a client objective at sparsity `tau`.
///
/// `rho_minus` bounds the objective's restricted strong convexity from
/// below; the `rho_plus_*` fields summarize per-batch restricted smoothness
/// (mean, max, first and second moments over batches).
#[derive(Debug, Clone, Copy)]
pub struct RestrictedCurvature {
    pub rho_minus: f64,
    pub rho_plus_bar: f64,
    pub rho_plus_max: f64,
    pub rho_plus_mean: f64,
    pub rho_plus_sq_mean: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum CurvatureMode {
    /// Enumerate every support and every batch (refused beyond the caps).
    Exhaustive,
    /// Monte-Carlo over supports and batches.
    Sampled { supports: usize, batches: usize },
}

impl Objective {
    /// Estimates restricted strong convexity / smoothness constants at
    /// sparsity `tau`.
    ///
    /// Quadratic losses use the exact restricted Hessian `(1/l) B^T B`. The
    /// logistic losses use the curvature sandwich on the norm ball of
    /// `radius`: the data Gram bounds the Hessian above, and the lower bound
    /// scales it by `4/(1+e^R)^2` (binary) or `1/(1+K e^{2R})^2`
    /// (multiclass); both scales are bounds, not exact constants. For
    /// non-orthonormal dictionaries the restricted eigenvalues are
    /// generalized ones (pencil against the atom Gram), because sparse
    /// signals are `A_S c` with `||A_S c|| != ||c||` in general.
    pub fn estimate_rsc_rss(
        &self,
        tau: usize,
        mode: CurvatureMode,
        radius: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<RestrictedCurvature> {
        let d = self.dict.num_atoms();
        let l = self.dataset.num_samples();
        let bsz = self.dataset.batch_size;
        if tau == 0 || tau > d {
            return Err(Error::InvalidArgument(format!(
                "tau must be in 1..={d}, got {tau}"
            )));
        }
        let lower_scale = match self.kind {
            LossKind::Squared => 1.0,
            LossKind::BinaryLogistic => {
                let r = logistic_radius(radius)?;
                4.0 / (1.0 + r.exp()).powi(2)
            }
            LossKind::MulticlassLogistic { classes } => {
                let r = logistic_radius(radius)?;
                1.0 / (1.0 + classes as f64 * (2.0 * r).exp()).powi(2)
            }
        };

        let supports = match mode {
            CurvatureMode::Exhaustive => {
                let count = combin::count_combinations(d, tau);
                if count > EXHAUSTIVE_CAP as u128 {
                    return Err(Error::ExhaustiveCap {
                        needed: count,
                        cap: EXHAUSTIVE_CAP,
                    });
                }
                let mut all = Vec::with_capacity(count as usize);
                combin::for_each_combination(d, tau, |s| all.push(s.to_vec()));
                all
            }
            CurvatureMode::Sampled { supports, .. } => {
                if supports == 0 {
                    return Err(Error::InvalidArgument("supports must be >= 1".into()));
                }
                (0..supports)
                    .map(|_| rng::sample_distinct(rng, d, tau))
                    .collect()
            }
        };

        let batches = match mode {
            CurvatureMode::Exhaustive => {
                let count = combin::count_combinations(l, bsz);
                if count > EXHAUSTIVE_CAP as u128 {
                    return Err(Error::ExhaustiveCap {
                        needed: count,
                        cap: EXHAUSTIVE_CAP,
                    });
                }
                let mut all = Vec::with_capacity(count as usize);
                combin::for_each_combination(l, bsz, |s| all.push(s.to_vec()));
                all
            }
            CurvatureMode::Sampled { batches, .. } => {
                if batches == 0 {
                    return Err(Error::InvalidArgument("batches must be >= 1".into()));
                }
                (0..batches)
                    .map(|_| rng::sample_distinct(rng, l, bsz))
                    .collect()
            }
        };

        let mut rho_minus = f64::INFINITY;
        let mut batch_max = vec![0.0f64; batches.len()];
        for support in &supports {
            let design = self.restricted_design(support);
            let whiten = self.support_whitener(support);
            let g_full = design.tr_mul(&design) / l as f64;
            let (lo, _) = pencil_extremes(&g_full, whiten.as_ref());
            rho_minus = rho_minus.min(lo);
            for (bi, batch) in batches.iter().enumerate() {
                let rows = design.select_rows(batch.iter());
                let g = rows.tr_mul(&rows) / bsz as f64;
                let (_, hi) = pencil_extremes(&g, whiten.as_ref());
                batch_max[bi] = batch_max[bi].max(hi);
            }
        }

        let m = batch_max.len() as f64;
        let rho_plus_mean = batch_max.iter().sum::<f64>() / m;
        let rho_plus_sq_mean = batch_max.iter().map(|v| v * v).sum::<f64>() / m;
        let rho_plus_max = batch_max.iter().cloned().fold(0.0, f64::max);
        Ok(RestrictedCurvature {
            rho_minus: lower_scale * rho_minus,
            rho_plus_bar: rho_plus_mean,
            rho_plus_max,
            rho_plus_mean,
            rho_plus_sq_mean,
        })
    }

    /// Whitening matrix for the atom Gram on a support (None when the Gram
    /// is the identity). Columns with negligible eigenvalue are dropped, so
    /// rank-deficient atom sets restrict the pencil to actual directions.
    pub(crate) fn support_whitener(&self, support: &[usize]) -> Option<DMatrix<f64>> {
        match self.dict.kind() {
            DictionaryKind::StandardBasis | DictionaryKind::Orthonormal => None,
            DictionaryKind::General => {
                let atoms = self.dict.atoms_for(support);
                let w = symmetrize(&atoms.tr_mul(&atoms));
                let eig = w.symmetric_eigen();
                let max_ev = eig.eigenvalues.max();
                let eps = max_ev * support.len() as f64 * f64::EPSILON;
                let keep: Vec<usize> = (0..eig.eigenvalues.len())
                    .filter(|&i| eig.eigenvalues[i] > eps)
                    .collect();
                let mut whiten = DMatrix::zeros(support.len(), keep.len());
                for (col, &i) in keep.iter().enumerate() {
                    let scale = 1.0 / eig.eigenvalues[i].sqrt();
                    whiten
                        .column_mut(col)
                        .copy_from(&(eig.eigenvectors.column(i) * scale));
                }
                Some(whiten)
            }
        }
    }

    /// Estimates the stochastic-gradient variance bound: the maximum over a
    /// probe set of `tau`-sparse points of the mean squared deviation
    /// between batch gradients and the full gradient. The probe set is the
    /// origin plus `probes` random unit-coefficient sparse signals; batches
    /// are enumerated exhaustively when few enough, sampled otherwise.
    pub fn estimate_sigma(&self, tau: usize, probes: usize, rng: &mut impl Rng) -> Result<f64> {
        let d = self.dict.num_atoms();
        if tau == 0 || tau > d {
            return Err(Error::InvalidArgument(format!(
                "tau must be in 1..={d}, got {tau}"
            )));
        }
        let batches = self.variance_batches(rng);
        if batches.len() <= 1 {
            return Ok(0.0); // only one possible batch: gradients are exact
        }
        let mut worst = 0.0f64;
        for p in 0..probes.max(1) + 1 {
            let x = if p == 0 {
                DVector::zeros(self.model_dim())
            } else {
                self.random_sparse_point(tau, rng)
            };
            let full = self.full_gradient(&x);
            let mean_dev = batches
                .iter()
                .map(|b| (self.stochastic_gradient(&x, b) - &full).norm_squared())
                .sum::<f64>()
                / batches.len() as f64;
            worst = worst.max(mean_dev);
        }
        Ok(worst)
    }

    /// Mean of `||grad g_j(x)||^2` over batches at the point `x`.
    pub fn batch_gradient_sq_mean(&self, x: &DVector<f64>, rng: &mut impl Rng) -> f64 {
        let batches = self.variance_batches(rng);
        batches
            .iter()
            .map(|b| self.stochastic_gradient(x, b).norm_squared())
            .sum::<f64>()
            / batches.len() as f64
    }

    fn variance_batches(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let l = self.dataset.num_samples();
        let bsz = self.dataset.batch_size;
        if combin::count_combinations(l, bsz) <= BATCH_ENUM_CAP as u128 {
            let mut all = Vec::new();
            combin::for_each_combination(l, bsz, |s| all.push(s.to_vec()));
            all
        } else {
            (0..BATCH_SAMPLES)
                .map(|_| rng::sample_distinct(rng, l, bsz))
                .collect()
        }
    }

    /// A random `tau`-sparse model point with unit coefficient norm (the
    /// sparse block lands in a random class block for multiclass models).
    fn random_sparse_point(&self, tau: usize, rng: &mut impl Rng) -> DVector<f64> {
        let support = rng::sample_distinct(rng, self.dict.num_atoms(), tau);
        let coeffs = loop {
            let c = DVector::from_fn(tau, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = c.norm();
            if norm > 0.0 {
                break c / norm;
            }
        };
        let signal = self.dict.synthesize(&support, &coeffs);
        match self.kind {
            LossKind::MulticlassLogistic { classes } => {
                let n = self.dict.n();
                let block = rng.random_range(0..classes);
                let mut x = DVector::zeros(n * classes);
                x.rows_mut(block * n, n).copy_from(&signal);
                x
            }
            _ => signal,
        }
    }
}

fn logistic_radius(radius: Option<f64>) -> Result<f64> {
    match radius {
        Some(r) if r > 0.0 => Ok(r),
        Some(r) => Err(Error::InvalidArgument(format!(
            "logistic curvature radius must be positive, got {r}"
        ))),
        None => Err(Error::InvalidArgument(
            "logistic curvature needs a norm-ball radius".into(),
        )),
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Extremal eigenvalues of `G` (whitened by the optional factor `W`, giving
/// the generalized pencil extremes against the atom Gram).
fn pencil_extremes(g: &DMatrix<f64>, whiten: Option<&DMatrix<f64>>) -> (f64, f64) {
    let m = match whiten {
        None => symmetrize(g),
        Some(w) => symmetrize(&(w.tr_mul(g) * w)),
    };
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = m.symmetric_eigen().eigenvalues;
    (ev.min(), ev.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tags;

    fn small_dataset(seed: u64, l: usize, n: usize, batch: usize) -> ClientDataset {
        let mut r = rng::stream(seed, "test.data", 0, 0);
        let data = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let targets = DVector::from_fn(l, |_, _| r.sample::<f64, _>(StandardNormal));
        ClientDataset::new(data, targets, batch, 0).unwrap()
    }

    fn squared_obj(seed: u64, l: usize, n: usize, batch: usize) -> Objective {
        let dict = Arc::new(Dictionary::standard_basis(n));
        Objective::new(LossKind::Squared, small_dataset(seed, l, n, batch), dict).unwrap()
    }

    fn finite_diff_gradient(obj: &Objective, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(x.len(), |i, _| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[i] += h;
            minus[i] -= h;
            (obj.loss(&plus) - obj.loss(&minus)) / (2.0 * h)
        })
    }

    #[test]
    fn squared_gradient_matches_closed_form() {
        let obj = squared_obj(1, 6, 4, 3);
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let b = &obj.dataset().data;
        let y = &obj.dataset().targets;
        let expected = b.tr_mul(&(b * &x - y)) / 6.0;
        assert!((obj.full_gradient(&x) - expected).norm() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let n = 5;
        let dict = Arc::new(Dictionary::standard_basis(n));
        let mut r = rng::stream(3, "test.fd", 0, 0);

        let data = DMatrix::from_fn(8, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let squared = Objective::new(
            LossKind::Squared,
            ClientDataset::new(
                data.clone(),
                DVector::from_fn(8, |_, _| r.sample::<f64, _>(StandardNormal)),
                4,
                0,
            )
            .unwrap(),
            dict.clone(),
        )
        .unwrap();

        let labels = DVector::from_fn(8, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });
        let binary = Objective::new(
            LossKind::BinaryLogistic,
            ClientDataset::new(data.clone(), labels, 4, 0).unwrap(),
            dict.clone(),
        )
        .unwrap();

        let classes = DVector::from_fn(8, |j, _| (j % 3) as f64);
        let multi = Objective::new(
            LossKind::MulticlassLogistic { classes: 3 },
            ClientDataset::new(data, classes, 4, 0).unwrap(),
            dict,
        )
        .unwrap();

        for obj in [&squared, &binary, &multi] {
            let x = DVector::from_fn(obj.model_dim(), |i, _| 0.3 * ((i as f64) * 0.7).sin());
            let grad = obj.full_gradient(&x);
            let fd = finite_diff_gradient(obj, &x);
            let rel = (grad.clone() - &fd).norm() / grad.norm().max(1e-12);
            assert!(rel < 1e-6, "kind {:?}: rel err {rel}", obj.kind());
        }
    }

    #[test]
    fn batch_gradients_average_to_full() {
        // All C(4,2) = 6 batches, equal weight: the mean batch gradient is
        // exactly the full gradient.
        let obj = squared_obj(4, 4, 3, 2);
        let x = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let full = obj.full_gradient(&x);
        let mut acc = DVector::zeros(3);
        let mut count = 0.0;
        combin::for_each_combination(4, 2, |s| {
            acc += obj.stochastic_gradient(&x, s);
            count += 1.0;
        });
        assert_eq!(count, 6.0);
        assert!((acc / count - full).norm() < 1e-13);
    }

    #[test]
    fn binary_logistic_gradient_at_origin() {
        let n = 4;
        let l = 6;
        let mut r = rng::stream(5, "test.logit", 0, 0);
        let data = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let labels = DVector::from_fn(l, |j, _| if j < 3 { 1.0 } else { -1.0 });
        let dict = Arc::new(Dictionary::standard_basis(n));
        let obj = Objective::new(
            LossKind::BinaryLogistic,
            ClientDataset::new(data.clone(), labels.clone(), 3, 0).unwrap(),
            dict,
        )
        .unwrap();
        // At x = 0 the sigmoid is 1/2, so the gradient is -(1/l) sum y_j b_j.
        let mut expected = DVector::zeros(n);
        for j in 0..l {
            expected.axpy(-labels[j] / l as f64, &data.row(j).transpose(), 1.0);
        }
        assert!((obj.full_gradient(&DVector::zeros(n)) - expected).norm() < 1e-14);
    }

    #[test]
    fn multiclass_two_classes_reduces_to_binary() {
        // Multinomial with class scores (x, 0) equals the logistic loss with
        // unit exponent; the binary objective uses the factor-2 convention,
        // so compare against the binary loss at x/2.
        let n = 4;
        let l = 7;
        let mut r = rng::stream(6, "test.reduce", 0, 0);
        let data = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
        let labels_pm = DVector::from_fn(l, |j, _| if j % 3 == 0 { 1.0 } else { -1.0 });
        // Class 0 plays the role of +1 (score x), class 1 of -1 (score 0).
        let labels_idx = labels_pm.map(|y| if y > 0.0 { 0.0 } else { 1.0 });
        let dict = Arc::new(Dictionary::standard_basis(n));
        let binary = Objective::new(
            LossKind::BinaryLogistic,
            ClientDataset::new(data.clone(), labels_pm, 3, 0).unwrap(),
            dict.clone(),
        )
        .unwrap();
        let multi = Objective::new(
            LossKind::MulticlassLogistic { classes: 2 },
            ClientDataset::new(data, labels_idx, 3, 0).unwrap(),
            dict,
        )
        .unwrap();
        let x = DVector::from_fn(n, |i, _| 0.8 * ((i + 1) as f64).cos());
        let mut stacked = DVector::zeros(2 * n);
        stacked.rows_mut(0, n).copy_from(&x);
        assert!((multi.loss(&stacked) - binary.loss(&(&x * 0.5))).abs() < 1e-10);
    }

    #[test]
    fn sample_batch_uniform_over_subsets() {
        let obj = squared_obj(7, 5, 3, 2);
        let mut rng = rng::stream(8, tags::BATCH, 0, 0);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            let s = obj.sample_batch(&mut rng);
            let (a, b) = (s[0], s[1]);
            let rank: usize = (0..a).map(|x| 4 - x).sum::<usize>() + (b - a - 1);
            counts[rank] += 1;
        }
        let expected = draws as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 9 dof, significance 0.001.
        assert!(chi2 < 27.877, "chi-squared {chi2}");
    }

    #[test]
    fn curvature_exhaustive_matches_direct_enumeration() {
        let obj = squared_obj(9, 4, 5, 2);
        let tau = 2;
        let mut rng = rng::stream(10, tags::CONSTANTS, 0, 0);
        let got = obj
            .estimate_rsc_rss(tau, CurvatureMode::Exhaustive, None, &mut rng)
            .unwrap();

        // Oracle: direct eigenvalue enumeration, written independently.
        let data = &obj.dataset().data;
        let l = data.nrows() as f64;
        let mut rho_minus = f64::INFINITY;
        combin::for_each_combination(5, tau, |s| {
            let cols = data.select_columns(s.iter());
            let h = cols.tr_mul(&cols) / l;
            rho_minus = rho_minus.min(h.symmetric_eigen().eigenvalues.min());
        });
        let mut maxima = Vec::new();
        combin::for_each_combination(4, 2, |batch| {
            let rows = data.select_rows(batch.iter());
            let mut hi = 0.0f64;
            combin::for_each_combination(5, tau, |s| {
                let cols = rows.select_columns(s.iter());
                let h = cols.tr_mul(&cols) / 2.0;
                hi = hi.max(h.symmetric_eigen().eigenvalues.max());
            });
            maxima.push(hi);
        });
        let bar = maxima.iter().sum::<f64>() / maxima.len() as f64;
        let max = maxima.iter().cloned().fold(0.0, f64::max);
        let sq = maxima.iter().map(|v| v * v).sum::<f64>() / maxima.len() as f64;

        assert!((got.rho_minus - rho_minus).abs() < 1e-12);
        assert!((got.rho_plus_bar - bar).abs() < 1e-12);
        assert!((got.rho_plus_max - max).abs() < 1e-12);
        assert!((got.rho_plus_sq_mean - sq).abs() < 1e-12);
    }

    #[test]
    fn sampled_curvature_stays_inside_exhaustive() {
        let obj = squared_obj(11, 6, 6, 3);
        let mut r1 = rng::stream(12, tags::CONSTANTS, 0, 0);
        let mut r2 = rng::stream(12, tags::CONSTANTS, 1, 0);
        let exact = obj
            .estimate_rsc_rss(2, CurvatureMode::Exhaustive, None, &mut r1)
            .unwrap();
        let sampled = obj
            .estimate_rsc_rss(
                2,
                CurvatureMode::Sampled {
                    supports: 8,
                    batches: 8,
                },
                None,
                &mut r2,
            )
            .unwrap();
        // Sampling can only shrink the support/batch pools.
        assert!(sampled.rho_minus >= exact.rho_minus - 1e-12);
        assert!(sampled.rho_plus_max <= exact.rho_plus_max + 1e-12);
    }

    #[test]
    fn logistic_sandwich_contains_true_hessian_quadratic_form() {
        let n = 5;
        let l = 12;
        let radius = 0.8;
        let mut r = rng::stream(13, "test.sandwich", 0, 0);
        let data = DMatrix::from_fn(l, n, |_, _| r.sample::<f64, _>(StandardNormal));
        // Keep scores inside [-R, R] where the sandwich applies.
        let data = data / 3.0;
        let labels = DVector::from_fn(l, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });
        let dict = Arc::new(Dictionary::standard_basis(n));
        let obj = Objective::new(
            LossKind::BinaryLogistic,
            ClientDataset::new(data.clone(), labels, l, 0).unwrap(),
            dict,
        )
        .unwrap();
        let tau = 2;
        let cur = obj
            .estimate_rsc_rss(tau, CurvatureMode::Exhaustive, Some(radius), &mut r)
            .unwrap();

        // True Hessian at a sparse x with ||x|| <= R:
        // (1/l) B^T diag(4 s(2u)(1-s(2u))) B.
        for trial in 0..50 {
            let mut rt = rng::stream(14, "test.sandwich", trial, 0);
            let support = rng::sample_distinct(&mut rt, n, tau);
            let mut x = DVector::zeros(n);
            for &j in &support {
                x[j] = rt.sample::<f64, _>(StandardNormal);
            }
            let norm = x.norm();
            if norm > 0.0 {
                x *= radius / norm * rt.random_range(0.1..1.0);
            }
            let u = &data * &x;
            let lam = DVector::from_fn(l, |j, _| {
                let s = sigmoid(2.0 * u[j]);
                4.0 * s * (1.0 - s)
            });
            let mut h = DMatrix::zeros(n, n);
            for j in 0..l {
                let row = data.row(j).transpose();
                h += lam[j] * &row * row.transpose();
            }
            h /= l as f64;
            // Quadratic form along a random sparse direction.
            let mut v = DVector::zeros(n);
            let vsup = rng::sample_distinct(&mut rt, n, tau);
            for &j in &vsup {
                v[j] = rt.sample::<f64, _>(StandardNormal);
            }
            let q = (v.tr_mul(&(&h * &v)))[(0, 0)] / v.norm_squared();
            assert!(
                cur.rho_minus <= q + 1e-10 && q <= cur.rho_plus_max + 1e-10,
                "trial {trial}: {} <= {q} <= {} violated",
                cur.rho_minus,
                cur.rho_plus_max
            );
        }
    }

    #[test]
    fn sigma_exhaustive_small_case_oracle() {
        let obj = squared_obj(15, 4, 3, 2);
        let mut rng = rng::stream(16, tags::CONSTANTS, 0, 0);
        let sigma_sq = obj.estimate_sigma(2, 3, &mut rng).unwrap();

        // Oracle at the origin only (estimate maximizes over probes, so it
        // must be at least this).
        let x = DVector::zeros(3);
        let full = obj.full_gradient(&x);
        let mut acc = 0.0;
        let mut count = 0.0;
        combin::for_each_combination(4, 2, |s| {
            acc += (obj.stochastic_gradient(&x, s) - &full).norm_squared();
            count += 1.0;
        });
        assert!(sigma_sq >= acc / count - 1e-12);
        assert!(sigma_sq.is_finite());
    }

    #[test]
    fn full_batch_has_zero_variance() {
        let obj = squared_obj(17, 5, 4, 5);
        let mut rng = rng::stream(18, tags::CONSTANTS, 0, 0);
        assert_eq!(obj.estimate_sigma(2, 4, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn dataset_load_round_trip_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("data.txt");
        let tpath = dir.path().join("targets.txt");
        let ds = small_dataset(19, 5, 3, 2);
        matio::write_matrix_text(&mpath, &ds.data).unwrap();
        matio::write_vector_text(&tpath, &ds.targets).unwrap();

        let back = ClientDataset::load(&mpath, &tpath, false, 2, 7).unwrap();
        assert_eq!(back.data, ds.data);
        assert_eq!(back.targets, ds.targets);
        assert_eq!(back.client_id, 7);

        let normed = ClientDataset::load(&mpath, &tpath, true, 2, 7).unwrap();
        for r in 0..normed.data.nrows() {
            assert!((normed.data.row(r).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_labels_rejected() {
        let dict = Arc::new(Dictionary::standard_basis(3));
        let data = DMatrix::identity(3, 3);
        let bad_binary =
            ClientDataset::new(data.clone(), DVector::from_vec(vec![1.0, 0.5, -1.0]), 2, 0)
                .unwrap();
        assert!(Objective::new(LossKind::BinaryLogistic, bad_binary, dict.clone()).is_err());

        let bad_multi =
            ClientDataset::new(data, DVector::from_vec(vec![0.0, 3.0, 1.0]), 2, 0).unwrap();
        assert!(
            Objective::new(LossKind::MulticlassLogistic { classes: 3 }, bad_multi, dict).is_err()
        );
    }
}
