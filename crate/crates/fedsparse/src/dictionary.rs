//! Dictionaries: the atom collections that define sparsity structure.
//!
//! A dictionary holds `d` atoms as the columns of an `n x d` matrix. Signals
//! are called `tau`-sparse when they are a combination of at most `tau`
//! atoms. The kind tag records structure that downstream operators exploit:
//! coordinate selection for the standard basis, analysis coefficients for
//! orthonormal atoms, and least-squares machinery for everything else.

use crate::combin;
use crate::error::{Error, Result};
use crate::matio;
use crate::rng;
use crate::sparse_ops::EXHAUSTIVE_CAP;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

/// Tolerance for detecting orthonormal atom sets on load.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// Largest dimension for which operator norms use a dense SVD instead of
/// power iteration.
pub const SVD_FALLBACK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DictionaryKind {
    StandardBasis,
    Orthonormal,
    General,
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
    kind: DictionaryKind,
    atom_norms: DVector<f64>,
}

impl Dictionary {
    /// The standard basis of `R^n` (atoms form the identity).
    pub fn standard_basis(n: usize) -> Self {
        Dictionary {
            atoms: DMatrix::identity(n, n),
            kind: DictionaryKind::StandardBasis,
            atom_norms: DVector::repeat(n, 1.0),
        }
    }

    /// `d` atoms with iid `N(0, scale^2)` entries; `scale` defaults to
    /// `1/sqrt(n)` so atoms have unit expected squared norm.
    pub fn gaussian(n: usize, d: usize, scale: Option<f64>, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(
                "gaussian dictionary needs n >= 1 and d >= 1".into(),
            ));
        }
        let scale = scale.unwrap_or(1.0 / (n as f64).sqrt());
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gaussian dictionary scale must be positive, got {scale}"
            )));
        }
        let atoms = DMatrix::from_fn(n, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        Self::from_matrix(atoms)
    }

    /// Wraps an atom matrix, validating atoms and detecting the kind.
    ///
    /// Kind detection: an exact identity matrix is the standard basis;
    /// otherwise columns with `|A^T A - I| <= 1e-10` are orthonormal;
    /// anything else is general.
    pub fn from_matrix(atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(Error::InvalidArgument("empty atom matrix".into()));
        }
        let mut atom_norms = DVector::zeros(atoms.ncols());
        for j in 0..atoms.ncols() {
            let col = atoms.column(j);
            let norm = col.norm();
            if norm == 0.0 || !col.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidAtom { index: j });
            }
            atom_norms[j] = norm;
        }
        let kind = detect_kind(&atoms);
        Ok(Dictionary {
            atoms,
            kind,
            atom_norms,
        })
    }

    /// Loads an atom matrix from a text or `.bin` matrix file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_matrix(matio::read_matrix(path)?)
    }

    /// Writes the atom matrix to a text or `.bin` matrix file.
    pub fn save(&self, path: &Path) -> Result<()> {
        matio::write_matrix(path, &self.atoms)
    }

    /// Signal dimension `n`.
    pub fn n(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of atoms `d`.
    pub fn num_atoms(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn kind(&self) -> DictionaryKind {
        self.kind
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn atom_norms(&self) -> &DVector<f64> {
        &self.atom_norms
    }

    pub fn is_standard(&self) -> bool {
        self.kind == DictionaryKind::StandardBasis
    }

    /// The `n x |support|` matrix of the selected atoms.
    pub fn atoms_for(&self, support: &[usize]) -> DMatrix<f64> {
        self.atoms.select_columns(support.iter())
    }

    /// `sum_j coeffs[j] * atom[support[j]]`.
    pub fn synthesize(&self, support: &[usize], coeffs: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(support.len(), coeffs.len());
        let mut out = DVector::zeros(self.n());
        if self.is_standard() {
            for (k, &j) in support.iter().enumerate() {
                out[j] = coeffs[k];
            }
        } else {
            for (k, &j) in support.iter().enumerate() {
                out.axpy(coeffs[k], &self.atoms.column(j), 1.0);
            }
        }
        out
    }

    /// Analysis correlations `A^T w` (the signal itself for the standard
    /// basis).
    pub fn correlate(&self, w: &DVector<f64>) -> DVector<f64> {
        if self.is_standard() {
            w.clone()
        } else {
            self.atoms.tr_mul(w)
        }
    }
}

fn detect_kind(atoms: &DMatrix<f64>) -> DictionaryKind {
    if atoms.is_square() && atoms == &DMatrix::identity(atoms.nrows(), atoms.ncols()) {
        return DictionaryKind::StandardBasis;
    }
    if atoms.ncols() <= atoms.nrows() {
        let gram = atoms.tr_mul(atoms);
        let mut max_dev: f64 = 0.0;
        for r in 0..gram.nrows() {
            for c in 0..gram.ncols() {
                let target = if r == c { 1.0 } else { 0.0 };
                max_dev = max_dev.max((gram[(r, c)] - target).abs());
            }
        }
        if max_dev <= ORTHONORMAL_TOL {
            return DictionaryKind::Orthonormal;
        }
    }
    DictionaryKind::General
}

/// Squared operator norm `||B||^2`, by dense SVD for small matrices and
/// power iteration on the smaller Gram operator otherwise (tolerance 1e-10,
/// at most 10000 iterations, deterministic start vector).
pub(crate) fn operator_norm_sq(b: &DMatrix<f64>) -> f64 {
    const TOL: f64 = 1e-10;
    const MAX_ITERS: usize = 10_000;

    if b.nrows().max(b.ncols()) <= SVD_FALLBACK_DIM {
        let sv = b.clone().svd(false, false).singular_values;
        return sv[0] * sv[0];
    }

    let tall = b.nrows() >= b.ncols();
    let dim = if tall { b.ncols() } else { b.nrows() };
    // Irregular positive entries: deterministic and extremely unlikely to be
    // orthogonal to the leading singular subspace of real data.
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + ((i * 2_654_435_761) % 97) as f64 / 97.0);
    v /= v.norm();
    let mut lambda = 0.0f64;
    for k in 0..MAX_ITERS {
        let w = if tall {
            b.tr_mul(&(b * &v))
        } else {
            b * b.tr_mul(&v)
        };
        let norm = w.norm();
        if norm == 0.0 {
            // Start vector sat in the null space; restart from a basis vector.
            v = DVector::zeros(dim);
            v[k % dim] = 1.0;
            continue;
        }
        v = w / norm;
        let next = if tall {
            (b * &v).norm_squared()
        } else {
            b.tr_mul(&v).norm_squared()
        };
        if (next - lambda).abs() <= TOL * next.max(1e-300) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Stable rank `||B||_F^2 / ||B||^2`. Errors only on the zero matrix.
pub fn stable_rank(b: &DMatrix<f64>) -> Result<f64> {
    let fro_sq = b.norm_squared();
    if fro_sq == 0.0 {
        return Err(Error::InvalidArgument(
            "stable rank of the zero matrix is undefined".into(),
        ));
    }
    Ok(fro_sq / operator_norm_sq(b))
}

/// Monte-Carlo envelope of `||B A x||_2 / ||x||_2` over random `tau`-sparse
/// coefficient vectors `x` with unit coefficient norm. Returns
/// `(lower, upper)`; the true restricted extrema lie outside or on this
/// envelope.
pub fn rip_ratio_estimate(
    data: &DMatrix<f64>,
    dict: &Dictionary,
    tau: usize,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if data.ncols() != dict.n() {
        return Err(Error::Dimension {
            context: "rip_ratio_estimate data columns vs dictionary dimension",
            expected: dict.n(),
            found: data.ncols(),
        });
    }
    if tau == 0 || tau > dict.num_atoms() {
        return Err(Error::InvalidArgument(format!(
            "tau must be in 1..={}, got {tau}",
            dict.num_atoms()
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut lower = f64::INFINITY;
    let mut upper = 0.0f64;
    for _ in 0..trials {
        let support = rng::sample_distinct(rng, dict.num_atoms(), tau);
        let coeffs = loop {
            let c = DVector::from_fn(tau, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = c.norm();
            if norm > 0.0 {
                break c / norm;
            }
        };
        let signal = dict.synthesize(&support, &coeffs);
        let value = (data * signal).norm();
        lower = lower.min(value);
        upper = upper.max(value);
    }
    Ok((lower, upper))
}

/// Exact restricted extrema of `||B A x||_2 / ||x||_2` over all size-`tau`
/// supports: the smallest restricted minimum singular value and the largest
/// restricted maximum singular value of `B * atoms_S`. Exhaustive; errors
/// when the support count exceeds [`EXHAUSTIVE_CAP`].
pub fn restricted_extrema(
    data: &DMatrix<f64>,
    dict: &Dictionary,
    tau: usize,
) -> Result<(f64, f64)> {
    if data.ncols() != dict.n() {
        return Err(Error::Dimension {
            context: "restricted_extrema data columns vs dictionary dimension",
            expected: dict.n(),
            found: data.ncols(),
        });
    }
    let d = dict.num_atoms();
    if tau == 0 || tau > d {
        return Err(Error::InvalidArgument(format!(
            "tau must be in 1..={d}, got {tau}"
        )));
    }
    let count = combin::count_combinations(d, tau);
    if count > EXHAUSTIVE_CAP as u128 {
        return Err(Error::ExhaustiveCap {
            needed: count,
            cap: EXHAUSTIVE_CAP,
        });
    }
    let mut lower = f64::INFINITY;
    let mut upper = 0.0f64;
    combin::for_each_combination(d, tau, |support| {
        let restricted = if dict.is_standard() {
            data.select_columns(support.iter())
        } else {
            data * dict.atoms_for(support)
        };
        let sv = restricted.svd(false, false).singular_values;
        upper = upper.max(sv[0]);
        lower = lower.min(sv[sv.len() - 1]);
    });
    Ok((lower, upper))
}
