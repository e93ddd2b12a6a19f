//! Synthetic heterogeneous federated regression data.
//!
//! A shared sparse ground truth is planted once; each client then draws its
//! own data matrix with a client-specific feature mean (heterogeneity knob
//! `alpha`) and a client-indexed variance decay, and its targets are the
//! planted signal's responses plus optional Gaussian noise. All draws are
//! keyed deterministic streams, so a spec reproduces the same federation
//! byte-for-byte.

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matio;
use crate::objectives::{ClientDataset, Objective};
use crate::rng::{self, tags};
use crate::sparse_ops::SparseEstimate;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub num_clients: usize,
    /// Samples per client.
    pub per_client: usize,
    /// Signal dimension (must match the dictionary).
    pub dim: usize,
    /// Variance of the client feature means: client `i` draws its scalar
    /// mean from `N(0, alpha)`. Zero means homogeneous clients.
    pub alpha: f64,
    /// Client `i` (1-based) draws features with variance `i^-exponent`.
    pub variance_decay_exponent: f64,
    /// Number of planted nonzero coefficients.
    pub sparsity: usize,
    /// Standard deviation of the additive target noise.
    pub noise_std: f64,
    /// Mini-batch size stamped on every generated dataset.
    pub batch_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self, dict: &Dictionary) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
        }
        if self.per_client == 0 {
            return Err(Error::InvalidArgument("per_client must be >= 1".into()));
        }
        if self.dim != dict.n() {
            return Err(Error::Dimension {
                context: "synthetic dim vs dictionary dimension",
                expected: dict.n(),
                found: self.dim,
            });
        }
        if self.sparsity == 0 || self.sparsity > dict.num_atoms() {
            return Err(Error::InvalidArgument(format!(
                "sparsity must be in 1..={}, got {}",
                dict.num_atoms(),
                self.sparsity
            )));
        }
        if self.batch_size == 0 || self.batch_size > self.per_client {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be in 1..={}, got {}",
                self.per_client, self.batch_size
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be nonnegative and finite, got {}",
                self.alpha
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "noise_std must be nonnegative and finite, got {}",
                self.noise_std
            )));
        }
        if !self.variance_decay_exponent.is_finite() {
            return Err(Error::InvalidArgument(
                "variance_decay_exponent must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Generates the federation: one dataset per client plus the planted truth
/// (unit-norm coefficients on a uniformly random support).
pub fn generate(
    spec: &SynthSpec,
    dict: &Dictionary,
) -> Result<(Vec<ClientDataset>, SparseEstimate)> {
    spec.validate(dict)?;

    let truth = planted_truth(spec, dict);
    let mut datasets = Vec::with_capacity(spec.num_clients);
    for i in 0..spec.num_clients {
        let mut data_rng = rng::stream(spec.seed, tags::SYNTH_DATA, i as u64, 0);
        let mean = spec.alpha.sqrt() * data_rng.sample::<f64, _>(StandardNormal);
        // Client indices are 1-based in the decay law.
        let std = ((i + 1) as f64).powf(-spec.variance_decay_exponent / 2.0);
        let data = DMatrix::from_fn(spec.per_client, spec.dim, |_, _| {
            mean + std * data_rng.sample::<f64, _>(StandardNormal)
        });

        let mut targets = &data * &truth.signal;
        if spec.noise_std > 0.0 {
            let mut noise_rng = rng::stream(spec.seed, tags::SYNTH_NOISE, i as u64, 0);
            for v in targets.iter_mut() {
                *v += spec.noise_std * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        datasets.push(ClientDataset::new(data, targets, spec.batch_size, i)?);
    }
    Ok((datasets, truth))
}

fn planted_truth(spec: &SynthSpec, dict: &Dictionary) -> SparseEstimate {
    let mut truth_rng = rng::stream(spec.seed, tags::SYNTH_TRUTH, 0, 0);
    let support = rng::sample_distinct(&mut truth_rng, dict.num_atoms(), spec.sparsity);
    let coeffs = loop {
        let c = DVector::from_fn(spec.sparsity, |_, _| {
            truth_rng.sample::<f64, _>(StandardNormal)
        });
        let norm = c.norm();
        if norm > 0.0 {
            break c / norm;
        }
    };
    let signal = dict.synthesize(&support, &coeffs);
    SparseEstimate::new(signal, support, coeffs, spec.sparsity)
        .expect("planted truth is a valid sparse estimate")
}

/// Client-dissimilarity summary at a reference point (usually the planted
/// truth): per-client squared full-gradient norms and their weighted sum.
#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneityReport {
    /// `sum_i p_i ||grad f_i(x)||^2`.
    pub zeta_star_sq: f64,
    pub grad_norms_sq: Vec<f64>,
}

pub fn heterogeneity_report(
    objectives: &[Objective],
    weights: &[f64],
    at: &DVector<f64>,
) -> Result<HeterogeneityReport> {
    if objectives.len() != weights.len() {
        return Err(Error::Dimension {
            context: "heterogeneity weights vs objectives",
            expected: objectives.len(),
            found: weights.len(),
        });
    }
    let grad_norms_sq: Vec<f64> = objectives
        .iter()
        .map(|o| o.full_gradient(at).norm_squared())
        .collect();
    let zeta_star_sq = grad_norms_sq.iter().zip(weights).map(|(g, p)| p * g).sum();
    Ok(HeterogeneityReport {
        zeta_star_sq,
        grad_norms_sq,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    clients: Vec<DumpEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpEntry {
    id: usize,
    batch_size: usize,
    data: String,
    targets: String,
}

/// Writes every client dataset into `dir` (data matrix, target vector, and
/// a manifest tying them together).
pub fn dump_datasets(dir: &Path, datasets: &[ClientDataset]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut manifest = DumpManifest {
        clients: Vec::with_capacity(datasets.len()),
    };
    for ds in datasets {
        let data_name = format!("client_{:04}_data.txt", ds.client_id);
        let targets_name = format!("client_{:04}_targets.txt", ds.client_id);
        matio::write_matrix_text(&dir.join(&data_name), &ds.data)?;
        matio::write_vector_text(&dir.join(&targets_name), &ds.targets)?;
        manifest.clients.push(DumpEntry {
            id: ds.client_id,
            batch_size: ds.batch_size,
            data: data_name,
            targets: targets_name,
        });
    }
    let manifest_path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, body).map_err(|e| Error::Io {
        path: manifest_path,
        source: e,
    })
}

/// Reads a federation previously written by [`dump_datasets`].
pub fn load_datasets(dir: &Path) -> Result<Vec<ClientDataset>> {
    let manifest_path = dir.join("manifest.json");
    let body = fs::read_to_string(&manifest_path).map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    let manifest: DumpManifest = serde_json::from_str(&body)?;
    manifest
        .clients
        .iter()
        .map(|entry| {
            ClientDataset::load(
                &dir.join(&entry.data),
                &dir.join(&entry.targets),
                false,
                entry.batch_size,
                entry.id,
            )
        })
        .collect()
}

/// Builds squared-loss objectives over the generated datasets against a
/// shared dictionary.
pub fn squared_objectives(
    datasets: Vec<ClientDataset>,
    dict: &Arc<Dictionary>,
) -> Result<Vec<Objective>> {
    datasets
        .into_iter()
        .map(|ds| Objective::new(crate::objectives::LossKind::Squared, ds, dict.clone()))
        .collect()
}
