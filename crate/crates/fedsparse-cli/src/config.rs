//! Experiment configuration: a TOML file with sections mirroring the
//! library modules. Every key has a default; `print-defaults` emits the
//! full annotated set.

use fedsparse::federation::{Algorithm, FederationConfig};
use fedsparse::local_engine::{CarrySupport, LocalConfig, Subproblem};
use fedsparse::synthdata::SynthSpec;
use fedsparse::{Dictionary, Error};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub sweep: Option<SweepSection>,
    pub data: DataSection,
    pub dictionary: DictionarySection,
    pub federation: FederationSection,
    pub local: LocalSection,
    pub theory: TheorySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Where CSVs and JSON reports go; the FEDSPARSE_OUTPUT_DIR
    /// environment variable overrides it.
    pub output_dir: PathBuf,
    /// Relative-error level that `summary.csv`'s rounds-to-threshold
    /// column reports.
    pub threshold: f64,
    /// One full run per seed; the seed drives data generation, batch
    /// selection, and cohort sampling.
    pub repeat_seeds: Vec<u64>,
    /// Also measure per-client constants and write rate predictions.
    pub emit_theory: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            output_dir: PathBuf::from("fedsparse-out"),
            threshold: 1e-4,
            repeat_seeds: vec![0],
            emit_theory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    KIters,
    CohortSize,
    Alpha,
    LearningRate,
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::KIters => "k_iters",
            SweepParameter::CohortSize => "cohort_size",
            SweepParameter::Alpha => "alpha",
            SweepParameter::LearningRate => "learning_rate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_clients: usize,
    pub per_client: usize,
    pub dim: usize,
    /// Variance of the per-client random mean shift (heterogeneity knob).
    pub alpha: f64,
    /// Client `i` draws entries with variance `1 / i^exponent` (1-based).
    pub variance_decay_exponent: f64,
    pub sparsity: usize,
    /// Target-noise variance; the generator takes its square root.
    pub noise_var: f64,
    pub batch_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_clients: 4,
            per_client: 30,
            dim: 16,
            alpha: 0.5,
            variance_decay_exponent: 1.1,
            sparsity: 3,
            noise_var: 0.0,
            batch_size: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionaryChoice {
    Standard,
    Gaussian,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DictionarySection {
    pub kind: DictionaryChoice,
    /// Number of atoms (gaussian only).
    pub atoms: Option<usize>,
    /// Entry scale (gaussian only); omitted means `1/sqrt(dim)`.
    pub scale: Option<f64>,
    /// Atom-matrix file (file only).
    pub path: Option<PathBuf>,
    /// Seed for the gaussian draw, independent of run seeds.
    pub seed: u64,
}

impl Default for DictionarySection {
    fn default() -> Self {
        DictionarySection {
            kind: DictionaryChoice::Standard,
            atoms: None,
            scale: None,
            path: None,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmChoice {
    Fedgradmp,
    Fedavg,
    Fediterht,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub algorithm: AlgorithmChoice,
    pub rounds: usize,
    /// Clients sampled per round; omitted means full participation.
    pub cohort_size: Option<usize>,
    /// Aggregation weights; omitted means uniform.
    pub weights: Option<Vec<f64>>,
    /// Server-side thresholding approximation factor.
    pub eta3: f64,
    /// Client step size (FedAvg / FedIterHT only).
    pub learning_rate: Option<f64>,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            algorithm: AlgorithmChoice::Fedgradmp,
            rounds: 10,
            cohort_size: None,
            weights: None,
            eta3: 1.0,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Exact,
    GradientDescent,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarryChoice {
    GlobalSupport,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSection {
    pub k_iters: usize,
    pub tau: usize,
    /// Gradient-support approximation factor (>= 1).
    pub eta1: f64,
    /// Thresholding approximation factor (>= 1).
    pub eta2: f64,
    pub solver: SolverChoice,
    /// Accuracy certificate for iterative solvers: the returned restricted
    /// solution is within this distance of the restricted minimizer.
    pub delta: f64,
    /// Optional l2-ball radius applied after every thresholding step.
    pub ball_radius: Option<f64>,
    pub carry_support: CarryChoice,
}

impl Default for LocalSection {
    fn default() -> Self {
        LocalSection {
            k_iters: 3,
            tau: 3,
            eta1: 1.0,
            eta2: 1.0,
            solver: SolverChoice::Exact,
            delta: 0.01,
            ball_radius: None,
            carry_support: CarryChoice::GlobalSupport,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    /// Supports sampled per sparsity level when measuring curvature.
    pub curvature_supports: usize,
    /// Mini-batches sampled per support when measuring curvature.
    pub curvature_batches: usize,
}

impl Default for TheorySection {
    fn default() -> Self {
        TheorySection {
            curvature_supports: 64,
            curvature_batches: 32,
        }
    }
}

/// One run of the sweep grid: the optional swept value plus the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub swept: Option<(SweepParameter, f64)>,
    pub seed: u64,
}

impl Cell {
    /// `k_iters=3_seed=0` / `seed=0` — the middle of every output name.
    pub fn tag(&self) -> String {
        match self.swept {
            Some((parameter, value)) => {
                format!(
                    "{parameter}={}_seed={}",
                    format_value(parameter, value),
                    self.seed
                )
            }
            None => format!("seed={}", self.seed),
        }
    }
}

fn format_value(parameter: SweepParameter, value: f64) -> String {
    match parameter {
        SweepParameter::KIters | SweepParameter::CohortSize => format!("{}", value as usize),
        _ => format!("{value}"),
    }
}

fn err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| err(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let e = &self.experiment;
        if !(e.threshold > 0.0) {
            return Err(err("experiment.threshold must be positive"));
        }
        if e.repeat_seeds.is_empty() {
            return Err(err("experiment.repeat_seeds must list at least one seed"));
        }

        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(err("sweep.values must be nonempty"));
            }
            match sweep.parameter {
                SweepParameter::KIters | SweepParameter::CohortSize => {
                    for &v in &sweep.values {
                        if v < 1.0 || v.fract() != 0.0 {
                            return Err(err(format!(
                                "sweep.values for {} must be positive integers, got {v}",
                                sweep.parameter
                            )));
                        }
                    }
                }
                _ => {
                    if sweep.values.iter().any(|v| !v.is_finite()) {
                        return Err(err("sweep.values must be finite"));
                    }
                }
            }
        }

        let d = &self.data;
        if d.num_clients == 0 || d.per_client == 0 || d.dim == 0 || d.sparsity == 0 {
            return Err(err(
                "data.num_clients, per_client, dim, and sparsity must be >= 1",
            ));
        }
        if d.batch_size == 0 || d.batch_size > d.per_client {
            return Err(err(format!(
                "data.batch_size must be in 1..={}, got {}",
                d.per_client, d.batch_size
            )));
        }
        if d.alpha < 0.0 || d.noise_var < 0.0 {
            return Err(err("data.alpha and data.noise_var must be nonnegative"));
        }
        if d.sparsity > self.dictionary_atoms() {
            return Err(err(format!(
                "data.sparsity {} exceeds the number of atoms {}",
                d.sparsity,
                self.dictionary_atoms()
            )));
        }

        match self.dictionary.kind {
            DictionaryChoice::Standard => {}
            DictionaryChoice::Gaussian => {
                let atoms = self
                    .dictionary
                    .atoms
                    .ok_or_else(|| err("dictionary.atoms is required for kind = \"gaussian\""))?;
                if atoms == 0 {
                    return Err(err("dictionary.atoms must be >= 1"));
                }
            }
            DictionaryChoice::File => {
                if self.dictionary.path.is_none() {
                    return Err(err("dictionary.path is required for kind = \"file\""));
                }
            }
        }

        let f = &self.federation;
        if f.rounds == 0 {
            return Err(err("federation.rounds must be >= 1"));
        }
        if let Some(cohort) = f.cohort_size {
            if cohort == 0 || cohort > d.num_clients {
                return Err(err(format!(
                    "federation.cohort_size must be in 1..={}, got {cohort}",
                    d.num_clients
                )));
            }
        }
        if let Some(weights) = &f.weights {
            if weights.len() != d.num_clients {
                return Err(err(format!(
                    "federation.weights must list {} entries, got {}",
                    d.num_clients,
                    weights.len()
                )));
            }
            if weights.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(err("federation.weights must be nonnegative and finite"));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(err(format!("federation.weights must sum to 1, got {sum}")));
            }
        }
        let needs_rate = matches!(
            f.algorithm,
            AlgorithmChoice::Fedavg | AlgorithmChoice::Fediterht
        );
        let swept_rate = matches!(
            self.sweep.as_ref().map(|s| s.parameter),
            Some(SweepParameter::LearningRate)
        );
        if needs_rate && f.learning_rate.is_none() && !swept_rate {
            return Err(err(
                "federation.learning_rate is required for fedavg / fediterht (or sweep it)",
            ));
        }

        let l = &self.local;
        if l.k_iters == 0 {
            return Err(err("local.k_iters must be >= 1"));
        }
        if l.tau == 0 || l.tau > self.dictionary_atoms() {
            return Err(err(format!(
                "local.tau must be in 1..={}, got {}",
                self.dictionary_atoms(),
                l.tau
            )));
        }
        if l.eta1 < 1.0 || l.eta2 < 1.0 || f.eta3 < 1.0 {
            return Err(err("eta factors must be >= 1"));
        }
        if matches!(
            l.solver,
            SolverChoice::GradientDescent | SolverChoice::Newton
        ) && !(l.delta > 0.0)
        {
            return Err(err("local.delta must be positive for iterative solvers"));
        }
        if let Some(r) = l.ball_radius {
            if !(r > 0.0) {
                return Err(err("local.ball_radius must be positive when set"));
            }
        }

        let t = &self.theory;
        if self.experiment.emit_theory && (t.curvature_supports == 0 || t.curvature_batches == 0) {
            return Err(err(
                "theory.curvature_supports and curvature_batches must be >= 1",
            ));
        }
        Ok(())
    }

    /// Number of atoms of the configured dictionary (dim for files, where
    /// the true count is only known after loading; validation of file
    /// dictionaries happens again at build time).
    fn dictionary_atoms(&self) -> usize {
        match self.dictionary.kind {
            DictionaryChoice::Standard => self.data.dim,
            DictionaryChoice::Gaussian => self.dictionary.atoms.unwrap_or(self.data.dim),
            DictionaryChoice::File => self.data.dim.max(self.data.sparsity),
        }
    }

    /// The sweep-cell × seed grid, sweep-major.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        match &self.sweep {
            Some(sweep) => {
                for &value in &sweep.values {
                    for &seed in &self.experiment.repeat_seeds {
                        cells.push(Cell {
                            swept: Some((sweep.parameter, value)),
                            seed,
                        });
                    }
                }
            }
            None => {
                for &seed in &self.experiment.repeat_seeds {
                    cells.push(Cell { swept: None, seed });
                }
            }
        }
        cells
    }

    pub fn build_dictionary(&self) -> Result<Dictionary, Error> {
        match self.dictionary.kind {
            DictionaryChoice::Standard => Ok(Dictionary::standard_basis(self.data.dim)),
            DictionaryChoice::Gaussian => {
                let atoms = self.dictionary.atoms.expect("validated");
                let mut rng = fedsparse::rng::stream(
                    self.dictionary.seed,
                    fedsparse::rng::tags::DICT_GAUSSIAN,
                    0,
                    0,
                );
                Dictionary::gaussian(self.data.dim, atoms, self.dictionary.scale, &mut rng)
            }
            DictionaryChoice::File => {
                let path = self.dictionary.path.as_ref().expect("validated");
                let dict = Dictionary::load(path)?;
                if dict.n() != self.data.dim {
                    return Err(err(format!(
                        "dictionary at {} has dimension {}, config says {}",
                        path.display(),
                        dict.n(),
                        self.data.dim
                    )));
                }
                Ok(dict)
            }
        }
    }

    /// The generator spec for one cell (alpha may be swept).
    pub fn synth_spec(&self, cell: &Cell) -> SynthSpec {
        let alpha = match cell.swept {
            Some((SweepParameter::Alpha, value)) => value,
            _ => self.data.alpha,
        };
        SynthSpec {
            num_clients: self.data.num_clients,
            per_client: self.data.per_client,
            dim: self.data.dim,
            alpha,
            variance_decay_exponent: self.data.variance_decay_exponent,
            sparsity: self.data.sparsity,
            noise_std: self.data.noise_var.sqrt(),
            batch_size: self.data.batch_size,
            seed: cell.seed,
        }
    }

    /// The federation configuration for one cell (k_iters, cohort_size,
    /// and learning_rate may be swept).
    pub fn federation_config(&self, cell: &Cell) -> FederationConfig {
        let mut k_iters = self.local.k_iters;
        let mut cohort_size = self.federation.cohort_size;
        let mut learning_rate = self.federation.learning_rate;
        match cell.swept {
            Some((SweepParameter::KIters, value)) => k_iters = value as usize,
            Some((SweepParameter::CohortSize, value)) => cohort_size = Some(value as usize),
            Some((SweepParameter::LearningRate, value)) => learning_rate = Some(value),
            _ => {}
        }
        FederationConfig {
            algorithm: match self.federation.algorithm {
                AlgorithmChoice::Fedgradmp => Algorithm::FedGradMp,
                AlgorithmChoice::Fedavg => Algorithm::FedAvg,
                AlgorithmChoice::Fediterht => Algorithm::FedIterHt,
            },
            rounds: self.federation.rounds,
            cohort_size,
            weights: self.federation.weights.clone(),
            eta3: self.federation.eta3,
            local: LocalConfig {
                k_iters,
                tau: self.local.tau,
                eta1: self.local.eta1,
                eta2: self.local.eta2,
                subproblem: match self.local.solver {
                    SolverChoice::Exact => Subproblem::Exact,
                    SolverChoice::GradientDescent => Subproblem::GradientDescent {
                        delta: self.local.delta,
                    },
                    SolverChoice::Newton => Subproblem::Newton {
                        delta: self.local.delta,
                    },
                },
                ball_radius: self.local.ball_radius,
                carry_support: match self.local.carry_support {
                    CarryChoice::GlobalSupport => CarrySupport::GlobalSupport,
                    CarryChoice::Empty => CarrySupport::Empty,
                },
            },
            learning_rate,
            seed: cell.seed,
        }
    }
}
