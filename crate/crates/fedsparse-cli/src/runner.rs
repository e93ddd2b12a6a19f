//! Executes an experiment config: one federation run per (sweep value,
//! seed) cell, a per-run round CSV, optional rate-prediction JSON, and a
//! final `summary.csv` across all cells.

use crate::config::{Cell, ExperimentConfig, SolverChoice};
use anyhow::{bail, Context, Result};
use fedsparse::federation::{rounds_to_threshold, write_rounds_csv, FederationConfig};
use fedsparse::local_engine::Subproblem;
use fedsparse::matio::fmt17;
use fedsparse::rng::{stream, tags};
use fedsparse::synthdata::{generate, squared_objectives};
use fedsparse::theory::{
    compute_client_constants, optimize_theta, write_rates_json, RatePrediction, Variant,
};
use fedsparse::{run_federation, CurvatureMode, Objective, SparseEstimate};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

struct SummaryRow {
    cell: Cell,
    rounds_to_threshold: Option<usize>,
    final_rel_error: f64,
    final_loss: f64,
    final_support_f1: f64,
}

/// Runs every cell of the experiment, writing into `output_dir`.
///
/// Refuses to touch any pre-existing output file unless `force` is set,
/// so two configs pointed at the same directory cannot silently clobber
/// each other.
pub fn run_experiment(config: &ExperimentConfig, output_dir: &Path, force: bool) -> Result<()> {
    let cells = config.cells();
    let planned = planned_paths(config, output_dir, &cells);
    if !force {
        if let Some(existing) = planned.iter().find(|p| p.exists()) {
            bail!(
                "{} already exists; pass --force to overwrite",
                existing.display()
            );
        }
    }
    fs::create_dir_all(output_dir)
        .with_context(|| format!("creating output directory {}", output_dir.display()))?;

    let dict = Arc::new(config.build_dictionary()?);
    let mut rows = Vec::with_capacity(cells.len());
    let mut written = 0usize;
    for cell in &cells {
        let spec = config.synth_spec(cell);
        let (datasets, truth) = generate(&spec, &dict)?;
        let objectives = squared_objectives(datasets, &dict)?;
        let fed = config.federation_config(cell);
        let result = run_federation(&objectives, &fed, Some(&truth))?;

        let run_path = output_dir.join(format!("run_{}.csv", cell.tag()));
        write_rounds_csv(&run_path, &result.records)?;
        written += 1;

        let last = result.records.last().expect("rounds >= 1 is validated");
        let reached = rounds_to_threshold(&result.records, config.experiment.threshold);
        rows.push(SummaryRow {
            cell: *cell,
            rounds_to_threshold: reached,
            final_rel_error: last.rel_error,
            final_loss: last.loss,
            final_support_f1: last.support_f1,
        });

        if config.experiment.emit_theory {
            // A bound can be vacuous on a measured instance (e.g. the
            // well-conditioning requirement fails at high heterogeneity or
            // tiny batches). That is a property of the data, not a failure
            // of the experiment: warn and move on without a rates file.
            match predict_rates(config, cell, &fed, &objectives, &truth) {
                Ok(predictions) => {
                    let rates_path = output_dir.join(format!("rates_{}.json", cell.tag()));
                    write_rates_json(&rates_path, &predictions)?;
                    written += 1;
                }
                Err(e) => eprintln!("[{}] rate prediction skipped: {e}", cell.tag()),
            }
        }

        match reached {
            Some(t) => println!(
                "[{}] reached {:.1e} at round {t}; final rel_error {:.3e}",
                cell.tag(),
                config.experiment.threshold,
                last.rel_error
            ),
            None => println!(
                "[{}] did not reach {:.1e}; final rel_error {:.3e}",
                cell.tag(),
                config.experiment.threshold,
                last.rel_error
            ),
        }
    }

    write_summary(&output_dir.join("summary.csv"), &rows)?;
    written += 1;
    println!("wrote {written} file(s) to {}", output_dir.display());
    Ok(())
}

fn planned_paths(config: &ExperimentConfig, output_dir: &Path, cells: &[Cell]) -> Vec<PathBuf> {
    let mut planned = Vec::with_capacity(2 * cells.len() + 1);
    for cell in cells {
        planned.push(output_dir.join(format!("run_{}.csv", cell.tag())));
        if config.experiment.emit_theory {
            planned.push(output_dir.join(format!("rates_{}.json", cell.tag())));
        }
    }
    planned.push(output_dir.join("summary.csv"));
    planned
}

/// Measures per-client curvature/variance constants on the cell's
/// objectives and evaluates every rate bound that applies to the
/// configured run, each at its own grid-optimized theta.
fn predict_rates(
    config: &ExperimentConfig,
    cell: &Cell,
    fed: &FederationConfig,
    objectives: &[Objective],
    truth: &SparseEstimate,
) -> Result<Vec<RatePrediction>> {
    let n = objectives.len();
    let weights = match &fed.weights {
        Some(w) => w.clone(),
        None => vec![1.0 / n as f64; n],
    };
    let mode = CurvatureMode::Sampled {
        supports: config.theory.curvature_supports,
        batches: config.theory.curvature_batches,
    };

    let mut constants = Vec::with_capacity(n);
    for (i, obj) in objectives.iter().enumerate() {
        let mut rng = stream(cell.seed, tags::CONSTANTS, i as u64, 0);
        constants.push(compute_client_constants(
            obj,
            fed.local.tau,
            truth,
            mode,
            fed.local.ball_radius,
            &mut rng,
        )?);
    }

    let mut variants = vec![Variant::Exact];
    if matches!(
        config.local.solver,
        SolverChoice::GradientDescent | SolverChoice::Newton
    ) {
        let delta = match fed.local.subproblem {
            Subproblem::GradientDescent { delta } | Subproblem::Newton { delta } => delta,
            Subproblem::Exact => unreachable!("solver choice maps to an iterative subproblem"),
        };
        variants.push(Variant::Inexact { delta });
    }
    if let Some(cohort_size) = fed.cohort_size {
        variants.push(Variant::Partial { cohort_size });
    }
    variants.push(Variant::NoVarianceBound);

    let mut predictions = Vec::with_capacity(variants.len());
    for variant in variants {
        predictions.push(optimize_theta(
            &constants,
            &weights,
            fed.local.k_iters,
            fed.local.eta1,
            fed.local.eta2,
            fed.eta3,
            variant,
        )?);
    }
    Ok(predictions)
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from(
        "parameter,value,seed,rounds_to_threshold,final_rel_error,final_loss,final_support_f1\n",
    );
    for row in rows {
        let (parameter, value) = match row.cell.swept {
            Some((p, v)) => (p.to_string(), fmt17(v)),
            None => (String::new(), String::new()),
        };
        let reached = row
            .rounds_to_threshold
            .map(|t| t.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{parameter},{value},{},{reached},{},{},{}\n",
            row.cell.seed,
            fmt17(row.final_rel_error),
            fmt17(row.final_loss),
            fmt17(row.final_support_f1),
        ));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
