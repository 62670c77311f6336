//! Monte Carlo experiment runner and summary metrics.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gm1::{gm1_generate_with, gm1_thetas, Gm1Params};
use super::gm2::{gm2_generate_with, gm2_thetas_monte_carlo, Gm2Params};
use super::rng::derive_seed;
use super::scenario::{scenario_learner, Generator, Scenario};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{
    coefficient_names, estimate_auto, normal_quantile, EffectPair, EstimandConfig, EstimateResult,
    Projection,
};

fn default_truth_draws() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub generator: Generator,
    pub scenario: Scenario,
    pub n: Vec<usize>,
    #[serde(default)]
    pub r1: Vec<f64>,
    #[serde(default)]
    pub r2: Vec<f64>,
    #[serde(default)]
    pub config: EstimandConfig,
    /// Overrides the plan-level replicate count.
    #[serde(default)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub seed: u64,
    #[serde(default)]
    pub replicates: usize,
    #[serde(default)]
    pub cells: Vec<CellPlan>,
    #[serde(default)]
    pub gm1: Gm1Params,
    /// Draws for the GM-2 definition-level truth.
    #[serde(default = "default_truth_draws")]
    pub gm2_truth_draws: usize,
}

/// Per-`t` mediation functionals `[t − 1][a][b]`.
pub type Thetas = Vec<[[f64; 2]; 2]>;

/// Projects per-`t` functionals onto `f` for the chosen effect pair.
pub fn project_effects(thetas: &[[[f64; 2]; 2]], proj: &Projection, pair: EffectPair) -> Vec<f64> {
    let p = proj.dim();
    let blocks = if pair == EffectPair::TotalOnly { 1 } else { 2 };
    let mut rhs = DVector::zeros(blocks * p);
    for (k, th) in thetas.iter().enumerate() {
        let w = proj.weights.at(k + 1);
        let d = match pair {
            EffectPair::Primary => [th[1][0] - th[0][0], th[1][1] - th[1][0]],
            EffectPair::Swapped => [th[1][1] - th[0][1], th[0][1] - th[0][0]],
            EffectPair::TotalOnly => [th[1][1] - th[0][0], 0.0],
        };
        for j in 0..p {
            let f = proj.features[k][j];
            for (b, dv) in d.iter().take(blocks).enumerate() {
                rhs[b * p + j] += w * f * dv;
            }
        }
    }
    proj.bread_inv_times(&rhs).iter().copied().collect()
}

/// Caches the per-`t` truths of each generator.
pub struct TruthCache {
    gm1: Gm1Params,
    gm2_draws: usize,
    gm2_seed: u64,
    store: HashMap<Generator, Thetas>,
}

impl TruthCache {
    pub fn new(gm1: Gm1Params, gm2_draws: usize, gm2_seed: u64) -> Self {
        Self {
            gm1,
            gm2_draws,
            gm2_seed,
            store: HashMap::new(),
        }
    }

    pub fn thetas(&mut self, generator: Generator) -> &Thetas {
        let (gm1, draws, seed) = (&self.gm1, self.gm2_draws, self.gm2_seed);
        self.store
            .entry(generator)
            .or_insert_with(|| match generator {
                Generator::Gm1 => gm1_thetas(gm1),
                Generator::Gm2 => {
                    log::info!("computing GM-2 truths from {draws} definition-level draws");
                    gm2_thetas_monte_carlo(&Gm2Params::default(), draws, seed).theta
                }
            })
    }

    pub fn insert(&mut self, generator: Generator, thetas: Thetas) {
        self.store.insert(generator, thetas);
    }
}

pub fn horizon(generator: Generator, gm1: &Gm1Params) -> usize {
    match generator {
        Generator::Gm1 => gm1.horizon,
        Generator::Gm2 => Gm2Params::default().horizon,
    }
}

pub fn generate(generator: Generator, gm1: &Gm1Params, n: usize, seed: u64) -> Dataset {
    match generator {
        Generator::Gm1 => gm1_generate_with(gm1, n, seed),
        Generator::Gm2 => gm2_generate_with(&Gm2Params::default(), n, seed),
    }
}

/// Generates one dataset and estimates; the perturbation draw and the fold
/// assignment are keyed by the same replicate seed.
pub fn run_replicate(
    generator: Generator,
    scenario: &Scenario,
    gm1: &Gm1Params,
    rates: Option<(f64, f64)>,
    n: usize,
    config: &EstimandConfig,
    seed: u64,
) -> Result<EstimateResult> {
    let ds = generate(generator, gm1, n, seed);
    let learner = scenario_learner(generator, scenario, gm1, rates, n, derive_seed(seed, &[1]))?;
    estimate_auto(&ds, &learner, config, derive_seed(seed, &[2]))
}

/// Estimates and standard errors of one successful replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
}

impl From<&EstimateResult> for ReplicateSummary {
    fn from(r: &EstimateResult) -> Self {
        Self {
            estimate: r.gamma_hat.clone(),
            se: r.se.clone(),
        }
    }
}

/// Replicates in index order; failures carry their error message.
pub fn run_replicates(
    generator: Generator,
    scenario: &Scenario,
    gm1: &Gm1Params,
    rates: Option<(f64, f64)>,
    n: usize,
    config: &EstimandConfig,
    replicates: usize,
    seed: u64,
) -> Vec<std::result::Result<ReplicateSummary, String>> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            run_replicate(
                generator,
                scenario,
                gm1,
                rates,
                n,
                config,
                derive_seed(seed, &[r as u64]),
            )
            .map(|res| ReplicateSummary::from(&res))
            .map_err(|e| e.to_string())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub generator: String,
    pub scenario: String,
    pub n: usize,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
    pub param: String,
    pub bias: f64,
    pub rootn_abs_bias: f64,
    pub rmse: f64,
    pub ase_sd: f64,
    pub coverage: f64,
    pub mc_se_coverage: f64,
    pub replicates: usize,
    pub failed: usize,
}

/// Per-parameter bias, RMSE, ASE/SD and Wald coverage against `truth`.
pub fn summarize(
    outcomes: &[std::result::Result<ReplicateSummary, String>],
    truth: &[f64],
    names: &[String],
    level: f64,
) -> Vec<(String, ParamMetrics)> {
    let ok: Vec<&ReplicateSummary> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let z = normal_quantile(level);
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let est: Vec<f64> = ok.iter().map(|s| s.estimate[k]).collect();
            let se: Vec<f64> = ok.iter().map(|s| s.se[k]).collect();
            (name.clone(), ParamMetrics::compute(&est, &se, truth[k], z))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamMetrics {
    pub mean: f64,
    pub bias: f64,
    pub mean_abs_error: f64,
    pub rmse: f64,
    pub sd: f64,
    pub ase: f64,
    pub ase_sd: f64,
    pub coverage: f64,
    pub mc_se_coverage: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mc_se_mean: f64,
    pub replicates: usize,
}

impl ParamMetrics {
    pub fn compute(est: &[f64], se: &[f64], truth: f64, z: f64) -> Self {
        let r = est.len();
        let rf = r as f64;
        if r == 0 {
            return Self {
                mean: f64::NAN,
                bias: f64::NAN,
                mean_abs_error: f64::NAN,
                rmse: f64::NAN,
                sd: f64::NAN,
                ase: f64::NAN,
                ase_sd: f64::NAN,
                coverage: f64::NAN,
                mc_se_coverage: f64::NAN,
                mc_se_mean: f64::NAN,
                replicates: 0,
            };
        }
        let mean = est.iter().sum::<f64>() / rf;
        let sd = if r > 1 {
            (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt()
        } else {
            f64::NAN
        };
        let ase = se.iter().sum::<f64>() / rf;
        let covered = est
            .iter()
            .zip(se)
            .filter(|(e, s)| (*e - truth).abs() <= z * *s)
            .count() as f64;
        let coverage = covered / rf;
        Self {
            mean,
            bias: mean - truth,
            mean_abs_error: est.iter().map(|e| (e - truth).abs()).sum::<f64>() / rf,
            rmse: (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / rf).sqrt(),
            sd,
            ase,
            ase_sd: ase / sd,
            coverage,
            mc_se_coverage: (coverage * (1.0 - coverage) / rf).sqrt(),
            mc_se_mean: sd / rf.sqrt(),
            replicates: r,
        }
    }
}

/// Runs every cell of the plan. Failed replicates are counted, not fatal.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<MetricRow>> {
    let mut truths = TruthCache::new(
        plan.gm1.clone(),
        plan.gm2_truth_draws,
        derive_seed(plan.seed, &[u64::MAX]),
    );
    let mut rows = Vec::new();
    for (ci, cell) in plan.cells.iter().enumerate() {
        cell.config.validate()?;
        let replicates = cell.replicates.unwrap_or(plan.replicates);
        let grid: Vec<Option<(f64, f64)>> = if cell.scenario.uses_rates() {
            if cell.r1.is_empty() || cell.r2.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "cell {ci}: perturbed scenario needs r1 and r2 grids"
                )));
            }
            cell.r1
                .iter()
                .flat_map(|&a| cell.r2.iter().map(move |&b| Some((a, b))))
                .collect()
        } else {
            vec![None]
        };
        if replicates == 0 {
            continue;
        }
        let proj = Projection::from_config(&cell.config, horizon(cell.generator, &plan.gm1))?;
        let truth = project_effects(
            truths.thetas(cell.generator),
            &proj,
            cell.config.effect_pair,
        );
        let names = coefficient_names(cell.config.effect_pair, cell.config.feature_map.dim());
        for &n in &cell.n {
            for rates in &grid {
                let seed = derive_seed(plan.seed, &[ci as u64, n as u64]);
                log::info!(
                    "cell {ci} ({}) n={n} rates={rates:?}: {replicates} replicates",
                    cell.scenario.label()
                );
                let outcomes = run_replicates(
                    cell.generator,
                    &cell.scenario,
                    &plan.gm1,
                    *rates,
                    n,
                    &cell.config,
                    replicates,
                    seed,
                );
                let failed = outcomes.iter().filter(|o| o.is_err()).count();
                if let Some(Err(e)) = outcomes.iter().find(|o| o.is_err()) {
                    log::warn!("cell {ci} n={n}: {failed} replicates failed, first error: {e}");
                }
                for (param, m) in summarize(&outcomes, &truth, &names, cell.config.level) {
                    rows.push(MetricRow {
                        generator: cell.generator.to_string(),
                        scenario: cell.scenario.label(),
                        n,
                        r1: rates.map(|r| r.0),
                        r2: rates.map(|r| r.1),
                        param,
                        bias: m.bias,
                        rootn_abs_bias: (n as f64).sqrt() * m.bias.abs(),
                        rmse: m.rmse,
                        ase_sd: m.ase_sd,
                        coverage: m.coverage,
                        mc_se_coverage: m.mc_se_coverage,
                        replicates: m.replicates,
                        failed,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub const METRIC_COLUMNS: [&str; 14] = [
    "generator",
    "scenario",
    "n",
    "r1",
    "r2",
    "param",
    "bias",
    "rootn_abs_bias",
    "rmse",
    "ase_sd",
    "coverage",
    "mc_se_coverage",
    "replicates",
    "failed",
];

/// Writes the metrics table; the header is written even when empty.
pub fn write_metrics<W: Write>(rows: &[MetricRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(METRIC_COLUMNS)
        .map_err(|e| Error::csv(0, e.to_string()))?;
    for row in rows {
        wtr.serialize(row)
            .map_err(|e| Error::csv(0, e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureMap, WeightKind};
    use crate::simulation::gm1::gm1_true_estimands;

    #[test]
    fn empty_plan_gives_empty_table() {
        let plan: ExperimentPlan = serde_json::from_str(r#"{"seed": 1}"#).unwrap();
        let rows = run_experiment(&plan).unwrap();
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().trim(),
            METRIC_COLUMNS.join(",")
        );
    }

    #[test]
    fn zero_replicates_skip_cell() {
        let plan: ExperimentPlan = serde_json::from_str(
            r#"{"seed": 1, "replicates": 0, "cells": [{"generator": "gm1", "scenario": {"kind": "exact"}, "n": [50]}]}"#,
        )
        .unwrap();
        assert!(run_experiment(&plan).unwrap().is_empty());
    }

    #[test]
    fn small_grid_runs_and_is_reproducible() {
        let plan: ExperimentPlan = serde_json::from_str(
            r#"{"seed": 3, "replicates": 4, "cells": [
                {"generator": "gm1", "scenario": {"kind": "perturbed"}, "n": [100], "r1": [0.1, 0.5], "r2": [0.5]}
            ]}"#,
        )
        .unwrap();
        let rows = run_experiment(&plan).unwrap();
        assert_eq!(rows.len(), 2 * 2);
        assert!(rows.iter().all(|r| r.replicates == 4 && r.failed == 0));
        assert_eq!(rows, run_experiment(&plan).unwrap());
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("gm1,perturbed,100,0.1,0.5,alpha[1],"));
    }

    #[test]
    fn failures_are_recorded() {
        // Stratum fits cannot succeed with two participants and a large spec.
        let plan: ExperimentPlan = serde_json::from_str(
            r#"{"seed": 3, "replicates": 2, "cells": [
                {"generator": "gm1", "scenario": {"kind": "gm1_working"}, "n": [2]}
            ]}"#,
        )
        .unwrap();
        let rows = run_experiment(&plan).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows
            .iter()
            .all(|r| r.failed == 2 && r.replicates == 0 && r.bias.is_nan()));
    }

    #[test]
    fn projection_matches_gm1_helper() {
        let params = Gm1Params::default();
        let proj = Projection::new(&FeatureMap::Linear, &WeightKind::Uniform, 5).unwrap();
        let (a, b) = gm1_true_estimands(&params, &proj);
        let g = project_effects(&gm1_thetas(&params), &proj, EffectPair::Primary);
        assert_eq!(g, [a, b].concat());
        let tot = project_effects(&gm1_thetas(&params), &proj, EffectPair::TotalOnly);
        for k in 0..2 {
            assert!((tot[k] - g[k] - g[2 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_arithmetic() {
        let m = ParamMetrics::compute(&[1.0, 3.0], &[1.0, 0.5], 2.0, 1.96);
        assert_eq!(m.bias, 0.0);
        assert_eq!(m.coverage, 0.5);
        assert_eq!(m.rmse, 1.0);
        assert!((m.sd - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.ase_sd - 0.75 / 2f64.sqrt()).abs() < 1e-15);
    }
}
