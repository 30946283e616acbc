//! The offline-vs-online model-selection experiment.
//!
//! Per dataset, `L` models are trained on the logged history, evaluated
//! offline over the whole (VAL, beta, k) grid, and served live to measure
//! per-model implicit CTR. Model Selection Recall (MSR) then asks, for each
//! (val, beta) pair: in how many (dataset, k) cells does the model with the
//! best offline recall coincide with the model with the best online CTR?

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::data::{compute_popularity, InteractionLog};
use crate::models::RecModel;
use crate::numfmt::{fmt_sig12, round_sig12};
use crate::offline::{ColdStartPolicy, MetricError, RecallSweep, Validation};
use crate::online::{ictr, OnlineError, RecommendationEvent};
use crate::seeded::substream_hash;
use crate::sim::{run_live_phase, SimError, SimModelSpec, World, WorldConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset `{dataset}`: {source}")]
    Sim {
        dataset: String,
        source: SimError,
    },
    #[error("dataset `{dataset}`, model `{model}`, val {val:?}: {source}")]
    Metric {
        dataset: String,
        model: String,
        val: Validation,
        source: MetricError,
    },
    #[error("dataset `{dataset}`, model `{model}`: {source}")]
    Online {
        dataset: String,
        model: String,
        source: OnlineError,
    },
    #[error("missing cell: {0}")]
    MissingCell(String),
    #[error("malformed results row {line}: {reason}")]
    MalformedResults { line: usize, reason: String },
}

/// The hyperparameter grid swept per dataset and model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentGrid {
    pub k_values: Vec<usize>,
    pub beta_values: Vec<f64>,
    pub val_values: Vec<Validation>,
}

impl Default for ExperimentGrid {
    /// 14 list lengths, 21 penalization strengths, both splits.
    fn default() -> Self {
        let mut k_values: Vec<usize> = (1..=10).collect();
        k_values.extend([15, 20, 25, 50]);
        let beta_values = (0..=20).map(|j| (5 * j) as f64 / 100.0).collect();
        ExperimentGrid {
            k_values,
            beta_values,
            val_values: vec![Validation::Loo, Validation::Lloo],
        }
    }
}

impl ExperimentGrid {
    fn validate(&self) -> Result<(), ExperimentError> {
        if self.k_values.is_empty() || self.beta_values.is_empty() || self.val_values.is_empty() {
            return Err(ExperimentError::InvalidConfig(
                "grid must have at least one k, beta and val".to_string(),
            ));
        }
        Ok(())
    }
}

/// All raw measurements of one experiment run: every offline recall cell and
/// every per-model online CTR, densely indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub grid: ExperimentGrid,
    pub datasets: Vec<String>,
    pub model_labels: Vec<String>,
    /// `recall[((dataset * n_vals + val) * n_betas + beta) * n_ks + k][model]`
    recall: Vec<Vec<f64>>,
    /// `ictr[dataset][model]`
    ictr: Vec<Vec<f64>>,
}

impl ExperimentResults {
    pub fn n_models(&self) -> usize {
        self.model_labels.len()
    }

    fn cell_index(&self, dataset: usize, val_idx: usize, beta_idx: usize, k_idx: usize) -> usize {
        ((dataset * self.grid.val_values.len() + val_idx) * self.grid.beta_values.len() + beta_idx)
            * self.grid.k_values.len()
            + k_idx
    }

    /// Offline recall vector `E` (one entry per model) for one grid cell.
    pub fn recall_vector(
        &self,
        dataset: usize,
        val_idx: usize,
        beta_idx: usize,
        k_idx: usize,
    ) -> &[f64] {
        &self.recall[self.cell_index(dataset, val_idx, beta_idx, k_idx)]
    }

    /// Online CTR vector `S` (one entry per model) for one dataset.
    pub fn ictr_vector(&self, dataset: usize) -> &[f64] {
        &self.ictr[dataset]
    }
}

/// Configuration of a fully simulated experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedExperimentConfig {
    /// Template world; each dataset gets a seed derived from
    /// `(seed, dataset index)` so worlds are independent but reproducible.
    pub world: WorldConfig,
    pub n_datasets: usize,
    pub model_specs: Vec<SimModelSpec>,
    /// Simulated seconds between model refits during the live phase.
    pub retrain_every: i64,
    /// List length served live.
    pub serve_k: usize,
    /// Attribution window for implicit CTR, seconds.
    pub ictr_window: i64,
    /// Experiment-level seed, mixed into every dataset's world seed.
    pub seed: u64,
}

impl Default for SimulatedExperimentConfig {
    fn default() -> Self {
        SimulatedExperimentConfig {
            world: WorldConfig::default(),
            n_datasets: 5,
            model_specs: default_model_lineup(),
            // Refit every 6 simulated hours; coarser cadences cut runtime
            // roughly linearly and are recorded in the run manifest.
            retrain_every: 6 * 3600,
            serve_k: 10,
            ictr_window: 600,
            seed: 0,
        }
    }
}

impl SimulatedExperimentConfig {
    /// The world served to dataset number `idx`. Datasets deliberately
    /// differ — like a panel of unrelated businesses — so no single model
    /// dominates every world: exposure bias, click pickiness, catalog size,
    /// traffic density and taste dimensionality cycle through five variants
    /// around the template, and each dataset gets an independent seed.
    pub fn dataset_world(&self, idx: usize, dataset: &str) -> WorldConfig {
        let mut cfg = self.world.clone();
        cfg.seed = substream_hash(self.seed, "dataset-world", dataset.as_bytes());
        match idx % 5 {
            0 => {}
            1 => {
                cfg.zipf_exponent += 0.5;
                cfg.click_threshold -= 0.1;
            }
            2 => {
                cfg.zipf_exponent = (cfg.zipf_exponent - 0.5).max(0.0);
                cfg.click_sharpness += 2.0;
                cfg.n_items = cfg.n_items * 3 / 2;
            }
            3 => {
                cfg.session_rate *= 1.6;
                cfg.click_threshold += 0.05;
                cfg.n_items = cfg.n_items * 6 / 5;
            }
            _ => {
                cfg.latent_dim += 4;
                cfg.zipf_exponent += 0.25;
                cfg.session_rate *= 1.3;
            }
        }
        cfg
    }
}

/// Five models with deliberately diverse offline behavior: three kNN-on-MF
/// variants of decreasing capacity, an MF fold-in ranker, and the pure
/// popularity baseline.
pub fn default_model_lineup() -> Vec<SimModelSpec> {
    [
        "mf-knn f=16 reg=0.05 alpha=10 iters=3 m=50",
        "mf-knn f=8 reg=0.1 alpha=5 iters=2 m=25",
        "mf-knn f=2 reg=1.0 alpha=1 iters=1 m=10",
        "mf-foldin f=8 reg=0.1 alpha=10 iters=3",
        "popularity",
    ]
    .iter()
    .map(|s| SimModelSpec::parse(s).expect("valid lineup"))
    .collect()
}

/// Runs the full simulated experiment: per dataset, generate a world, train
/// the lineup, serve it live, then fill every offline grid cell and the
/// online CTR vector.
pub fn run_simulated_experiment(
    config: &SimulatedExperimentConfig,
    grid: &ExperimentGrid,
) -> Result<ExperimentResults, ExperimentError> {
    grid.validate()?;
    if config.n_datasets < 1 {
        return Err(ExperimentError::InvalidConfig(
            "need at least one dataset".to_string(),
        ));
    }
    if config.model_specs.is_empty() {
        return Err(ExperimentError::InvalidConfig(
            "need at least one model".to_string(),
        ));
    }

    let datasets: Vec<String> = (0..config.n_datasets)
        .map(|i| format!("sim{i}"))
        .collect();

    // Datasets are independent; run them in parallel and assemble in order.
    let per_dataset: Result<Vec<DatasetMeasurements>, ExperimentError> = datasets
        .par_iter()
        .enumerate()
        .map(|(idx, name)| measure_dataset(config, grid, idx, name))
        .collect();
    let per_dataset = per_dataset?;

    let mut recall = Vec::new();
    let mut ictr_rows = Vec::new();
    for ds in per_dataset {
        recall.extend(ds.recall);
        ictr_rows.push(ds.ictr);
    }

    Ok(ExperimentResults {
        grid: grid.clone(),
        datasets,
        model_labels: config.model_specs.iter().map(|s| s.label()).collect(),
        recall,
        ictr: ictr_rows,
    })
}

struct DatasetMeasurements {
    /// `[val][beta][k][model]` flattened in that order.
    recall: Vec<Vec<f64>>,
    ictr: Vec<f64>,
}

/// One dataset in ingested form: an evaluation log, the trained models, and
/// each model's served recommendations joined against a click log.
pub struct DatasetInputs<'a> {
    pub name: String,
    pub eval_log: &'a InteractionLog,
    /// `(label, model)`, one entry per deployed model. Labels must agree
    /// across datasets.
    pub models: Vec<(String, &'a dyn RecModel)>,
    /// Per model (same order): the recommendation events it served.
    pub recommendations: Vec<Vec<RecommendationEvent>>,
    /// Click evidence for the recommendation events.
    pub clicks: &'a InteractionLog,
}

/// Fills every (val, beta, k) cell and the per-model CTR vector for already
/// ingested datasets — the non-simulated twin of
/// [`run_simulated_experiment`].
pub fn run_grid(
    datasets: &[DatasetInputs<'_>],
    grid: &ExperimentGrid,
    ictr_window: i64,
) -> Result<ExperimentResults, ExperimentError> {
    grid.validate()?;
    let first = datasets.first().ok_or_else(|| {
        ExperimentError::InvalidConfig("need at least one dataset".to_string())
    })?;
    if first.models.is_empty() {
        return Err(ExperimentError::InvalidConfig(
            "need at least one model".to_string(),
        ));
    }
    let model_labels: Vec<String> = first.models.iter().map(|(l, _)| l.clone()).collect();
    for inputs in datasets {
        let labels: Vec<&String> = inputs.models.iter().map(|(l, _)| l).collect();
        if labels.len() != model_labels.len()
            || labels.iter().zip(&model_labels).any(|(a, b)| *a != b)
        {
            return Err(ExperimentError::InvalidConfig(format!(
                "dataset `{}` deploys a different model lineup",
                inputs.name
            )));
        }
        if inputs.recommendations.len() != model_labels.len() {
            return Err(ExperimentError::MissingCell(format!(
                "dataset `{}`: {} recommendation logs for {} models",
                inputs.name,
                inputs.recommendations.len(),
                model_labels.len()
            )));
        }
    }

    let per_dataset: Result<Vec<DatasetMeasurements>, ExperimentError> = datasets
        .par_iter()
        .map(|inputs| {
            let models: Vec<(&str, &dyn RecModel)> = inputs
                .models
                .iter()
                .map(|(label, model)| (label.as_str(), *model))
                .collect();
            measure_models(
                &inputs.name,
                inputs.eval_log,
                &models,
                &inputs.recommendations,
                inputs.clicks,
                grid,
                ictr_window,
            )
        })
        .collect();
    let per_dataset = per_dataset?;

    let mut recall = Vec::new();
    let mut ictr_rows = Vec::new();
    for ds in per_dataset {
        recall.extend(ds.recall);
        ictr_rows.push(ds.ictr);
    }
    Ok(ExperimentResults {
        grid: grid.clone(),
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        model_labels,
        recall,
        ictr: ictr_rows,
    })
}

/// The shared per-dataset measurement: offline recall for every grid cell
/// (popularity taken over the full evaluation log) plus per-model iCTR.
fn measure_models(
    dataset: &str,
    eval_log: &InteractionLog,
    models: &[(&str, &dyn RecModel)],
    recommendations: &[Vec<RecommendationEvent>],
    clicks: &InteractionLog,
    grid: &ExperimentGrid,
    ictr_window: i64,
) -> Result<DatasetMeasurements, ExperimentError> {
    let pop = compute_popularity(eval_log);
    let sweep = RecallSweep {
        k_values: grid.k_values.clone(),
        beta_values: grid.beta_values.clone(),
        cold_start: ColdStartPolicy::IncludeWithFallback,
    };

    let n_models = models.len();
    let n_cells = grid.val_values.len() * grid.beta_values.len() * grid.k_values.len();
    let mut recall = vec![vec![0.0f64; n_models]; n_cells];
    for (model_idx, (label, model)) in models.iter().enumerate() {
        for (val_idx, &val) in grid.val_values.iter().enumerate() {
            let swept = crate::offline::sweep_recall(eval_log, *model, val, &sweep, &pop)
                .map_err(|source| ExperimentError::Metric {
                    dataset: dataset.to_string(),
                    model: label.to_string(),
                    val,
                    source,
                })?;
            for beta_idx in 0..grid.beta_values.len() {
                for k_idx in 0..grid.k_values.len() {
                    let cell = (val_idx * grid.beta_values.len() + beta_idx)
                        * grid.k_values.len()
                        + k_idx;
                    recall[cell][model_idx] = swept.get(beta_idx, k_idx);
                }
            }
        }
    }

    let mut ictr_row = Vec::with_capacity(n_models);
    for (model_idx, (label, _)) in models.iter().enumerate() {
        let result = ictr(&recommendations[model_idx], clicks, ictr_window).map_err(
            |source| ExperimentError::Online {
                dataset: dataset.to_string(),
                model: label.to_string(),
                source,
            },
        )?;
        ictr_row.push(result.value);
    }

    Ok(DatasetMeasurements {
        recall,
        ictr: ictr_row,
    })
}

fn measure_dataset(
    config: &SimulatedExperimentConfig,
    grid: &ExperimentGrid,
    dataset_idx: usize,
    dataset: &str,
) -> Result<DatasetMeasurements, ExperimentError> {
    let sim_err = |source: SimError| ExperimentError::Sim {
        dataset: dataset.to_string(),
        source,
    };

    let world_cfg = config.dataset_world(dataset_idx, dataset);
    let world = World::new(world_cfg).map_err(sim_err)?;
    let history = world.generate_history().map_err(sim_err)?;

    let outcome = run_live_phase(
        &world,
        &history,
        &config.model_specs,
        config.retrain_every,
        config.serve_k,
    )
    .map_err(sim_err)?;

    // Offline metrics are computed on the initial models over the logged
    // history they were trained on; iCTR joins each model's served events
    // with the live click log.
    let initial: Vec<(&str, &dyn RecModel)> = outcome
        .initial_models
        .iter()
        .zip(&outcome.model_labels)
        .map(|(model, label)| match model {
            Some(m) => Ok((label.as_str(), m as &dyn RecModel)),
            None => Err(ExperimentError::InvalidConfig(
                "the oracle cannot be part of an offline-evaluated lineup".to_string(),
            )),
        })
        .collect::<Result<_, _>>()?;
    let recommendations: Vec<Vec<RecommendationEvent>> = (0..initial.len())
        .map(|idx| outcome.events_for_model(idx))
        .collect();
    let click_log = outcome.click_log().ok_or_else(|| ExperimentError::Online {
        dataset: dataset.to_string(),
        model: "*".to_string(),
        source: OnlineError::EmptyRecommendationLog,
    })?;

    measure_models(
        dataset,
        &history,
        &initial,
        &recommendations,
        &click_log,
        grid,
        config.ictr_window,
    )
}

/// One (dataset, k) cell of an MSR computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsrCell {
    pub dataset: String,
    pub k: usize,
    pub offline_best: usize,
    pub online_best: usize,
    pub matched: bool,
    pub offline_tie: bool,
    pub online_tie: bool,
}

/// MSR for one (val, beta) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsrEntry {
    pub val: Validation,
    pub beta: f64,
    pub msr: f64,
    pub n_matches: usize,
    pub n_cells: usize,
    pub cells: Vec<MsrCell>,
}

/// Deterministic argmax: highest value, ties to the lowest index.
fn argmax(values: &[f64]) -> (usize, bool) {
    let mut best = 0usize;
    for (idx, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = idx;
        }
    }
    let tie = values
        .iter()
        .enumerate()
        .any(|(idx, &v)| idx != best && v == values[best]);
    (best, tie)
}

/// MSR over all (dataset, k) cells for one (val, beta): the fraction of
/// cells where the offline-best model is also the online-best. A cell with
/// a tied argmax counts as a match only if the lowest-index argmaxes
/// coincide; ties are recorded per cell.
pub fn compute_msr(
    results: &ExperimentResults,
    val: Validation,
    beta_idx: usize,
) -> Result<MsrEntry, ExperimentError> {
    let val_idx = results
        .grid
        .val_values
        .iter()
        .position(|&v| v == val)
        .ok_or_else(|| ExperimentError::MissingCell(format!("val {val:?} not in grid")))?;
    if beta_idx >= results.grid.beta_values.len() {
        return Err(ExperimentError::MissingCell(format!(
            "beta index {beta_idx} out of range"
        )));
    }

    let mut cells = Vec::new();
    let mut n_matches = 0usize;
    for (dataset_idx, dataset) in results.datasets.iter().enumerate() {
        let (online_best, online_tie) = argmax(results.ictr_vector(dataset_idx));
        for (k_idx, &k) in results.grid.k_values.iter().enumerate() {
            let offline = results.recall_vector(dataset_idx, val_idx, beta_idx, k_idx);
            let (offline_best, offline_tie) = argmax(offline);
            let matched = offline_best == online_best;
            if matched {
                n_matches += 1;
            }
            cells.push(MsrCell {
                dataset: dataset.clone(),
                k,
                offline_best,
                online_best,
                matched,
                offline_tie,
                online_tie,
            });
        }
    }
    let n_cells = cells.len();
    Ok(MsrEntry {
        val,
        beta: results.grid.beta_values[beta_idx],
        msr: n_matches as f64 / n_cells as f64,
        n_matches,
        n_cells,
        cells,
    })
}

/// The full MSR table plus the underlying per-dataset vectors: online CTR
/// per model, and the offline recall vector of every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MsrReport {
    pub entries: Vec<MsrEntry>,
    pub grid: ExperimentGrid,
    pub datasets: Vec<String>,
    pub model_labels: Vec<String>,
    pub ictr: Vec<Vec<f64>>,
    /// Dense recall cells in `[dataset][val][beta][k][model]` order,
    /// flattened over the first four axes like [`ExperimentResults`].
    pub recall: Vec<Vec<f64>>,
    pub n_cells: usize,
}

/// Computes MSR for every (val, beta) of the grid.
pub fn msr_report(results: &ExperimentResults) -> Result<MsrReport, ExperimentError> {
    let mut entries = Vec::new();
    for &val in &results.grid.val_values {
        for beta_idx in 0..results.grid.beta_values.len() {
            entries.push(compute_msr(results, val, beta_idx)?);
        }
    }
    let n_cells = entries.first().map(|e| e.n_cells).unwrap_or(0);
    Ok(MsrReport {
        entries,
        grid: results.grid.clone(),
        datasets: results.datasets.clone(),
        model_labels: results.model_labels.clone(),
        ictr: results.ictr.clone(),
        recall: results.recall.clone(),
        n_cells,
    })
}

impl MsrReport {
    /// The (val, beta) pair with the highest MSR; ties prefer the smaller
    /// beta, then LOO over LLOO.
    pub fn best_config(&self) -> (Validation, f64) {
        let val_rank = |val: Validation| match val {
            Validation::Loo => 0,
            Validation::Lloo => 1,
        };
        let mut best = &self.entries[0];
        for entry in &self.entries[1..] {
            let better = entry.msr > best.msr
                || (entry.msr == best.msr
                    && (entry.beta < best.beta
                        || (entry.beta == best.beta && val_rank(entry.val) < val_rank(best.val))));
            if better {
                best = entry;
            }
        }
        (best.val, best.beta)
    }

    /// MSR value for one (val, beta).
    pub fn msr(&self, val: Validation, beta: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.val == val && e.beta == beta)
            .map(|e| e.msr)
    }

    /// JSON report. `per_cell` additionally includes the per-(dataset, k)
    /// match records and the dense offline recall vectors.
    pub fn to_json(&self, per_cell: bool) -> serde_json::Value {
        let (best_val, best_beta) = self.best_config();
        let entries: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                let mut obj = json!({
                    "val": e.val.as_str(),
                    "beta": round_sig12(e.beta),
                    "msr": round_sig12(e.msr),
                    "n_matches": e.n_matches,
                    "n_cells": e.n_cells,
                });
                if per_cell {
                    obj["cells"] = json!(e.cells);
                }
                obj
            })
            .collect();
        let mut report = json!({
            "aggregation": "one cell per (dataset, k) pair at fixed (val, beta); \
                msr = cells whose best-offline-recall model index equals the \
                best-online-ictr model index, divided by total cells; argmax \
                ties resolve to the lowest model index and are flagged per cell",
            "n_cells": self.n_cells,
            "datasets": self.datasets,
            "model_labels": self.model_labels,
            "grid": {
                "k_values": self.grid.k_values,
                "beta_values": self.grid.beta_values.iter().map(|&b| round_sig12(b)).collect::<Vec<_>>(),
                "val_values": self.grid.val_values.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
            },
            "ictr": self.ictr.iter().map(|row| {
                row.iter().map(|&v| round_sig12(v)).collect::<Vec<_>>()
            }).collect::<Vec<_>>(),
            "best": {
                "val": best_val.as_str(),
                "beta": round_sig12(best_beta),
                "msr": round_sig12(self.msr(best_val, best_beta).expect("best exists")),
            },
            "entries": entries,
        });
        if per_cell {
            // Offline vectors, one per grid cell, in dataset-major
            // [val][beta][k] order matching the `grid` field.
            report["recall"] = json!(self
                .recall
                .iter()
                .map(|row| row.iter().map(|&v| round_sig12(v)).collect::<Vec<_>>())
                .collect::<Vec<_>>());
        }
        report
    }

    /// Plot data: one row per beta, one MSR series per split.
    pub fn write_plot_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "beta,msr_loo,msr_lloo")?;
        let betas: Vec<f64> = {
            let mut b: Vec<f64> = self.entries.iter().map(|e| e.beta).collect();
            b.dedup();
            b.sort_by(|a, b| a.partial_cmp(b).expect("finite betas"));
            b.dedup();
            b
        };
        for beta in betas {
            let loo = self.msr(Validation::Loo, beta);
            let lloo = self.msr(Validation::Lloo, beta);
            writeln!(
                out,
                "{},{},{}",
                fmt_sig12(beta),
                loo.map(fmt_sig12).unwrap_or_default(),
                lloo.map(fmt_sig12).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

/// Results CSV: `dataset,val,beta,k,model,recall,ictr`, one row per cell per
/// model, floats at 12 significant digits.
pub fn write_results_csv<W: Write>(
    results: &ExperimentResults,
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "dataset,val,beta,k,model,recall,ictr")?;
    for (dataset_idx, dataset) in results.datasets.iter().enumerate() {
        for (val_idx, &val) in results.grid.val_values.iter().enumerate() {
            for (beta_idx, &beta) in results.grid.beta_values.iter().enumerate() {
                for (k_idx, &k) in results.grid.k_values.iter().enumerate() {
                    let recall = results.recall_vector(dataset_idx, val_idx, beta_idx, k_idx);
                    for (model_idx, label) in results.model_labels.iter().enumerate() {
                        writeln!(
                            out,
                            "{dataset},{},{},{k},{label},{},{}",
                            val.as_str(),
                            fmt_sig12(beta),
                            fmt_sig12(recall[model_idx]),
                            fmt_sig12(results.ictr[dataset_idx][model_idx]),
                        )?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Parses a results CSV back into dense results (for the report command).
/// Every (dataset, val, beta, k, model) combination must be present exactly
/// once; anything missing is a [`ExperimentError::MissingCell`].
pub fn read_results_csv<R: BufRead>(reader: R) -> Result<ExperimentResults, ExperimentError> {
    let mut rows: Vec<(String, Validation, String, usize, String, f64, f64)> = Vec::new();
    for (line_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ExperimentError::MalformedResults {
            line: line_idx + 1,
            reason: e.to_string(),
        })?;
        if line_idx == 0 {
            if line.trim() != "dataset,val,beta,k,model,recall,ictr" {
                return Err(ExperimentError::MalformedResults {
                    line: 1,
                    reason: "unexpected header".to_string(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(ExperimentError::MalformedResults {
                line: line_idx + 1,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let malformed = |reason: &str| ExperimentError::MalformedResults {
            line: line_idx + 1,
            reason: reason.to_string(),
        };
        let val = match fields[1] {
            "loo" => Validation::Loo,
            "lloo" => Validation::Lloo,
            other => return Err(malformed(&format!("unknown val `{other}`"))),
        };
        let k: usize = fields[3].parse().map_err(|_| malformed("bad k"))?;
        let recall: f64 = fields[5].parse().map_err(|_| malformed("bad recall"))?;
        let ictr: f64 = fields[6].parse().map_err(|_| malformed("bad ictr"))?;
        rows.push((
            fields[0].to_string(),
            val,
            fields[2].to_string(),
            k,
            fields[4].to_string(),
            recall,
            ictr,
        ));
    }
    if rows.is_empty() {
        return Err(ExperimentError::MissingCell("no data rows".to_string()));
    }

    let mut datasets: Vec<String> = Vec::new();
    let mut beta_keys: Vec<String> = Vec::new();
    let mut k_values: Vec<usize> = Vec::new();
    let mut val_values: Vec<Validation> = Vec::new();
    let mut model_labels: Vec<String> = Vec::new();
    for (dataset, val, beta, k, model, _, _) in &rows {
        push_unique(&mut datasets, dataset.clone());
        push_unique(&mut beta_keys, beta.clone());
        push_unique(&mut k_values, *k);
        push_unique(&mut val_values, *val);
        push_unique(&mut model_labels, model.clone());
    }
    let beta_values: Vec<f64> = beta_keys
        .iter()
        .map(|b| {
            b.parse()
                .map_err(|_| ExperimentError::MissingCell(format!("unparseable beta `{b}`")))
        })
        .collect::<Result<_, _>>()?;
    let grid = ExperimentGrid {
        k_values: k_values.clone(),
        beta_values,
        val_values: val_values.clone(),
    };

    let n_cells =
        datasets.len() * val_values.len() * beta_keys.len() * k_values.len();
    let mut recall: Vec<Vec<Option<f64>>> = vec![vec![None; model_labels.len()]; n_cells];
    let mut ictr: Vec<Vec<Option<f64>>> =
        vec![vec![None; model_labels.len()]; datasets.len()];
    for (dataset, val, beta, k, model, recall_v, ictr_v) in &rows {
        let d = datasets.iter().position(|x| x == dataset).expect("listed");
        let v = val_values.iter().position(|x| x == val).expect("listed");
        let b = beta_keys.iter().position(|x| x == beta).expect("listed");
        let ki = k_values.iter().position(|x| x == k).expect("listed");
        let m = model_labels.iter().position(|x| x == model).expect("listed");
        let cell = ((d * val_values.len() + v) * beta_keys.len() + b) * k_values.len() + ki;
        recall[cell][m] = Some(*recall_v);
        ictr[d][m] = Some(*ictr_v);
    }

    let recall: Vec<Vec<f64>> = recall
        .into_iter()
        .enumerate()
        .map(|(cell, row)| {
            row.into_iter()
                .enumerate()
                .map(|(m, v)| {
                    v.ok_or_else(|| {
                        ExperimentError::MissingCell(format!(
                            "cell {cell} has no value for model `{}`",
                            model_labels[m]
                        ))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let ictr: Vec<Vec<f64>> = ictr
        .into_iter()
        .enumerate()
        .map(|(d, row)| {
            row.into_iter()
                .enumerate()
                .map(|(m, v)| {
                    v.ok_or_else(|| {
                        ExperimentError::MissingCell(format!(
                            "dataset `{}` has no ictr for model `{}`",
                            datasets[d], model_labels[m]
                        ))
                    })
                })
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;

    Ok(ExperimentResults {
        grid,
        datasets,
        model_labels,
        recall,
        ictr,
    })
}

fn push_unique<T: PartialEq>(list: &mut Vec<T>, value: T) {
    if !list.contains(&value) {
        list.push(value);
    }
}

/// Builds results directly from vectors; the entry point for non-simulated
/// data and for arithmetic fixtures in tests.
pub fn results_from_vectors(
    grid: ExperimentGrid,
    datasets: Vec<String>,
    model_labels: Vec<String>,
    recall: Vec<Vec<f64>>,
    ictr: Vec<Vec<f64>>,
) -> Result<ExperimentResults, ExperimentError> {
    grid.validate()?;
    let n_cells =
        datasets.len() * grid.val_values.len() * grid.beta_values.len() * grid.k_values.len();
    if recall.len() != n_cells {
        return Err(ExperimentError::MissingCell(format!(
            "expected {n_cells} recall cells, got {}",
            recall.len()
        )));
    }
    if ictr.len() != datasets.len() {
        return Err(ExperimentError::MissingCell(format!(
            "expected {} ictr rows, got {}",
            datasets.len(),
            ictr.len()
        )));
    }
    for row in recall.iter().chain(ictr.iter()) {
        if row.len() != model_labels.len() {
            return Err(ExperimentError::MissingCell(
                "row width does not match the model count".to_string(),
            ));
        }
    }
    Ok(ExperimentResults {
        grid,
        datasets,
        model_labels,
        recall,
        ictr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A tiny grid with explicit vectors: d datasets x k values, L models.
    fn fixture(
        n_datasets: usize,
        k_values: Vec<usize>,
        l: usize,
        offline_best: impl Fn(usize, usize) -> usize,
        online_best: impl Fn(usize) -> usize,
    ) -> ExperimentResults {
        let grid = ExperimentGrid {
            k_values: k_values.clone(),
            beta_values: vec![0.0],
            val_values: vec![Validation::Loo],
        };
        let datasets: Vec<String> = (0..n_datasets).map(|d| format!("d{d}")).collect();
        let model_labels: Vec<String> = (0..l).map(|m| format!("m{m}")).collect();
        let mut recall = Vec::new();
        for d in 0..n_datasets {
            for (ki, _) in k_values.iter().enumerate() {
                let mut row = vec![0.1; l];
                row[offline_best(d, ki)] = 0.9;
                recall.push(row);
            }
        }
        let ictr = (0..n_datasets)
            .map(|d| {
                let mut row = vec![0.01; l];
                row[online_best(d)] = 0.5;
                row
            })
            .collect();
        results_from_vectors(grid, datasets, model_labels, recall, ictr).unwrap()
    }

    #[test]
    fn run_grid_on_ingested_logs_matches_direct_metric_calls() {
        use crate::data::InteractionLog;
        use crate::models::{Model, PopularityModel, RandomModel};
        use crate::offline::{evaluate, MetricConfig};
        use crate::online::RecommendationEvent;

        let eval_log = InteractionLog::from_records(vec![
            ("u1", "a", 1),
            ("u1", "b", 2),
            ("u2", "b", 1),
            ("u2", "c", 2),
            ("u3", "c", 1),
        ])
        .unwrap();
        let clicks =
            InteractionLog::from_records(vec![("u1", "a", 105), ("u2", "b", 260)]).unwrap();
        let pop_model = Model::Popularity(PopularityModel::train(&eval_log));
        let rnd_model = Model::Random(RandomModel::train(&eval_log, 9));
        let event = |t: i64, user: &str, items: &[&str]| RecommendationEvent {
            timestamp: t,
            user: user.to_string(),
            items: items.iter().map(|s| s.to_string()).collect(),
        };
        let recommendations = vec![
            vec![event(100, "u1", &["a"]), event(200, "u2", &["c"])], // pop: 1 hit of 2
            vec![event(100, "u1", &["z"]), event(250, "u2", &["b"])], // rnd: 1 hit of 2
        ];
        let datasets = vec![DatasetInputs {
            name: "ingested0".to_string(),
            eval_log: &eval_log,
            models: vec![
                ("popularity".to_string(), &pop_model as &dyn RecModel),
                ("random".to_string(), &rnd_model as &dyn RecModel),
            ],
            recommendations,
            clicks: &clicks,
        }];
        let grid = ExperimentGrid {
            k_values: vec![1, 2],
            beta_values: vec![0.0, 0.5],
            val_values: vec![Validation::Loo, Validation::Lloo],
        };
        let results = run_grid(&datasets, &grid, 60).unwrap();

        assert_eq!(results.ictr_vector(0), &[0.5, 0.5]);
        let pop_table = crate::data::compute_popularity(&eval_log);
        for (vi, &val) in grid.val_values.iter().enumerate() {
            for (bi, &beta) in grid.beta_values.iter().enumerate() {
                for (ki, &k) in grid.k_values.iter().enumerate() {
                    let config = MetricConfig::new(val, beta, k);
                    let expected = evaluate(&eval_log, &pop_model, &config, Some(&pop_table))
                        .unwrap()
                        .value;
                    let got = results.recall_vector(0, vi, bi, ki)[0];
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "cell mismatch at val={val:?} beta={beta} k={k}"
                    );
                }
            }
        }

        // Mismatched lineups across datasets are rejected.
        let other = vec![
            DatasetInputs {
                name: "d0".to_string(),
                eval_log: &eval_log,
                models: vec![("popularity".to_string(), &pop_model as &dyn RecModel)],
                recommendations: vec![vec![event(100, "u1", &["a"])]],
                clicks: &clicks,
            },
            DatasetInputs {
                name: "d1".to_string(),
                eval_log: &eval_log,
                models: vec![("random".to_string(), &rnd_model as &dyn RecModel)],
                recommendations: vec![vec![event(100, "u1", &["a"])]],
                clicks: &clicks,
            },
        ];
        assert!(matches!(
            run_grid(&other, &grid, 60),
            Err(ExperimentError::InvalidConfig(_))
        ));
    }

    #[test]
    fn msr_is_one_when_rankings_agree_everywhere() {
        let results = fixture(3, vec![1, 5], 4, |_, _| 2, |_| 2);
        let entry = compute_msr(&results, Validation::Loo, 0).unwrap();
        assert_eq!(entry.msr, 1.0);
        assert_eq!(entry.n_cells, 6);
        assert!(entry.cells.iter().all(|c| c.matched));
    }

    #[test]
    fn msr_counts_seventieths_like_the_reference_fixtures() {
        // 5 datasets x 14 k-values = 70 cells; 24 matches -> 34.29%,
        // 9 matches -> 12.86%.
        let mut k_values: Vec<usize> = (1..=10).collect();
        k_values.extend([15, 20, 25, 50]);

        let results_24 = fixture(
            5,
            k_values.clone(),
            5,
            |d, ki| {
                let cell = d * 14 + ki;
                if cell < 24 {
                    0
                } else {
                    1
                }
            },
            |_| 0,
        );
        let entry = compute_msr(&results_24, Validation::Loo, 0).unwrap();
        assert_eq!(entry.n_cells, 70);
        assert_eq!(entry.n_matches, 24);
        assert!((entry.msr * 100.0 - 34.29).abs() < 0.01);

        let results_9 = fixture(
            5,
            k_values,
            5,
            |d, ki| {
                let cell = d * 14 + ki;
                if cell < 9 {
                    0
                } else {
                    1
                }
            },
            |_| 0,
        );
        let entry = compute_msr(&results_9, Validation::Loo, 0).unwrap();
        assert_eq!(entry.n_matches, 9);
        assert!((entry.msr * 100.0 - 12.86).abs() < 0.01);
    }

    #[test]
    fn argmax_ties_go_to_lowest_index_and_are_flagged() {
        let grid = ExperimentGrid {
            k_values: vec![1],
            beta_values: vec![0.0],
            val_values: vec![Validation::Loo],
        };
        let results = results_from_vectors(
            grid,
            vec!["d0".to_string()],
            vec!["m0".to_string(), "m1".to_string()],
            vec![vec![0.5, 0.5]],
            vec![vec![0.2, 0.2]],
        )
        .unwrap();
        let entry = compute_msr(&results, Validation::Loo, 0).unwrap();
        assert_eq!(entry.n_matches, 1); // both argmaxes resolve to index 0
        assert!(entry.cells[0].offline_tie);
        assert!(entry.cells[0].online_tie);
    }

    #[test]
    fn single_model_grid_always_matches() {
        let results = fixture(2, vec![1, 2, 3], 1, |_, _| 0, |_| 0);
        let report = msr_report(&results).unwrap();
        assert!(report.entries.iter().all(|e| e.msr == 1.0));
    }

    #[test]
    fn relabeling_models_consistently_preserves_msr() {
        let results = fixture(2, vec![1, 2], 3, |d, _| d % 3, |d| d % 3);
        let before = compute_msr(&results, Validation::Loo, 0).unwrap().msr;

        // Swap model indices 0 and 2 in every vector.
        let permute = |row: &[f64]| -> Vec<f64> { vec![row[2], row[1], row[0]] };
        let recall: Vec<Vec<f64>> = (0..results.datasets.len())
            .flat_map(|d| {
                (0..results.grid.k_values.len())
                    .map(move |ki| (d, ki))
            })
            .map(|(d, ki)| permute(results.recall_vector(d, 0, 0, ki)))
            .collect();
        let ictr: Vec<Vec<f64>> = (0..results.datasets.len())
            .map(|d| permute(results.ictr_vector(d)))
            .collect();
        let permuted = results_from_vectors(
            results.grid.clone(),
            results.datasets.clone(),
            results.model_labels.clone(),
            recall,
            ictr,
        )
        .unwrap();
        let after = compute_msr(&permuted, Validation::Loo, 0).unwrap().msr;
        assert_eq!(before, after);
    }

    #[test]
    fn best_config_breaks_ties_toward_smaller_beta_then_loo() {
        let grid = ExperimentGrid {
            k_values: vec![1],
            beta_values: vec![0.0, 0.3],
            val_values: vec![Validation::Loo, Validation::Lloo],
        };
        // All four (val, beta) entries identical -> (Loo, 0.0) wins.
        let results = results_from_vectors(
            grid,
            vec!["d0".to_string()],
            vec!["m0".to_string(), "m1".to_string()],
            vec![vec![0.9, 0.1]; 4],
            vec![vec![0.5, 0.2]],
        )
        .unwrap();
        let report = msr_report(&results).unwrap();
        assert_eq!(report.best_config(), (Validation::Loo, 0.0));
    }

    #[test]
    fn msr_report_is_a_pure_function_of_results() {
        let results = fixture(3, vec![1, 2], 3, |d, ki| (d + ki) % 3, |d| d % 3);
        let a = msr_report(&results).unwrap();
        let b = msr_report(&results).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.to_json(true)).unwrap(),
            serde_json::to_string(&b.to_json(true)).unwrap()
        );
    }

    #[test]
    fn results_csv_round_trips() {
        let results = fixture(2, vec![1, 5], 3, |d, ki| (d * 2 + ki) % 3, |d| d % 3);
        let mut bytes = Vec::new();
        write_results_csv(&results, &mut bytes).unwrap();
        let parsed = read_results_csv(bytes.as_slice()).unwrap();
        assert_eq!(parsed.datasets, results.datasets);
        assert_eq!(parsed.model_labels, results.model_labels);
        for d in 0..2 {
            for ki in 0..2 {
                let a = results.recall_vector(d, 0, 0, ki);
                let b = parsed.recall_vector(d, 0, 0, ki);
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-11);
                }
            }
        }
        // Writing the parsed results again reproduces the bytes.
        let mut again = Vec::new();
        write_results_csv(&parsed, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn missing_cells_are_reported() {
        let results = fixture(1, vec![1, 2], 2, |_, _| 0, |_| 0);
        let mut bytes = Vec::new();
        write_results_csv(&results, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        // Header + 3 rows: the k=2 cell has m0 but not m1.
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            read_results_csv(truncated.as_bytes()),
            Err(ExperimentError::MissingCell(_))
        ));
    }
}
