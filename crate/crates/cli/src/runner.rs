//! Executes configured runs and writes their artifacts: resolved config,
//! JSON-lines metrics, per-class report, checkpoint, and optional dataset
//! dump.

use std::path::{Path, PathBuf};

use anyhow::Context;

use dsbn_core::data::{make_multi_source_blobs, merge_sources, LabeledDataset, Metrics};
use dsbn_core::domain::DomainId;
use dsbn_core::pipeline;

use crate::config::{ExperimentConfig, MultiSourceMode};
use crate::report::{final_evals, write_aggregate_report, write_metrics_jsonl, write_run_report};
use crate::{checkpoint, csvio, pool, CliError, CliResult};

/// Final per-phase metrics of one seeded run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub finals: Vec<(String, Metrics)>,
}

impl RunSummary {
    pub fn phase_acc(&self, phase: &str) -> Option<f64> {
        self.finals
            .iter()
            .find(|(p, _)| p == phase)
            .map(|(_, m)| m.class_avg)
    }

    pub fn final_acc(&self) -> f64 {
        self.finals.last().map(|(_, m)| m.class_avg).unwrap_or(0.0)
    }
}

/// Generates the run's domains according to the configured multi-source
/// mode.
pub fn build_datasets(
    cfg: &ExperimentConfig,
) -> CliResult<(Vec<LabeledDataset>, LabeledDataset)> {
    let (sources, target) = make_multi_source_blobs(
        &cfg.blob_spec(),
        &cfg.source_transforms(),
        &cfg.target_transform(),
    )
    .map_err(CliError::config)?;
    let sources = match cfg.experiment.multi_source_mode {
        MultiSourceMode::Single => vec![sources
            .into_iter()
            .next()
            .expect("validated: at least one source")],
        MultiSourceMode::Merged => vec![merge_sources(&sources).map_err(CliError::config)?],
        MultiSourceMode::Separate => sources,
    };
    Ok((sources, target))
}

/// Like [`build_datasets`] but keeping only source `index`, re-tagged as the
/// sole source domain.
pub fn build_datasets_single_index(
    cfg: &ExperimentConfig,
    index: usize,
) -> CliResult<(Vec<LabeledDataset>, LabeledDataset)> {
    let (mut sources, target) = make_multi_source_blobs(
        &cfg.blob_spec(),
        &cfg.source_transforms(),
        &cfg.target_transform(),
    )
    .map_err(CliError::config)?;
    if index >= sources.len() {
        return Err(CliError::config(anyhow::anyhow!(
            "source index {index} out of range"
        )));
    }
    let chosen = sources.swap_remove(index).with_domain(DomainId::Source(0));
    Ok((vec![chosen], target))
}

/// Runs one seed end to end and writes all artifacts into `dir`.
pub fn execute_run(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    export_data: bool,
) -> CliResult<RunSummary> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))
        .map_err(CliError::runtime)?;
    let (sources, target) = build_datasets(cfg)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved_for_seed(seed))
        .context("cannot write config.resolved")
        .map_err(CliError::runtime)?;

    let run = pipeline::run(&cfg.pipeline_config(), &sources, &target, seed)
        .map_err(|e| CliError::runtime(anyhow::anyhow!("training failed: {e}")))?;

    write_metrics_jsonl(&dir.join("metrics.jsonl"), &run.log).map_err(CliError::runtime)?;
    let finals = final_evals(&run.log);
    write_run_report(&dir.join("report.csv"), target.class_count(), &finals)
        .map_err(CliError::runtime)?;
    checkpoint::save(&dir.join("checkpoint.bin"), run.final_output())
        .map_err(CliError::runtime)?;
    if export_data {
        let all: Vec<&LabeledDataset> = sources.iter().chain([&target]).collect();
        csvio::export_datasets(&dir.join("dataset.csv"), &all).map_err(CliError::runtime)?;
    }
    Ok(RunSummary { seed, finals })
}

/// Runs every configured seed (concurrently when more than one), writing
/// per-seed artifacts and a root-level aggregate report.
pub fn run_seeds(cfg: &ExperimentConfig, out: &Path, export_data: bool) -> CliResult<Vec<RunSummary>> {
    let seeds = cfg.experiment.seeds.clone();
    if seeds.len() == 1 {
        return Ok(vec![execute_run(cfg, seeds[0], out, export_data)?]);
    }
    let results = pool::run_parallel(seeds.len(), |i| {
        let seed = seeds[i];
        execute_run(cfg, seed, &seed_dir(out, seed), export_data)
    });
    let mut summaries = Vec::with_capacity(results.len());
    for r in results {
        summaries.push(r?);
    }
    let per_seed: Vec<(u64, Vec<(String, Metrics)>)> = summaries
        .iter()
        .map(|s| (s.seed, s.finals.clone()))
        .collect();
    write_aggregate_report(&out.join("report.csv"), cfg.dataset.classes, &per_seed)
        .map_err(CliError::runtime)?;
    Ok(summaries)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}
