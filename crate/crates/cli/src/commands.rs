//! CLI verb implementations.

use std::path::Path;

use anyhow::Context;

use dsbn_core::data::{evaluate_transductive, LabeledDataset};

use crate::config::{ExperimentConfig, MultiSourceMode, NormChoice, Stage2Norm};
use crate::report::{
    displayed_pct, fmt_pct, write_ablation_report, write_multisource_report, write_run_report,
    AblationCell, MultiSourceCell,
};
use crate::runner::{build_datasets, build_datasets_single_index, execute_run, run_seeds, seed_dir};
use crate::{checkpoint, csvio, pool, CliError, CliResult};

fn norm_label(n: NormChoice) -> &'static str {
    match n {
        NormChoice::Bn => "bn",
        NormChoice::Dsbn => "dsbn",
    }
}

/// `train`: run the configured experiment for every seed.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, export_data: bool) -> CliResult<()> {
    let summaries = run_seeds(cfg, out, export_data)?;
    println!("run directory: {}", out.display());
    for s in &summaries {
        let parts: Vec<String> = s
            .finals
            .iter()
            .map(|(phase, m)| format!("{phase} avg {}%", fmt_pct(m.class_avg)))
            .collect();
        println!("seed {:>4}: {}", s.seed, parts.join(", "));
    }
    Ok(())
}

/// `ablate`: the four (stage-1, stage-2) normalization combinations for the
/// configured baseline, each over every seed, plus the gain column.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let grid = [
        (NormChoice::Bn, NormChoice::Bn),
        (NormChoice::Dsbn, NormChoice::Bn),
        (NormChoice::Bn, NormChoice::Dsbn),
        (NormChoice::Dsbn, NormChoice::Dsbn),
    ];
    let seeds = cfg.experiment.seeds.clone();
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results = pool::run_parallel(jobs.len(), |i| {
        let (cell, seed) = jobs[i];
        let (s1, s2) = grid[cell];
        let mut run_cfg = cfg.clone();
        run_cfg.experiment.norm_stage1 = s1;
        run_cfg.experiment.norm_stage2 = match s2 {
            NormChoice::Bn => Stage2Norm::Bn,
            NormChoice::Dsbn => Stage2Norm::Dsbn,
        };
        run_cfg.experiment.stage2_iterations = 1;
        let dir = seed_dir(
            &out.join(format!("cell_{}_{}", norm_label(s1), norm_label(s2))),
            seed,
        );
        execute_run(&run_cfg, seed, &dir, false)
    });

    let mut cells = Vec::new();
    for (c, (s1, s2)) in grid.iter().enumerate() {
        let mut stage1_acc = Vec::new();
        let mut stage2_acc = Vec::new();
        for (j, (cell, _)) in jobs.iter().enumerate() {
            if *cell != c {
                continue;
            }
            let summary = results[j].as_ref().map_err(clone_err)?;
            stage1_acc.push(summary.phase_acc("stage1").unwrap_or(0.0));
            stage2_acc.push(summary.phase_acc("stage2_iter1").unwrap_or(0.0));
        }
        cells.push(AblationCell {
            baseline: format!("{:?}", cfg.experiment.baseline).to_lowercase(),
            stage1_norm: norm_label(*s1).to_string(),
            stage2_norm: norm_label(*s2).to_string(),
            stage1_acc,
            stage2_acc,
        });
    }
    write_ablation_report(&out.join("ablate_report.csv"), &cells).map_err(CliError::runtime)?;

    println!("baseline  stage1  stage2  stage1_acc  stage2_acc  delta");
    for cell in &cells {
        let m1 = mean(&cell.stage1_acc);
        let m2 = mean(&cell.stage2_acc);
        println!(
            "{:<9} {:<7} {:<7} {:>9}%  {:>9}%  {:+.1}",
            cell.baseline,
            cell.stage1_norm,
            cell.stage2_norm,
            fmt_pct(m1),
            fmt_pct(m2),
            displayed_pct(m2) - displayed_pct(m1),
        );
    }
    Ok(())
}

/// `multisource`: single-source baselines plus merged and separate
/// multi-source runs, each with plain and domain-specific normalization.
pub fn cmd_multisource(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let k = cfg.source_count();
    if k < 2 {
        return Err(CliError::config(anyhow::anyhow!(
            "multisource needs at least 2 sources in dataset.source_shifts"
        )));
    }
    let mut modes: Vec<(String, MultiSourceMode, Option<usize>)> = (0..k)
        .map(|i| (format!("single{i}"), MultiSourceMode::Single, Some(i)))
        .collect();
    modes.push(("merged".to_string(), MultiSourceMode::Merged, None));
    modes.push(("separate".to_string(), MultiSourceMode::Separate, None));
    let norms = [NormChoice::Bn, NormChoice::Dsbn];

    let seeds = cfg.experiment.seeds.clone();
    let jobs: Vec<(usize, usize, u64)> = (0..modes.len())
        .flat_map(|m| {
            let seeds = seeds.clone();
            (0..norms.len())
                .flat_map(move |n| seeds.clone().into_iter().map(move |s| (m, n, s)))
        })
        .collect();

    let results = pool::run_parallel(jobs.len(), |i| -> CliResult<f64> {
        let (m, n, seed) = jobs[i];
        let (label, mode, single_index) = &modes[m];
        let norm = norms[n];
        let mut run_cfg = cfg.clone();
        run_cfg.experiment.multi_source_mode = *mode;
        run_cfg.experiment.norm_stage1 = norm;
        if run_cfg.experiment.norm_stage2 != Stage2Norm::None {
            run_cfg.experiment.norm_stage2 = match norm {
                NormChoice::Bn => Stage2Norm::Bn,
                NormChoice::Dsbn => Stage2Norm::Dsbn,
            };
        }
        let dir = seed_dir(
            &out.join(format!("{label}_{}", norm_label(norm))),
            seed,
        );
        // Single-index runs need their dedicated dataset assembly.
        let summary = match single_index {
            Some(idx) => {
                let (sources, target) = build_datasets_single_index(&run_cfg, *idx)?;
                execute_prebuilt(&run_cfg, seed, &dir, sources, target)?
            }
            None => execute_run(&run_cfg, seed, &dir, false)?,
        };
        Ok(summary.final_acc())
    });

    let mut cells = Vec::new();
    for (m, (label, _, _)) in modes.iter().enumerate() {
        for (n, norm) in norms.iter().enumerate() {
            let mut acc = Vec::new();
            for (j, (jm, jn, _)) in jobs.iter().enumerate() {
                if *jm == m && *jn == n {
                    acc.push(*results[j].as_ref().map_err(clone_err)?);
                }
            }
            cells.push(MultiSourceCell {
                mode: label.clone(),
                norm: norm_label(*norm).to_string(),
                acc,
            });
        }
    }
    write_multisource_report(&out.join("multisource_report.csv"), &cells)
        .map_err(CliError::runtime)?;

    println!("mode       norm   acc");
    for cell in &cells {
        println!(
            "{:<10} {:<6} {:>6}%",
            cell.mode,
            cell.norm,
            fmt_pct(mean(&cell.acc))
        );
    }
    Ok(())
}

/// Variant of [`execute_run`] that takes pre-built datasets.
fn execute_prebuilt(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    sources: Vec<LabeledDataset>,
    target: LabeledDataset,
) -> CliResult<crate::runner::RunSummary> {
    use crate::report::{final_evals, write_metrics_jsonl, write_run_report};
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create run directory {}", dir.display()))
        .map_err(CliError::runtime)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved_for_seed(seed))
        .context("cannot write config.resolved")
        .map_err(CliError::runtime)?;
    let run = dsbn_core::pipeline::run(&cfg.pipeline_config(), &sources, &target, seed)
        .map_err(|e| CliError::runtime(anyhow::anyhow!("training failed: {e}")))?;
    write_metrics_jsonl(&dir.join("metrics.jsonl"), &run.log).map_err(CliError::runtime)?;
    let finals = final_evals(&run.log);
    write_run_report(&dir.join("report.csv"), target.class_count(), &finals)
        .map_err(CliError::runtime)?;
    crate::checkpoint::save(&dir.join("checkpoint.bin"), run.final_output())
        .map_err(CliError::runtime)?;
    Ok(crate::runner::RunSummary { seed, finals })
}

/// `export-embeddings`: penultimate-layer features of every example under a
/// trained checkpoint.
pub fn cmd_export_embeddings(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let stage = checkpoint::load(ckpt).map_err(CliError::runtime)?;
    let (sources, target) = datasets_from(cfg, data)?;
    let all: Vec<&LabeledDataset> = sources.iter().chain(target.iter()).collect();
    csvio::export_embeddings(out, &stage.network, &all).map_err(CliError::runtime)?;
    let rows: usize = all.iter().map(|d| d.len()).sum();
    println!("wrote {rows} embeddings to {}", out.display());
    Ok(())
}

/// `eval`: transductive evaluation of a checkpoint on the target domain.
pub fn cmd_eval(
    ckpt: &Path,
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let stage = checkpoint::load(ckpt).map_err(CliError::runtime)?;
    let (_, target) = datasets_from(cfg, data)?;
    let target = target.ok_or_else(|| {
        CliError::config(anyhow::anyhow!("no target domain in the supplied data"))
    })?;
    let metrics = evaluate_transductive(&stage.network, &target)
        .map_err(|e| CliError::runtime(anyhow::anyhow!("evaluation failed: {e}")))?;

    let header: Vec<String> = (0..target.class_count())
        .map(|c| format!("class_{c}"))
        .chain(["Avg".to_string(), "overall".to_string()])
        .collect();
    println!("{}", header.join("  "));
    let row: Vec<String> = metrics
        .per_class
        .iter()
        .map(|&a| fmt_pct(a))
        .chain([fmt_pct(metrics.class_avg), fmt_pct(metrics.overall)])
        .collect();
    println!("{}", row.join("  "));

    if let Some(path) = out {
        write_run_report(
            path,
            target.class_count(),
            &[("eval".to_string(), metrics)],
        )
        .map_err(CliError::runtime)?;
    }
    Ok(())
}

fn datasets_from(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
) -> CliResult<(Vec<LabeledDataset>, Option<LabeledDataset>)> {
    match data {
        Some(path) => csvio::import_datasets(path).map_err(CliError::config),
        None => {
            let (sources, target) = build_datasets(cfg)?;
            Ok((sources, Some(target)))
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn clone_err(e: &CliError) -> CliError {
    match e {
        CliError::Config(err) => CliError::Config(anyhow::anyhow!("{err:#}")),
        CliError::Runtime(err) => CliError::Runtime(anyhow::anyhow!("{err:#}")),
    }
}
