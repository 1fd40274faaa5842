//! Experiment configuration: TOML with nested sections, unknown keys
//! rejected, defaults filled in, and a canonical resolved dump per run.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dsbn_core::data::{BlobSpec, DomainTransform};
use dsbn_core::pipeline::{BaselineKind, NormSelect, PipelineConfig};
use dsbn_core::schedule::ScheduleParams;

use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Mstn,
    Cpua,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    Bn,
    Dsbn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage2Norm {
    Bn,
    Dsbn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiSourceMode {
    Single,
    Merged,
    Separate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub baseline: Baseline,
    #[serde(default = "default_norm")]
    pub norm_stage1: NormChoice,
    #[serde(default = "default_stage2_norm")]
    pub norm_stage2: Stage2Norm,
    #[serde(default = "default_multi_source_mode")]
    pub multi_source_mode: MultiSourceMode,
    #[serde(default = "default_stage2_iterations")]
    pub stage2_iterations: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub noise: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub seed: u64,
    #[serde(default = "default_source_rotations")]
    pub source_rotations_deg: Vec<f64>,
    #[serde(default = "default_source_shifts")]
    pub source_shifts: Vec<Vec<f64>>,
    pub target_rotation_deg: f64,
    pub target_shift: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_gamma_adapt")]
    pub gamma_adapt: f64,
    #[serde(default = "default_eta0_stage1")]
    pub eta0_stage1: f64,
    #[serde(default = "default_eta0_stage2")]
    pub eta0_stage2: f64,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
    #[serde(default = "default_beta_lr")]
    pub beta_lr: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters_stage1: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters_stage2: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_theta_centroid")]
    pub theta_centroid: f64,
    #[serde(default)]
    pub warm_start_stage2: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage1_fixed_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_fixed_lambda: Option<f64>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_norm() -> NormChoice {
    NormChoice::Dsbn
}
fn default_stage2_norm() -> Stage2Norm {
    Stage2Norm::Dsbn
}
fn default_multi_source_mode() -> MultiSourceMode {
    MultiSourceMode::Single
}
fn default_stage2_iterations() -> usize {
    1
}
fn default_radius() -> f64 {
    1.0
}
fn default_source_rotations() -> Vec<f64> {
    vec![0.0]
}
fn default_source_shifts() -> Vec<Vec<f64>> {
    vec![vec![0.0, 0.0]]
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_disc_hidden() -> usize {
    64
}
fn default_gamma_adapt() -> f64 {
    10.0
}
fn default_eta0_stage1() -> f64 {
    1e-4
}
fn default_eta0_stage2() -> f64 {
    5e-5
}
fn default_alpha_lr() -> f64 {
    10.0
}
fn default_beta_lr() -> f64 {
    0.75
}
fn default_max_iters() -> usize {
    3000
}
fn default_batch_size() -> usize {
    40
}
fn default_eval_every() -> usize {
    500
}
fn default_log_every() -> usize {
    50
}
fn default_theta_centroid() -> f64 {
    0.7
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.1
}

/// Full experiment description as read from a TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    #[serde(default = "default_model_section")]
    pub model: ModelSection,
    #[serde(default = "default_schedule_section")]
    pub schedule: ScheduleSection,
    #[serde(default = "default_training_section")]
    pub training: TrainingSection,
}

fn default_model_section() -> ModelSection {
    ModelSection {
        hidden: default_hidden(),
        disc_hidden: default_disc_hidden(),
    }
}

fn default_schedule_section() -> ScheduleSection {
    ScheduleSection {
        gamma_adapt: default_gamma_adapt(),
        eta0_stage1: default_eta0_stage1(),
        eta0_stage2: default_eta0_stage2(),
        alpha_lr: default_alpha_lr(),
        beta_lr: default_beta_lr(),
        max_iters_stage1: default_max_iters(),
        max_iters_stage2: default_max_iters(),
    }
}

fn default_training_section() -> TrainingSection {
    TrainingSection {
        batch_size: default_batch_size(),
        eval_every: default_eval_every(),
        log_every: default_log_every(),
        theta_centroid: default_theta_centroid(),
        warm_start_stage2: false,
        stage1_fixed_lambda: None,
        stage2_fixed_lambda: None,
        bn_eps: default_bn_eps(),
        bn_momentum: default_bn_momentum(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))
            .map_err(CliError::config)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))
            .map_err(CliError::config)?;
        cfg.validate().map_err(CliError::config)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.dataset;
        if self.experiment.seeds.is_empty() {
            bail!("experiment.seeds: must list at least one seed");
        }
        if self.experiment.stage2_iterations == 0 {
            bail!("experiment.stage2_iterations: must be at least 1");
        }
        if d.classes < 2 || d.dims < 2 {
            bail!("dataset.classes and dataset.dims: must both be at least 2");
        }
        if d.classes > d.dims + 1 {
            bail!(
                "dataset.classes: {} cluster centers need at least {} dims",
                d.classes,
                d.classes - 1
            );
        }
        if d.noise <= 0.0 || d.radius <= 0.0 || d.per_class == 0 {
            bail!("dataset.noise, dataset.radius, dataset.per_class: must be positive");
        }
        if d.source_rotations_deg.len() != d.source_shifts.len() {
            bail!(
                "dataset.source_rotations_deg and dataset.source_shifts: lengths differ ({} vs {})",
                d.source_rotations_deg.len(),
                d.source_shifts.len()
            );
        }
        if d.source_shifts.is_empty() {
            bail!("dataset.source_shifts: at least one source domain required");
        }
        for (i, s) in d.source_shifts.iter().enumerate() {
            if s.len() != d.dims {
                bail!(
                    "dataset.source_shifts[{i}]: has {} components, dataset.dims is {}",
                    s.len(),
                    d.dims
                );
            }
        }
        if d.target_shift.len() != d.dims {
            bail!(
                "dataset.target_shift: has {} components, dataset.dims is {}",
                d.target_shift.len(),
                d.dims
            );
        }
        if self.experiment.multi_source_mode != MultiSourceMode::Single
            && d.source_shifts.len() < 2
        {
            bail!("experiment.multi_source_mode: merged/separate need at least 2 sources");
        }
        if self.training.batch_size < 2 {
            bail!("training.batch_size: must be at least 2 for batch statistics");
        }
        if d.per_class * d.classes < self.training.batch_size {
            bail!(
                "training.batch_size: {} exceeds the {} examples per domain",
                self.training.batch_size,
                d.per_class * d.classes
            );
        }
        if self.model.hidden.is_empty() {
            bail!("model.hidden: at least one hidden layer required");
        }
        for lam in [
            self.training.stage1_fixed_lambda,
            self.training.stage2_fixed_lambda,
        ]
        .into_iter()
        .flatten()
        {
            if !(0.0..=1.0).contains(&lam) {
                bail!("training.*_fixed_lambda: must lie in [0, 1]");
            }
        }
        if !(self.training.bn_momentum > 0.0 && self.training.bn_momentum <= 1.0) {
            bail!("training.bn_momentum: must lie in (0, 1]");
        }
        if self.training.bn_eps <= 0.0 {
            bail!("training.bn_eps: must be positive");
        }
        if self.schedule.eta0_stage1 <= 0.0 || self.schedule.eta0_stage2 <= 0.0 {
            bail!("schedule.eta0_stage1/eta0_stage2: must be positive");
        }
        if self.schedule.max_iters_stage1 == 0 || self.schedule.max_iters_stage2 == 0 {
            bail!("schedule.max_iters_stage1/max_iters_stage2: must be positive");
        }
        Ok(())
    }

    /// Canonical TOML dump with the seed list narrowed to one run.
    pub fn resolved_for_seed(&self, seed: u64) -> String {
        let mut copy = self.clone();
        copy.experiment.seeds = vec![seed];
        toml::to_string_pretty(&copy).expect("config serializes")
    }

    pub fn source_count(&self) -> usize {
        self.dataset.source_shifts.len()
    }

    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            classes: self.dataset.classes,
            dims: self.dataset.dims,
            per_class: self.dataset.per_class,
            noise: self.dataset.noise,
            radius: self.dataset.radius,
            seed: self.dataset.seed,
        }
    }

    pub fn source_transforms(&self) -> Vec<DomainTransform> {
        self.dataset
            .source_rotations_deg
            .iter()
            .zip(&self.dataset.source_shifts)
            .map(|(&deg, shift)| DomainTransform {
                rotation: deg.to_radians(),
                shift: shift.clone(),
            })
            .collect()
    }

    pub fn target_transform(&self) -> DomainTransform {
        DomainTransform {
            rotation: self.dataset.target_rotation_deg.to_radians(),
            shift: self.dataset.target_shift.clone(),
        }
    }

    /// Core pipeline configuration implied by this experiment config.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut stage1 = ScheduleParams::new(
            self.schedule.eta0_stage1,
            self.schedule.max_iters_stage1,
        );
        stage1.gamma_adapt = self.schedule.gamma_adapt;
        stage1.alpha_lr = self.schedule.alpha_lr;
        stage1.beta_lr = self.schedule.beta_lr;
        let mut stage2 = ScheduleParams::new(
            self.schedule.eta0_stage2,
            self.schedule.max_iters_stage2,
        );
        stage2.gamma_adapt = self.schedule.gamma_adapt;
        stage2.alpha_lr = self.schedule.alpha_lr;
        stage2.beta_lr = self.schedule.beta_lr;

        let baseline = match self.experiment.baseline {
            Baseline::Mstn => BaselineKind::Mstn,
            Baseline::Cpua => BaselineKind::Cpua,
        };
        let mut cfg = PipelineConfig::new(baseline, stage1, stage2);
        cfg.norm_stage1 = match self.experiment.norm_stage1 {
            NormChoice::Bn => NormSelect::Bn,
            NormChoice::Dsbn => NormSelect::Dsbn,
        };
        cfg.norm_stage2 = match self.experiment.norm_stage2 {
            Stage2Norm::Bn => Some(NormSelect::Bn),
            Stage2Norm::Dsbn => Some(NormSelect::Dsbn),
            Stage2Norm::None => None,
        };
        cfg.stage2_iterations = self.experiment.stage2_iterations;
        cfg.hidden = self.model.hidden.clone();
        cfg.disc_hidden = self.model.disc_hidden;
        cfg.batch_size = self.training.batch_size;
        cfg.theta_centroid = self.training.theta_centroid;
        cfg.stage1_fixed_lambda = self.training.stage1_fixed_lambda;
        cfg.stage2_fixed_lambda = self.training.stage2_fixed_lambda;
        cfg.warm_start_stage2 = self.training.warm_start_stage2;
        cfg.eval_every = self.training.eval_every;
        cfg.log_every = self.training.log_every;
        cfg.bn_eps = self.training.bn_eps;
        cfg.bn_momentum = self.training.bn_momentum;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [experiment]
        baseline = "mstn"
        seeds = [1]

        [dataset]
        classes = 3
        dims = 2
        per_class = 100
        noise = 0.35
        seed = 7
        target_rotation_deg = 50.0
        target_shift = [1.5, 0.0]
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.model.hidden, vec![32, 32]);
        assert_eq!(cfg.training.batch_size, 40);
        assert_eq!(cfg.schedule.eta0_stage1, 1e-4);
        assert_eq!(cfg.experiment.norm_stage1, NormChoice::Dsbn);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\n[experiment2]\nx = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
        let bad = MINIMAL.replace("baseline = \"mstn\"", "baseline = \"mstn\"\nbaslean = 2");
        assert!(toml::from_str::<ExperimentConfig>(&bad).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.experiment.seeds.clear();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("experiment.seeds"));

        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.dataset.target_shift = vec![1.0];
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("dataset.target_shift"));
    }

    #[test]
    fn resolved_dump_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let dump = cfg.resolved_for_seed(42);
        let back: ExperimentConfig = toml::from_str(&dump).unwrap();
        assert_eq!(back.experiment.seeds, vec![42]);
        assert_eq!(back.training.batch_size, cfg.training.batch_size);
    }
}
