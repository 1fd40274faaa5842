//! Two-stage adaptation: stage 1 trains a pseudo-labeler with its original
//! adaptation losses, stage 2 self-trains on scheduled pseudo-labels, and
//! stage 2 can be repeated with the bank rebuilt from the preceding model.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::data::{
    evaluate_transductive, per_domain_batches, DomainBatch, LabeledDataset, Metrics,
};
use crate::derive_seed;
use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{
    multi_source_total_loss, AlignContext, CentroidBank, ClassPrior, SourceTerm,
};
use crate::nn::{MlpArch, NetOutput, Network, NormKind};
use crate::norm::convert_bn_to_dsbn;
use crate::optim::Adam;
use crate::param::ParamAlloc;
use crate::schedule::{lambda_schedule, lr_schedule, ScheduleParams};
use crate::tensor::argmax;
use crate::RunRng;

/// Consecutive non-finite losses tolerated before aborting.
const DIVERGENCE_PATIENCE: usize = 10;

const INIT_TAG_STAGE1: u64 = 0x51;
const INIT_TAG_STAGE2: u64 = 0x52;
const SHUFFLE_TAG: u64 = 0x5F00;

/// Which adaptation objective drives stage 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Mstn,
    Cpua,
}

/// Normalization flavor of a stage's network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormSelect {
    Bn,
    Dsbn,
}

/// All knobs of one experiment run (dataset excluded).
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub baseline: BaselineKind,
    pub norm_stage1: NormSelect,
    /// `None` skips stage 2 entirely.
    pub norm_stage2: Option<NormSelect>,
    pub stage2_iterations: usize,
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    /// Examples per domain per optimizer step.
    pub batch_size: usize,
    pub stage1: ScheduleParams,
    pub stage2: ScheduleParams,
    /// EMA factor of the semantic-matching centroid banks.
    pub theta_centroid: f64,
    /// Overrides the scheduled adaptation factor of stage 1 when set.
    pub stage1_fixed_lambda: Option<f64>,
    /// Overrides the scheduled pseudo-label blend weight of stage 2 when set.
    pub stage2_fixed_lambda: Option<f64>,
    /// Initialize stage 2 from the stage-1 network instead of fresh weights.
    pub warm_start_stage2: bool,
    pub eval_every: usize,
    pub log_every: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl PipelineConfig {
    /// Configuration with conventional defaults; schedules must still be
    /// sized by the caller.
    pub fn new(baseline: BaselineKind, stage1: ScheduleParams, stage2: ScheduleParams) -> Self {
        PipelineConfig {
            baseline,
            norm_stage1: NormSelect::Dsbn,
            norm_stage2: Some(NormSelect::Dsbn),
            stage2_iterations: 1,
            hidden: vec![32, 32],
            disc_hidden: 64,
            batch_size: 40,
            stage1,
            stage2,
            theta_centroid: 0.7,
            stage1_fixed_lambda: None,
            stage2_fixed_lambda: None,
            warm_start_stage2: false,
            eval_every: 0,
            log_every: 0,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Training phase an event belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Stage1,
    /// 1-based stage-2 iteration.
    Stage2(usize),
}

/// Loss trace entry.
#[derive(Clone, Debug)]
pub struct StepEvent {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
}

/// Evaluation trace entry.
#[derive(Clone, Debug)]
pub struct EvalEvent {
    pub phase: Phase,
    pub step: usize,
    pub metrics: Metrics,
}

/// Ordered event log of one run.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub steps: Vec<StepEvent>,
    pub evals: Vec<EvalEvent>,
}

/// Stage-1 score vectors for every target example, frozen for one stage-2
/// run. Row `i` is the softmax output of the pseudo-labeler on target
/// example `i`.
#[derive(Clone, Debug)]
pub struct PseudoLabelBank {
    scores: Vec<Vec<f64>>,
}

impl PseudoLabelBank {
    /// Eval-mode softmax scores of `network` on every target example.
    pub fn from_network(network: &Network, target: &LabeledDataset) -> Result<Self> {
        let mut scores = Vec::with_capacity(target.len());
        let chunk = 256;
        let mut i = 0;
        while i < target.len() {
            let hi = (i + chunk).min(target.len());
            let ids: Vec<usize> = (i..hi).collect();
            let x = target.features().gather_rows(&ids)?;
            let (_, logits) = network.infer(&x, Some(DomainId::Target))?;
            let probs = logits.softmax_rows();
            for r in 0..ids.len() {
                scores.push(probs.row(r).to_vec());
            }
            i = hi;
        }
        let bank = PseudoLabelBank { scores };
        debug_assert!(bank.rows_are_distributions(1e-6));
        Ok(bank)
    }

    pub fn from_scores(scores: Vec<Vec<f64>>) -> Self {
        PseudoLabelBank { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self, example_id: usize) -> &[f64] {
        &self.scores[example_id]
    }

    /// Argmax labels of the stored scores.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.scores.iter().map(|row| argmax(row)).collect()
    }

    /// Every row is nonnegative and sums to 1 within `tol`.
    pub fn rows_are_distributions(&self, tol: f64) -> bool {
        self.scores.iter().all(|row| {
            row.iter().all(|&p| p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Blended pseudo-label of one target example:
/// `argmax_c (1 - lambda) * bank[c] + lambda * f2_scores[c]`, ties to the
/// lowest class index.
pub fn refine_pseudo_label(
    bank: &PseudoLabelBank,
    f2_scores: &[f64],
    example_id: usize,
    lambda: f64,
) -> Result<usize> {
    debug_assert!((0.0..=1.0).contains(&lambda));
    let stage1 = bank.scores(example_id);
    if stage1.len() != f2_scores.len() {
        return Err(Error::ShapeMismatch {
            context: "refine_pseudo_label",
            left: vec![stage1.len()],
            right: vec![f2_scores.len()],
        });
    }
    let blended: Vec<f64> = stage1
        .iter()
        .zip(f2_scores)
        .map(|(&a, &b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    Ok(argmax(&blended))
}

/// Trained model of one stage plus everything needed to checkpoint it.
#[derive(Debug)]
pub struct StageOutput {
    pub network: Network,
    pub discriminator: Option<Network>,
    pub optimizer: Adam,
    /// Initialization RNG, advanced past all draws of this stage.
    pub rng: RunRng,
    pub final_metrics: Metrics,
}

/// Outcome of a full two-stage run.
pub struct PipelineRun {
    pub stage1: StageOutput,
    pub stage1_bank: PseudoLabelBank,
    pub stage2: Vec<StageOutput>,
    pub log: RunLog,
}

impl PipelineRun {
    /// The network the run ends with: the last stage-2 model, or the stage-1
    /// model when stage 2 is skipped.
    pub fn final_output(&self) -> &StageOutput {
        self.stage2.last().unwrap_or(&self.stage1)
    }

    pub fn final_phase(&self) -> Phase {
        if self.stage2.is_empty() {
            Phase::Stage1
        } else {
            Phase::Stage2(self.stage2.len())
        }
    }
}

/// Runs stage 1 and, when configured, the iterated stage 2.
pub fn run(
    cfg: &PipelineConfig,
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    seed: u64,
) -> Result<PipelineRun> {
    validate_domains(sources, target)?;
    let mut log = RunLog::default();
    let (stage1, bank) = train_stage1(cfg, sources, target, seed, &mut log)?;
    let mut stage2 = Vec::new();
    if cfg.norm_stage2.is_some() {
        stage2 = iterate_stage2(
            cfg.stage2_iterations,
            cfg,
            &bank,
            &stage1.network,
            sources,
            target,
            seed,
            &mut log,
        )?;
    }
    Ok(PipelineRun {
        stage1,
        stage1_bank: bank,
        stage2,
        log,
    })
}

/// Trains the stage-1 pseudo-labeler with its original adaptation loss and
/// returns the model plus a bank of its eval-mode target scores.
pub fn train_stage1(
    cfg: &PipelineConfig,
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    seed: u64,
    log: &mut RunLog,
) -> Result<(StageOutput, PseudoLabelBank)> {
    validate_domains(sources, target)?;
    let classes = target.class_count();
    let input_dim = target.dim();
    let domains = domain_list(sources);

    let mut alloc = ParamAlloc::new();
    let mut rng = RunRng::seed_from_u64(derive_seed(seed, INIT_TAG_STAGE1));
    let arch = arch_for(cfg, input_dim, classes);
    let mut net = Network::mlp(&arch, &mut alloc, &mut rng);
    if cfg.norm_stage1 == NormSelect::Dsbn {
        net = convert_bn_to_dsbn(net, &domains, &mut alloc)?;
    }
    let disc_input = match cfg.baseline {
        BaselineKind::Mstn => arch.feature_dim(),
        BaselineKind::Cpua => classes,
    };
    let mut disc = Network::mlp(
        &MlpArch::new(disc_input, vec![cfg.disc_hidden], 1, NormKind::None),
        &mut alloc,
        &mut rng,
    );

    let mut banks: Vec<CentroidBank> = sources
        .iter()
        .map(|_| CentroidBank::new(classes, arch.feature_dim(), cfg.theta_centroid))
        .collect();
    let source_priors: Vec<ClassPrior> = sources
        .iter()
        .map(|s| ClassPrior::from_labels(s.supervision().expect("sources are labeled"), classes))
        .collect();

    let mut adam = Adam::new();
    let mut step = 0usize;
    let mut bad_since: Option<usize> = None;
    let max_iters = cfg.stage1.max_iters;
    let mut target_pseudo: Vec<usize> = Vec::new();
    let mut target_prior = ClassPrior::from_counts(vec![0; classes]);

    'train: for epoch in 0.. {
        if cfg.baseline == BaselineKind::Cpua {
            // Pseudo-label snapshot and class prior refresh once per epoch.
            let (pseudo, prior) = target_pseudo_snapshot(&net, target)?;
            target_pseudo = pseudo;
            target_prior = prior;
        }
        let datasets: Vec<&LabeledDataset> =
            sources.iter().chain([target]).collect();
        let rounds = per_domain_batches(
            &datasets,
            cfg.batch_size,
            derive_seed(seed, SHUFFLE_TAG + epoch),
        )?;
        for round in rounds {
            let p = step as f64 / max_iters as f64;
            let lambda = cfg
                .stage1_fixed_lambda
                .unwrap_or_else(|| lambda_schedule(p, cfg.stage1.gamma_adapt));
            let lr = lr_schedule(p, &cfg.stage1);

            net.zero_grads();
            disc.zero_grads();
            let mut g = Graph::new();
            let (target_batch, source_batches) = round.split_last().expect("target present");
            debug_assert!(target_batch.domain.is_target());

            let t_out = forward_batch_train(&mut g, &mut net, target_batch)?;
            let pseudo_t: Vec<usize> = match cfg.baseline {
                BaselineKind::Mstn => g.value(t_out.logits).argmax_rows(),
                BaselineKind::Cpua => target_batch
                    .example_ids
                    .iter()
                    .map(|&i| target_pseudo[i])
                    .collect(),
            };
            let mut source_terms = Vec::with_capacity(source_batches.len());
            for sb in source_batches {
                let output = forward_batch_train(&mut g, &mut net, sb)?;
                source_terms.push(SourceTerm {
                    output,
                    labels: sb.labels.as_deref().expect("sources are labeled"),
                    domain: sb.domain,
                });
            }
            let align = match cfg.baseline {
                BaselineKind::Mstn => AlignContext::Mstn {
                    discriminator: &mut disc,
                    banks: &mut banks,
                    pseudo_labels_t: &pseudo_t,
                },
                BaselineKind::Cpua => AlignContext::Cpua {
                    discriminator: &mut disc,
                    source_priors: &source_priors,
                    target_prior: &target_prior,
                    pseudo_labels_t: &pseudo_t,
                },
            };
            let loss = multi_source_total_loss(&mut g, &source_terms, &t_out, align, lambda)?;
            let loss_val = g.value(loss).item();

            if loss_val.is_finite() {
                bad_since = None;
                g.backward(loss)?;
                net.accumulate_grads(&g);
                disc.accumulate_grads(&g);
                adam.begin_step();
                net.visit_params_mut(&mut |p| adam.update(p, lr));
                disc.visit_params_mut(&mut |p| adam.update(p, lr));
            } else {
                let first = *bad_since.get_or_insert(step);
                if step - first + 1 >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged { step: first });
                }
            }

            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log.steps.push(StepEvent {
                    phase: Phase::Stage1,
                    step,
                    loss: loss_val,
                    lambda,
                    lr,
                });
            }
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < max_iters {
                log.evals.push(EvalEvent {
                    phase: Phase::Stage1,
                    step,
                    metrics: evaluate_transductive(&net, target)?,
                });
            }
            if step >= max_iters {
                break 'train;
            }
        }
    }

    let final_metrics = evaluate_transductive(&net, target)?;
    log.evals.push(EvalEvent {
        phase: Phase::Stage1,
        step,
        metrics: final_metrics.clone(),
    });
    let bank = PseudoLabelBank::from_network(&net, target)?;
    Ok((
        StageOutput {
            network: net,
            discriminator: Some(disc),
            optimizer: adam,
            rng,
            final_metrics,
        },
        bank,
    ))
}

/// Trains a stage-2 model against source ground truth and scheduled
/// pseudo-labels from the bank blended with the model's own predictions.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &PipelineConfig,
    bank: &PseudoLabelBank,
    stage1_network: &Network,
    iteration: usize,
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    seed: u64,
    log: &mut RunLog,
) -> Result<StageOutput> {
    validate_domains(sources, target)?;
    if bank.len() != target.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "pseudo-label bank covers {} examples, target has {}",
            bank.len(),
            target.len()
        )));
    }
    let norm = cfg.norm_stage2.ok_or_else(|| {
        Error::InvalidConfig("train_stage2 called with norm_stage2 = none".into())
    })?;
    let classes = target.class_count();
    let domains = domain_list(sources);
    let phase = Phase::Stage2(iteration);

    let mut alloc = ParamAlloc::new();
    let mut rng = RunRng::seed_from_u64(derive_seed(
        seed,
        INIT_TAG_STAGE2 + 0x100 * iteration as u64,
    ));
    let mut net = if cfg.warm_start_stage2 {
        warm_start(cfg, stage1_network, norm, &domains, &mut alloc)?
    } else {
        let arch = arch_for(cfg, target.dim(), classes);
        let fresh = Network::mlp(&arch, &mut alloc, &mut rng);
        match norm {
            NormSelect::Bn => fresh,
            NormSelect::Dsbn => convert_bn_to_dsbn(fresh, &domains, &mut alloc)?,
        }
    };

    let mut adam = Adam::new();
    let mut step = 0usize;
    let mut bad_since: Option<usize> = None;
    let max_iters = cfg.stage2.max_iters;

    'train: for epoch in 0.. {
        let datasets: Vec<&LabeledDataset> = sources.iter().chain([target]).collect();
        let rounds = per_domain_batches(
            &datasets,
            cfg.batch_size,
            derive_seed(seed, SHUFFLE_TAG + 0x1_0000 * iteration as u64 + epoch),
        )?;
        for round in rounds {
            let p = step as f64 / max_iters as f64;
            let lambda = cfg
                .stage2_fixed_lambda
                .unwrap_or_else(|| lambda_schedule(p, cfg.stage2.gamma_adapt));
            let lr = lr_schedule(p, &cfg.stage2);

            let (target_batch, source_batches) = round.split_last().expect("target present");

            // Refresh this batch's pseudo-labels from the current model in
            // eval mode, then blend with the stage-1 scores.
            let (_, logits) = net.infer(&target_batch.features, Some(DomainId::Target))?;
            let probs = logits.softmax_rows();
            let mut pseudo = Vec::with_capacity(target_batch.example_ids.len());
            for (row, &id) in target_batch.example_ids.iter().enumerate().map(|(r, i)| (r, i)) {
                pseudo.push(refine_pseudo_label(bank, probs.row(row), id, lambda)?);
            }

            net.zero_grads();
            let mut g = Graph::new();
            let t_out = forward_batch_train(&mut g, &mut net, target_batch)?;
            let ce_t = g.softmax_cross_entropy(t_out.logits, &pseudo)?;
            let mut src_sum: Option<Var> = None;
            for sb in source_batches {
                let out = forward_batch_train(&mut g, &mut net, sb)?;
                let ce = g.softmax_cross_entropy(
                    out.logits,
                    sb.labels.as_deref().expect("sources are labeled"),
                )?;
                src_sum = Some(match src_sum {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
            }
            let src_mean = {
                let sum = src_sum.expect("at least one source");
                g.scale(sum, 1.0 / source_batches.len() as f64)
            };
            let loss = g.add(src_mean, ce_t)?;
            let loss_val = g.value(loss).item();

            if loss_val.is_finite() {
                bad_since = None;
                g.backward(loss)?;
                net.accumulate_grads(&g);
                adam.begin_step();
                net.visit_params_mut(&mut |p| adam.update(p, lr));
            } else {
                let first = *bad_since.get_or_insert(step);
                if step - first + 1 >= DIVERGENCE_PATIENCE {
                    return Err(Error::Diverged { step: first });
                }
            }

            if cfg.log_every > 0 && step % cfg.log_every == 0 {
                log.steps.push(StepEvent {
                    phase,
                    step,
                    loss: loss_val,
                    lambda,
                    lr,
                });
            }
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < max_iters {
                log.evals.push(EvalEvent {
                    phase,
                    step,
                    metrics: evaluate_transductive(&net, target)?,
                });
            }
            if step >= max_iters {
                break 'train;
            }
        }
    }

    let final_metrics = evaluate_transductive(&net, target)?;
    log.evals.push(EvalEvent {
        phase,
        step,
        metrics: final_metrics.clone(),
    });
    Ok(StageOutput {
        network: net,
        discriminator: None,
        optimizer: adam,
        rng,
        final_metrics,
    })
}

/// Repeats stage 2 `k` times; iteration `j > 1` rebuilds the bank from the
/// eval-mode target scores of iteration `j - 1` and trains afresh.
#[allow(clippy::too_many_arguments)]
pub fn iterate_stage2(
    k: usize,
    cfg: &PipelineConfig,
    initial_bank: &PseudoLabelBank,
    stage1_network: &Network,
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    seed: u64,
    log: &mut RunLog,
) -> Result<Vec<StageOutput>> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "stage-2 iteration count must be at least 1".into(),
        ));
    }
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(k);
    let mut bank = initial_bank.clone();
    for j in 1..=k {
        if j > 1 {
            let prev = &outputs.last().expect("previous iteration").network;
            bank = PseudoLabelBank::from_network(prev, target)?;
        }
        let out = train_stage2(cfg, &bank, stage1_network, j, sources, target, seed, log)?;
        outputs.push(out);
    }
    Ok(outputs)
}

fn forward_batch_train(
    g: &mut Graph,
    net: &mut Network,
    batch: &DomainBatch,
) -> Result<NetOutput> {
    let x = g.constant(batch.features.clone());
    net.forward_train(g, x, Some(batch.domain))
}

fn arch_for(cfg: &PipelineConfig, input_dim: usize, classes: usize) -> MlpArch {
    let mut arch = MlpArch::new(input_dim, cfg.hidden.clone(), classes, NormKind::Batch);
    arch.bn_eps = cfg.bn_eps;
    arch.bn_momentum = cfg.bn_momentum;
    arch
}

fn warm_start(
    cfg: &PipelineConfig,
    stage1_network: &Network,
    norm: NormSelect,
    domains: &[DomainId],
    alloc: &mut ParamAlloc,
) -> Result<Network> {
    let copy = stage1_network.duplicate(alloc);
    match (cfg.norm_stage1, norm) {
        (a, b) if a == b => Ok(copy),
        (NormSelect::Bn, NormSelect::Dsbn) => convert_bn_to_dsbn(copy, domains, alloc),
        (NormSelect::Dsbn, NormSelect::Bn) => Err(Error::InvalidConfig(
            "cannot warm-start a plain-BN stage 2 from a DSBN stage 1".into(),
        )),
        _ => unreachable!(),
    }
}

fn domain_list(sources: &[LabeledDataset]) -> Vec<DomainId> {
    sources
        .iter()
        .map(|s| s.domain())
        .chain([DomainId::Target])
        .collect()
}

fn validate_domains(sources: &[LabeledDataset], target: &LabeledDataset) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidConfig("no source domains".into()));
    }
    if !target.domain().is_target() {
        return Err(Error::InvalidConfig(
            "target dataset must be tagged as the target domain".into(),
        ));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.domain() != DomainId::Source(i as u16) {
            return Err(Error::InvalidConfig(
                "source domains must be tagged source0..sourceK in order".into(),
            ));
        }
        if s.dim() != target.dim() || s.class_count() != target.class_count() {
            return Err(Error::InvalidConfig(
                "all domains must share feature dim and class count".into(),
            ));
        }
    }
    Ok(())
}

/// Eval-mode argmax labels of the full target set plus their class prior.
fn target_pseudo_snapshot(
    net: &Network,
    target: &LabeledDataset,
) -> Result<(Vec<usize>, ClassPrior)> {
    let mut labels = Vec::with_capacity(target.len());
    let chunk = 256;
    let mut i = 0;
    while i < target.len() {
        let hi = (i + chunk).min(target.len());
        let ids: Vec<usize> = (i..hi).collect();
        let x = target.features().gather_rows(&ids)?;
        let (_, logits) = net.infer(&x, Some(DomainId::Target))?;
        labels.extend(logits.argmax_rows());
        i = hi;
    }
    let prior = ClassPrior::from_labels(&labels, target.class_count());
    Ok((labels, prior))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_shifted_blobs, BlobSpec};
    use crate::tensor::Tensor;

    fn tiny_config(baseline: BaselineKind) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(
            baseline,
            ScheduleParams::new(2e-3, 30),
            ScheduleParams::new(1e-3, 30),
        );
        cfg.hidden = vec![8, 8];
        cfg.disc_hidden = 8;
        cfg.batch_size = 20;
        cfg
    }

    fn tiny_data() -> (Vec<LabeledDataset>, LabeledDataset) {
        let spec = BlobSpec {
            classes: 2,
            dims: 2,
            per_class: 40,
            noise: 0.3,
            radius: 1.0,
            seed: 3,
        };
        let (s, t) = make_shifted_blobs(&spec, 0.8, &[1.0, 0.0]).unwrap();
        (vec![s], t)
    }

    #[test]
    fn refine_boundaries_and_blend() {
        let bank = PseudoLabelBank::from_scores(vec![vec![0.6, 0.4]]);
        let f2 = [0.3, 0.7];
        assert_eq!(refine_pseudo_label(&bank, &f2, 0, 0.0).unwrap(), 0);
        assert_eq!(refine_pseudo_label(&bank, &f2, 0, 1.0).unwrap(), 1);
        // Blend [0.45, 0.55] picks class 1.
        assert_eq!(refine_pseudo_label(&bank, &f2, 0, 0.5).unwrap(), 1);
        assert!(matches!(
            refine_pseudo_label(&bank, &[0.2, 0.3, 0.5], 0, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn refine_ties_break_to_lowest_class() {
        let bank = PseudoLabelBank::from_scores(vec![vec![0.5, 0.5]]);
        assert_eq!(refine_pseudo_label(&bank, &[0.5, 0.5], 0, 0.5).unwrap(), 0);
    }

    #[test]
    fn stage1_is_deterministic_given_seed() {
        let (sources, target) = tiny_data();
        let cfg = tiny_config(BaselineKind::Mstn);
        let mut log1 = RunLog::default();
        let (out1, bank1) = train_stage1(&cfg, &sources, &target, 77, &mut log1).unwrap();
        let mut log2 = RunLog::default();
        let (out2, bank2) = train_stage1(&cfg, &sources, &target, 77, &mut log2).unwrap();

        assert_eq!(bank1.scores, bank2.scores, "banks must match bitwise");
        let mut params1 = Vec::new();
        out1.network.visit_params(&mut |p| {
            params1.extend_from_slice(p.value().values());
        });
        let mut params2 = Vec::new();
        out2.network.visit_params(&mut |p| {
            params2.extend_from_slice(p.value().values());
        });
        assert_eq!(params1, params2);
    }

    #[test]
    fn bank_rows_are_distributions() {
        let (sources, target) = tiny_data();
        let cfg = tiny_config(BaselineKind::Cpua);
        let mut log = RunLog::default();
        let (_, bank) = train_stage1(&cfg, &sources, &target, 5, &mut log).unwrap();
        assert_eq!(bank.len(), target.len());
        assert!(bank.rows_are_distributions(1e-6));
    }

    #[test]
    fn stage2_with_lambda_zero_equals_training_on_hard_labels() {
        // At lambda = 0 only the argmax of the stage-1 scores matters, so a
        // one-hot bank with the same argmax must produce the same model.
        let (sources, target) = tiny_data();
        let mut cfg = tiny_config(BaselineKind::Mstn);
        cfg.stage2_fixed_lambda = Some(0.0);
        let mut log = RunLog::default();
        let (s1, bank) = train_stage1(&cfg, &sources, &target, 11, &mut log).unwrap();

        let onehot = PseudoLabelBank::from_scores(
            bank.hard_labels()
                .iter()
                .map(|&y| {
                    let mut row = vec![0.0; target.class_count()];
                    row[y] = 1.0;
                    row
                })
                .collect(),
        );
        let run = |bank: &PseudoLabelBank| {
            let mut log = RunLog::default();
            let out = train_stage2(
                &cfg, bank, &s1.network, 1, &sources, &target, 11, &mut log,
            )
            .unwrap();
            let mut params = Vec::new();
            out.network
                .visit_params(&mut |p| params.extend_from_slice(p.value().values()));
            params
        };
        assert_eq!(run(&bank), run(&onehot));
    }

    #[test]
    fn iterate_stage2_single_iteration_matches_plain_stage2() {
        let (sources, target) = tiny_data();
        let cfg = tiny_config(BaselineKind::Mstn);
        let mut log = RunLog::default();
        let (s1, bank) = train_stage1(&cfg, &sources, &target, 8, &mut log).unwrap();

        let mut log_a = RunLog::default();
        let single = train_stage2(
            &cfg, &bank, &s1.network, 1, &sources, &target, 8, &mut log_a,
        )
        .unwrap();
        let mut log_b = RunLog::default();
        let iterated = iterate_stage2(
            1, &cfg, &bank, &s1.network, &sources, &target, 8, &mut log_b,
        )
        .unwrap();
        assert_eq!(iterated.len(), 1);
        let collect = |n: &Network| {
            let mut v = Vec::new();
            n.visit_params(&mut |p| v.extend_from_slice(p.value().values()));
            v
        };
        assert_eq!(collect(&single.network), collect(&iterated[0].network));
    }

    #[test]
    fn divergence_aborts_with_step_index() {
        let (mut sources, target) = tiny_data();
        // Poison the source features so every loss is non-finite.
        let n = sources[0].len();
        let dim = sources[0].dim();
        let features = Tensor::new(&[n, dim], vec![f64::NAN; n * dim]).unwrap();
        sources[0] = LabeledDataset::new(
            features,
            sources[0].eval_labels().to_vec(),
            sources[0].domain(),
            sources[0].class_count(),
        )
        .unwrap();
        let cfg = tiny_config(BaselineKind::Mstn);
        let mut log = RunLog::default();
        let err = train_stage1(&cfg, &sources, &target, 1, &mut log).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0 }));
    }

    #[test]
    fn full_run_is_bit_reproducible() {
        let (sources, target) = tiny_data();
        let mut cfg = tiny_config(BaselineKind::Mstn);
        cfg.stage2_iterations = 2;
        let collect = |run: &PipelineRun| {
            let mut v = Vec::new();
            run.final_output()
                .network
                .visit_params(&mut |p| v.extend_from_slice(p.value().values()));
            v
        };
        let r1 = run(&cfg, &sources, &target, 99).unwrap();
        let r2 = run(&cfg, &sources, &target, 99).unwrap();
        assert_eq!(collect(&r1), collect(&r2));
        assert_eq!(
            r1.final_output().final_metrics.per_class,
            r2.final_output().final_metrics.per_class
        );
        assert_eq!(r1.stage2.len(), 2);
    }
}
