//! Batch normalization and its domain-specific multi-branch extension.
//!
//! A [`BnState`] owns one branch of normalization state: the learned affine
//! parameters plus running statistics estimated by an exponential moving
//! average. A [`DsbnLayer`] keeps one independent branch per domain; every
//! forward touches exactly one branch, so the branches' trajectories are the
//! same as those of standalone layers fed per-domain streams.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Layer, Network, NormLayer};
use crate::param::{ParamAlloc, Parameter};
use crate::tensor::Tensor;

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (evaluation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One normalization branch: affine scale/shift plus running mean/variance.
#[derive(Debug)]
pub struct BnState {
    gamma: Parameter,
    beta: Parameter,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    eps: f64,
    momentum: f64,
}

impl BnState {
    /// Identity initialization: scale 1, shift 0, running mean 0, running
    /// variance 1.
    pub fn identity(channels: usize, eps: f64, momentum: f64, alloc: &mut ParamAlloc) -> Self {
        assert!(eps > 0.0, "eps must be positive");
        assert!(
            momentum > 0.0 && momentum <= 1.0,
            "momentum must be in (0, 1]"
        );
        BnState {
            gamma: Parameter::new(alloc, Tensor::full(&[channels], 1.0), true),
            beta: Parameter::new(alloc, Tensor::zeros(&[channels]), true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
            momentum,
        }
    }

    /// Copy of all state (affine parameters, running statistics, constants)
    /// under fresh parameter identities.
    pub fn duplicate(&self, alloc: &mut ParamAlloc) -> Self {
        BnState {
            gamma: self.gamma.duplicate(alloc),
            beta: self.beta.duplicate(alloc),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn gamma(&self) -> &Parameter {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut Parameter {
        &mut self.gamma
    }

    pub fn beta(&self) -> &Parameter {
        &self.beta
    }

    pub fn beta_mut(&mut self) -> &mut Parameter {
        &mut self.beta
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    /// Overwrites the running statistics (checkpoint restore).
    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.channels());
        assert_eq!(var.len(), self.channels());
        debug_assert!(var.iter().all(|&v| v >= 0.0));
        self.running_mean = mean;
        self.running_var = var;
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }
}

/// Batch statistics of one training forward, recorded for the running-stat
/// update.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode forward: whitens with batch statistics and applies the
/// affine transform. Returns the output and the batch statistics; the caller
/// decides when to fold them into the running estimates.
pub fn bn_forward_train(g: &mut Graph, x: Var, state: &BnState) -> Result<(Var, BatchStats)> {
    let gamma = g.param(state.gamma());
    let beta = g.param(state.beta());
    let result = g.bn_train(x, gamma, beta, state.eps())?;
    Ok((
        result.out,
        BatchStats {
            mean: result.batch_mean,
            var: result.batch_var,
        },
    ))
}

/// Exponential moving average update of the running statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn bn_update_running(state: &mut BnState, stats: &BatchStats) {
    let a = state.momentum;
    for (r, &b) in state.running_mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - a) * *r + a * b;
    }
    for (r, &b) in state.running_var.iter_mut().zip(&stats.var) {
        *r = (1.0 - a) * *r + a * b;
    }
}

/// Evaluation-mode forward: whitens with the running statistics. Pure in the
/// state and independent of batch composition.
pub fn bn_forward_eval(g: &mut Graph, x: Var, state: &BnState) -> Result<Var> {
    let gamma = g.param(state.gamma());
    let beta = g.param(state.beta());
    g.bn_eval(
        x,
        gamma,
        beta,
        state.running_mean(),
        state.running_var(),
        state.eps(),
    )
}

/// Normalization layer with one independent branch per domain. All branches
/// share the channel count; the branch set is fixed once construction ends.
#[derive(Debug)]
pub struct DsbnLayer {
    branches: BTreeMap<DomainId, BnState>,
    channels: usize,
}

impl DsbnLayer {
    pub fn new(channels: usize) -> Self {
        DsbnLayer {
            branches: BTreeMap::new(),
            channels,
        }
    }

    /// Layer whose branches are all copies of a donor state, one per domain.
    pub fn from_donor(
        donor: &BnState,
        domains: &[DomainId],
        alloc: &mut ParamAlloc,
    ) -> Result<Self> {
        let mut layer = DsbnLayer::new(donor.channels());
        for &d in domains {
            layer.add_domain_branch(d, donor.duplicate(alloc))?;
        }
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Registers a branch for a new domain. Construction-phase only.
    pub fn add_domain_branch(&mut self, d: DomainId, init: BnState) -> Result<()> {
        if init.channels() != self.channels {
            return Err(Error::ShapeMismatch {
                context: "add_domain_branch",
                left: vec![self.channels],
                right: vec![init.channels()],
            });
        }
        if self.branches.contains_key(&d) {
            return Err(Error::DuplicateDomain { domain: d });
        }
        self.branches.insert(d, init);
        Ok(())
    }

    pub fn branch(&self, d: DomainId) -> Result<&BnState> {
        self.branches
            .get(&d)
            .ok_or(Error::UnknownDomain { domain: d })
    }

    pub fn branch_mut(&mut self, d: DomainId) -> Result<&mut BnState> {
        self.branches
            .get_mut(&d)
            .ok_or(Error::UnknownDomain { domain: d })
    }

    pub fn domains(&self) -> impl Iterator<Item = DomainId> + '_ {
        self.branches.keys().copied()
    }

    pub fn branches(&self) -> impl Iterator<Item = (DomainId, &BnState)> {
        self.branches.iter().map(|(&d, s)| (d, s))
    }

    pub fn branches_mut(&mut self) -> impl Iterator<Item = (DomainId, &mut BnState)> {
        self.branches.iter_mut().map(|(&d, s)| (d, s))
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }
}

/// Forward through the branch of domain `d` only; every other branch's
/// parameters and statistics are untouched. The whole mini-batch must belong
/// to domain `d`.
pub fn dsbn_forward(
    g: &mut Graph,
    x: Var,
    d: DomainId,
    layer: &mut DsbnLayer,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let branch = layer.branch_mut(d)?;
            let (out, stats) = bn_forward_train(g, x, branch)?;
            bn_update_running(branch, &stats);
            Ok(out)
        }
        Mode::Eval => dsbn_forward_eval(g, x, d, layer),
    }
}

/// Evaluation-mode forward through branch `d` of an immutable layer.
pub fn dsbn_forward_eval(g: &mut Graph, x: Var, d: DomainId, layer: &DsbnLayer) -> Result<Var> {
    bn_forward_eval(g, x, layer.branch(d)?)
}

/// Replaces every plain batch-normalization layer of a network with a
/// domain-specific layer whose branches are copies of the original state.
/// All other parameters are left in place, so they stay shared across
/// domains, and the layer count and topology are preserved. Immediately
/// after conversion the network computes the same function for every domain.
pub fn convert_bn_to_dsbn(
    network: Network,
    domains: &[DomainId],
    alloc: &mut ParamAlloc,
) -> Result<Network> {
    let mut layers = Vec::new();
    for layer in network.into_layers() {
        layers.push(match layer {
            Layer::Norm(NormLayer::Batch(bn)) => Layer::Norm(NormLayer::DomainSpecific(
                DsbnLayer::from_donor(&bn, domains, alloc)?,
            )),
            other => other,
        });
    }
    Ok(Network::from_layers(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn state(channels: usize, alloc: &mut ParamAlloc) -> BnState {
        BnState::identity(channels, 1e-5, 0.1, alloc)
    }

    #[test]
    fn constant_batch_whitens_to_zero() {
        let mut alloc = ParamAlloc::new();
        let s = state(3, &mut alloc);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 3], 2.5));
        let (y, _) = bn_forward_train(&mut g, x, &s).unwrap();
        assert!(g.value(y).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitened_batch_passes_through_with_small_eps() {
        // Batch already has per-channel mean 0 and biased variance 1.
        let mut alloc = ParamAlloc::new();
        let s = BnState::identity(1, 1e-10, 0.1, &mut alloc);
        let v = 2.0f64.sqrt() / 2.0;
        let x0 = Tensor::new(&[2, 1], vec![v * 2.0, -v * 2.0]).unwrap();
        // mean 0, var = v^2*4 = 2 -> scale to variance 1:
        let x0 = Tensor::new(
            &[2, 1],
            x0.values().iter().map(|a| a / 2.0f64.sqrt()).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let (y, _) = bn_forward_train(&mut g, x, &s).unwrap();
        for (a, b) in g.value(y).values().iter().zip(x0.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn affine_matches_independent_whitening_oracle() {
        // Oracle: whiten with a separately coded routine, then apply 2*xhat+3.
        let mut alloc = ParamAlloc::new();
        let mut s = state(2, &mut alloc);
        s.gamma_mut().value_mut().values_mut().fill(2.0);
        s.beta_mut().value_mut().values_mut().fill(3.0);

        let data = vec![0.3, -1.0, 1.7, 0.4, -0.2, 2.2, 0.9, -0.5];
        let (n, c) = (4, 2);
        let mut oracle = data.clone();
        for j in 0..c {
            let col: Vec<f64> = (0..n).map(|i| data[i * c + j]).collect();
            let mean: f64 = col.iter().sum::<f64>() / n as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            for i in 0..n {
                let xhat = (data[i * c + j] - mean) / (var + 1e-5).sqrt();
                oracle[i * c + j] = 2.0 * xhat + 3.0;
            }
        }

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[n, c], data).unwrap());
        let (y, _) = bn_forward_train(&mut g, x, &s).unwrap();
        for (a, b) in g.value(y).values().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn train_mode_rejects_single_example_and_channel_mismatch() {
        let mut alloc = ParamAlloc::new();
        let s = state(3, &mut alloc);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            bn_forward_train(&mut g, x, &s),
            Err(Error::BatchTooSmall { n: 1 })
        ));
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            bn_forward_train(&mut g, x, &s),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn running_update_direct_substitution() {
        let mut alloc = ParamAlloc::new();
        let mut s = state(1, &mut alloc);
        bn_update_running(
            &mut s,
            &BatchStats {
                mean: vec![1.0],
                var: vec![1.0],
            },
        );
        assert!((s.running_mean()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_one_copies_batch_stats() {
        let mut alloc = ParamAlloc::new();
        let mut s = BnState::identity(2, 1e-5, 1.0, &mut alloc);
        let stats = BatchStats {
            mean: vec![3.0, -1.0],
            var: vec![0.5, 2.0],
        };
        bn_update_running(&mut s, &stats);
        assert_eq!(s.running_mean(), &[3.0, -1.0]);
        assert_eq!(s.running_var(), &[0.5, 2.0]);
    }

    #[test]
    fn ema_matches_closed_form_over_sequence() {
        // Closed form: (1-a)^t m0 + a * sum_i (1-a)^(t-1-i) mu_i.
        let a = 0.1;
        let t = 100;
        let mut alloc = ParamAlloc::new();
        let mut s = state(1, &mut alloc);
        let mus: Vec<f64> = (0..t).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        for &mu in &mus {
            bn_update_running(
                &mut s,
                &BatchStats {
                    mean: vec![mu],
                    var: vec![1.0],
                },
            );
        }
        let m0 = 0.0;
        let mut closed = (1.0f64 - a).powi(t as i32) * m0;
        for (i, &mu) in mus.iter().enumerate() {
            closed += a * (1.0 - a).powi((t - 1 - i) as i32) * mu;
        }
        assert!((s.running_mean()[0] - closed).abs() < 1e-12);
    }

    #[test]
    fn eval_identity_stats_pass_through() {
        let mut alloc = ParamAlloc::new();
        let s = BnState::identity(2, 1e-10, 0.1, &mut alloc);
        let x0 = Tensor::new(&[1, 2], vec![0.7, -0.3]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let y = bn_forward_eval(&mut g, x, &s).unwrap();
        for (a, b) in g.value(y).values().iter().zip(x0.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_output_is_batch_independent() {
        let mut alloc = ParamAlloc::new();
        let mut s = state(2, &mut alloc);
        s.set_running(vec![0.4, -0.6], vec![1.3, 0.2]);
        let lone = Tensor::new(&[1, 2], vec![0.9, 0.1]).unwrap();
        let batch =
            Tensor::new(&[3, 2], vec![5.0, -2.0, 0.9, 0.1, 3.3, 7.7]).unwrap();

        let mut g = Graph::new();
        let x = g.constant(lone);
        let y = bn_forward_eval(&mut g, x, &s).unwrap();
        let alone = g.value(y).row(0).to_vec();

        let mut g = Graph::new();
        let x = g.constant(batch);
        let y = bn_forward_eval(&mut g, x, &s).unwrap();
        let in_batch = g.value(y).row(1).to_vec();

        assert_eq!(alone, in_batch);
    }

    #[test]
    fn unknown_domain_fails_loudly() {
        let mut alloc = ParamAlloc::new();
        let donor = state(2, &mut alloc);
        let mut layer =
            DsbnLayer::from_donor(&donor, &[DomainId::Source(0)], &mut alloc).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            dsbn_forward(&mut g, x, DomainId::Target, &mut layer, Mode::Train),
            Err(Error::UnknownDomain { domain: DomainId::Target })
        ));
    }

    #[test]
    fn duplicate_branch_rejected() {
        let mut alloc = ParamAlloc::new();
        let donor = state(2, &mut alloc);
        let mut layer = DsbnLayer::new(2);
        layer
            .add_domain_branch(DomainId::Target, donor.duplicate(&mut alloc))
            .unwrap();
        assert!(matches!(
            layer.add_domain_branch(DomainId::Target, donor.duplicate(&mut alloc)),
            Err(Error::DuplicateDomain { .. })
        ));
    }

    #[test]
    fn multi_source_branches_register() {
        let mut alloc = ParamAlloc::new();
        let donor = state(4, &mut alloc);
        let layer = DsbnLayer::from_donor(
            &donor,
            &[DomainId::Source(0), DomainId::Source(1), DomainId::Target],
            &mut alloc,
        )
        .unwrap();
        assert_eq!(layer.branch_count(), 3);
    }

    #[test]
    fn branch_copies_donor_state() {
        let mut alloc = ParamAlloc::new();
        let mut donor = state(2, &mut alloc);
        donor.gamma_mut().value_mut().values_mut()[0] = 5.0;
        donor.set_running(vec![1.0, 2.0], vec![3.0, 4.0]);
        let layer = DsbnLayer::from_donor(&donor, &[DomainId::Target], &mut alloc).unwrap();
        let b = layer.branch(DomainId::Target).unwrap();
        assert_eq!(b.gamma().value().values()[0], 5.0);
        assert_eq!(b.running_mean(), &[1.0, 2.0]);
        assert_eq!(b.running_var(), &[3.0, 4.0]);
        // Fresh identity for the copy.
        assert_ne!(b.gamma().id(), donor.gamma().id());
    }

    #[test]
    fn target_forward_leaves_source_branch_untouched() {
        let mut alloc = ParamAlloc::new();
        let donor = state(2, &mut alloc);
        let mut layer = DsbnLayer::from_donor(
            &donor,
            &[DomainId::Source(0), DomainId::Target],
            &mut alloc,
        )
        .unwrap();
        let before: Vec<f64> = layer
            .branch(DomainId::Source(0))
            .unwrap()
            .running_mean()
            .to_vec();

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![5.0, 1.0, -3.0, 2.0]).unwrap());
        dsbn_forward(&mut g, x, DomainId::Target, &mut layer, Mode::Train).unwrap();

        let after = layer.branch(DomainId::Source(0)).unwrap().running_mean();
        assert_eq!(before.as_slice(), after);
    }
}
