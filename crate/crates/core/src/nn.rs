//! Plain MLP networks: dense layers, ReLU, and optional normalization.
//!
//! A [`Network`] owns its parameters. Training-mode forwards mutate
//! normalization statistics and therefore take `&mut self`; evaluation-mode
//! forwards are pure.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::norm::{
    bn_forward_eval, bn_forward_train, bn_update_running, dsbn_forward, dsbn_forward_eval,
    BnState, DsbnLayer, Mode,
};
use crate::param::{ParamAlloc, Parameter};
use crate::tensor::Tensor;

/// Normalization flavor of a freshly constructed network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    DomainSpecific(Vec<DomainId>),
}

/// One layer of a [`Network`].
#[derive(Debug)]
pub enum Layer {
    Linear { weight: Parameter, bias: Parameter },
    Relu,
    Norm(NormLayer),
}

/// Normalization layer: a single shared branch or one branch per domain.
#[derive(Debug)]
pub enum NormLayer {
    Batch(BnState),
    DomainSpecific(DsbnLayer),
}

/// Features (input to the final dense layer) and logits of one forward pass.
pub struct NetOutput {
    pub features: Var,
    pub logits: Var,
}

/// Architecture of an MLP: `input -> [hidden, norm?, relu]* -> output`.
#[derive(Clone, Debug)]
pub struct MlpArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub norm: NormKind,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl MlpArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, norm: NormKind) -> Self {
        MlpArch {
            input_dim,
            hidden,
            output_dim,
            norm,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Width of the penultimate activation (the feature space).
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Builds an MLP with He-normal weight initialization and zero biases.
    pub fn mlp(arch: &MlpArch, alloc: &mut ParamAlloc, rng: &mut impl Rng) -> Network {
        let mut layers = Vec::new();
        let mut prev = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(linear(prev, h, alloc, rng));
            match &arch.norm {
                NormKind::None => {}
                NormKind::Batch => {
                    layers.push(Layer::Norm(NormLayer::Batch(BnState::identity(
                        h,
                        arch.bn_eps,
                        arch.bn_momentum,
                        alloc,
                    ))));
                }
                NormKind::DomainSpecific(domains) => {
                    let donor = BnState::identity(h, arch.bn_eps, arch.bn_momentum, alloc);
                    let layer = DsbnLayer::from_donor(&donor, domains, alloc)
                        .expect("domains are unique by construction");
                    layers.push(Layer::Norm(NormLayer::DomainSpecific(layer)));
                }
            }
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(linear(prev, arch.output_dim, alloc, rng));
        Network { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Network {
        Network { layers }
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Training-mode forward. Batch-normalization layers use batch
    /// statistics and fold them into their running estimates.
    pub fn forward_train(
        &mut self,
        g: &mut Graph,
        input: Var,
        domain: Option<DomainId>,
    ) -> Result<NetOutput> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = input;
        let mut features = input;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Linear { weight, bias } => {
                    if i == last {
                        features = h;
                    }
                    let w = g.param(weight);
                    let b = g.param(bias);
                    h = g.affine_transform(h, w, b)?;
                }
                Layer::Relu => h = g.relu(h),
                Layer::Norm(NormLayer::Batch(state)) => {
                    let (out, stats) = bn_forward_train(g, h, state)?;
                    bn_update_running(state, &stats);
                    h = out;
                }
                Layer::Norm(NormLayer::DomainSpecific(layer)) => {
                    let d = domain.ok_or(Error::DomainRequired)?;
                    h = dsbn_forward(g, h, d, layer, Mode::Train)?;
                }
            }
        }
        Ok(NetOutput {
            features,
            logits: h,
        })
    }

    /// Evaluation-mode forward. Pure: normalization uses running statistics
    /// and nothing is mutated.
    pub fn forward_eval(
        &self,
        g: &mut Graph,
        input: Var,
        domain: Option<DomainId>,
    ) -> Result<NetOutput> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = input;
        let mut features = input;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { weight, bias } => {
                    if i == last {
                        features = h;
                    }
                    let w = g.param(weight);
                    let b = g.param(bias);
                    h = g.affine_transform(h, w, b)?;
                }
                Layer::Relu => h = g.relu(h),
                Layer::Norm(NormLayer::Batch(state)) => h = bn_forward_eval(g, h, state)?,
                Layer::Norm(NormLayer::DomainSpecific(layer)) => {
                    let d = domain.ok_or(Error::DomainRequired)?;
                    h = dsbn_forward_eval(g, h, d, layer)?;
                }
            }
        }
        Ok(NetOutput {
            features,
            logits: h,
        })
    }

    /// Evaluation-mode forward on raw values, returning `(features, logits)`.
    pub fn infer(&self, x: &Tensor, domain: Option<DomainId>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = self.forward_eval(&mut g, v, domain)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        for layer in &self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    f(weight);
                    f(bias);
                }
                Layer::Relu => {}
                Layer::Norm(NormLayer::Batch(s)) => {
                    f(s.gamma());
                    f(s.beta());
                }
                Layer::Norm(NormLayer::DomainSpecific(l)) => {
                    for (_, s) in l.branches() {
                        f(s.gamma());
                        f(s.beta());
                    }
                }
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear { weight, bias } => {
                    f(weight);
                    f(bias);
                }
                Layer::Relu => {}
                Layer::Norm(NormLayer::Batch(s)) => {
                    f(s.gamma_mut());
                    f(s.beta_mut());
                }
                Layer::Norm(NormLayer::DomainSpecific(l)) => {
                    for (_, s) in l.branches_mut() {
                        f(s.gamma_mut());
                        f(s.beta_mut());
                    }
                }
            }
        }
    }

    /// Adds the gradients this graph computed for registered parameters into
    /// their accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph) {
        self.visit_params_mut(&mut |p| {
            if let Some(grad) = g.param_grad(p.id()) {
                p.accumulate_grad(grad);
            }
        });
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut Parameter::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// All parameter values concatenated in visit order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit_params(&mut |p| flat.extend_from_slice(p.value().values()));
        flat
    }

    /// All gradient accumulators concatenated in visit order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit_params(&mut |p| flat.extend_from_slice(p.grad().values()));
        flat
    }

    /// Overwrites every parameter from a flat buffer in visit order.
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.value().numel();
            p.value_mut()
                .values_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat buffer size mismatch");
    }

    /// Structural copy with fresh parameter identities (warm starts).
    pub fn duplicate(&self, alloc: &mut ParamAlloc) -> Network {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear { weight, bias } => Layer::Linear {
                    weight: weight.duplicate(alloc),
                    bias: bias.duplicate(alloc),
                },
                Layer::Relu => Layer::Relu,
                Layer::Norm(NormLayer::Batch(s)) => {
                    Layer::Norm(NormLayer::Batch(s.duplicate(alloc)))
                }
                Layer::Norm(NormLayer::DomainSpecific(l)) => {
                    let mut copy = DsbnLayer::new(l.channels());
                    for (d, s) in l.branches() {
                        copy.add_domain_branch(d, s.duplicate(alloc))
                            .expect("copying a valid layer");
                    }
                    Layer::Norm(NormLayer::DomainSpecific(copy))
                }
            })
            .collect();
        Network { layers }
    }
}

fn linear(fan_in: usize, fan_out: usize, alloc: &mut ParamAlloc, rng: &mut impl Rng) -> Layer {
    let std = math::sqrt(2.0 / fan_in as f64);
    let mut values = Vec::with_capacity(fan_in * fan_out);
    for _ in 0..fan_in * fan_out {
        let z: f64 = StandardNormal.sample(rng);
        values.push(z * std);
    }
    let weight = Tensor::new(&[fan_in, fan_out], values).expect("sized above");
    Layer::Linear {
        weight: Parameter::new(alloc, weight, true),
        bias: Parameter::new(alloc, Tensor::zeros(&[fan_out]), true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::convert_bn_to_dsbn;
    use crate::RunRng;
    use rand::SeedableRng;

    fn arch(norm: NormKind) -> MlpArch {
        MlpArch::new(2, alloc::vec![8, 8], 3, norm)
    }

    fn random_batch(rng: &mut RunRng, n: usize, d: usize) -> Tensor {
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let z: f64 = StandardNormal.sample(rng);
            values.push(z);
        }
        Tensor::new(&[n, d], values).unwrap()
    }

    #[test]
    fn conversion_preserves_forward_for_every_domain() {
        let mut alloc = ParamAlloc::new();
        let mut rng = RunRng::seed_from_u64(11);
        let net = Network::mlp(&arch(NormKind::Batch), &mut alloc, &mut rng);
        let x = random_batch(&mut rng, 5, 2);

        let (_, before) = net.infer(&x, None).unwrap();
        let domains = [DomainId::Source(0), DomainId::Source(1), DomainId::Target];
        let converted = convert_bn_to_dsbn(net, &domains, &mut alloc).unwrap();
        for d in domains {
            let (_, after) = converted.infer(&x, Some(d)).unwrap();
            for (a, b) in after.values().iter().zip(before.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conversion_without_bn_layers_is_identity() {
        let mut alloc = ParamAlloc::new();
        let mut rng = RunRng::seed_from_u64(3);
        let net = Network::mlp(&arch(NormKind::None), &mut alloc, &mut rng);
        let n_params = net.param_count();
        let x = random_batch(&mut rng, 4, 2);
        let (_, before) = net.infer(&x, None).unwrap();
        let converted = convert_bn_to_dsbn(net, &[DomainId::Target], &mut alloc).unwrap();
        assert_eq!(converted.param_count(), n_params);
        let (_, after) = converted.infer(&x, None).unwrap();
        assert_eq!(before.values(), after.values());
    }

    #[test]
    fn conversion_duplicates_only_norm_parameters() {
        let mut alloc = ParamAlloc::new();
        let mut rng = RunRng::seed_from_u64(5);
        let net = Network::mlp(&arch(NormKind::Batch), &mut alloc, &mut rng);
        // 3 linear layers (w+b) + 2 bn layers (gamma+beta).
        assert_eq!(net.param_count(), 10);
        let bn_layers = 2;
        let converted =
            convert_bn_to_dsbn(net, &[DomainId::Source(0), DomainId::Target], &mut alloc).unwrap();
        // Non-norm parameter count unchanged; each bn layer now carries two
        // branches.
        assert_eq!(converted.param_count(), 6 + 2 * 2 * bn_layers);
        assert_eq!(converted.layers().len(), 3 + bn_layers + 2);
    }

    #[test]
    fn eval_forward_does_not_mutate_running_stats() {
        let mut alloc = ParamAlloc::new();
        let mut rng = RunRng::seed_from_u64(7);
        let mut net = Network::mlp(&arch(NormKind::Batch), &mut alloc, &mut rng);
        let x = random_batch(&mut rng, 6, 2);

        // Drive the stats away from identity first.
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        net.forward_train(&mut g, v, None).unwrap();

        let stats_of = |net: &Network| -> Vec<f64> {
            let mut out = Vec::new();
            for layer in net.layers() {
                if let Layer::Norm(NormLayer::Batch(s)) = layer {
                    out.extend_from_slice(s.running_mean());
                    out.extend_from_slice(s.running_var());
                }
            }
            out
        };
        let before = stats_of(&net);
        net.infer(&x, None).unwrap();
        assert_eq!(before, stats_of(&net));
    }

    #[test]
    fn domain_required_for_dsbn_networks() {
        let mut alloc = ParamAlloc::new();
        let mut rng = RunRng::seed_from_u64(9);
        let net = Network::mlp(
            &arch(NormKind::DomainSpecific(alloc::vec![DomainId::Target])),
            &mut alloc,
            &mut rng,
        );
        let x = random_batch(&mut rng, 4, 2);
        assert!(matches!(net.infer(&x, None), Err(Error::DomainRequired)));
        assert!(net.infer(&x, Some(DomainId::Target)).is_ok());
    }
}
