//! Property tests for the loss layer and pseudo-label refinement.

use dsbn_core::domain::DomainId;
use dsbn_core::graph::Graph;
use dsbn_core::loss::{
    cpua_source_weights, mstn_total_loss, multi_source_total_loss, AlignContext, CentroidBank,
    ClassPrior, SourceTerm,
};
use dsbn_core::nn::{MlpArch, Network, NormKind};
use dsbn_core::norm::convert_bn_to_dsbn;
use dsbn_core::param::ParamAlloc;
use dsbn_core::pipeline::{refine_pseudo_label, PseudoLabelBank};
use dsbn_core::tensor::Tensor;
use dsbn_core::RunRng;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

proptest! {
    /// The refined label only depends on the argmax of the blend, so any
    /// positive rescaling of the score pair leaves it unchanged.
    #[test]
    fn refinement_invariant_to_positive_rescaling(
        s1 in proptest::collection::vec(0.001f64..1.0, 2..8),
        s2 in proptest::collection::vec(0.001f64..1.0, 2..8),
        lambda in 0.0f64..=1.0,
        factor in 0.01f64..100.0,
    ) {
        let n = s1.len().min(s2.len());
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let a = norm(&s1[..n]);
        let b = norm(&s2[..n]);
        let bank = PseudoLabelBank::from_scores(vec![a.clone()]);
        let base = refine_pseudo_label(&bank, &b, 0, lambda).unwrap();

        let scaled_bank = PseudoLabelBank::from_scores(
            vec![a.iter().map(|v| v * factor).collect()],
        );
        let scaled_b: Vec<f64> = b.iter().map(|v| v * factor).collect();
        let scaled = refine_pseudo_label(&scaled_bank, &scaled_b, 0, lambda).unwrap();
        prop_assert_eq!(base, scaled);
    }

    /// Weights satisfy w(y) * p(y) = max p (exactly for the majority class,
    /// to rounding for the rest) and the present-class minimum is 1.
    #[test]
    fn cpua_weight_identities(counts in proptest::collection::vec(1u64..500, 2..10)) {
        let prior = ClassPrior::from_counts(counts.clone());
        let max_p = (0..counts.len()).map(|c| prior.fraction(c))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut min_w = f64::INFINITY;
        for y in 0..counts.len() {
            let w = cpua_source_weights(&prior, y).unwrap();
            prop_assert!(w >= 1.0);
            min_w = min_w.min(w);
            let back = w * prior.fraction(y);
            prop_assert!((back - max_p).abs() <= 1e-14 * max_p);
        }
        prop_assert_eq!(min_w, 1.0);
    }
}

fn randn_tensor(rng: &mut RunRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect();
    Tensor::new(shape, values).unwrap()
}

struct Setup {
    net: Network,
    disc: Network,
    xs: Vec<Tensor>,
    xt: Tensor,
    labels: Vec<Vec<usize>>,
    pseudo: Vec<usize>,
    feat_dim: usize,
    classes: usize,
}

fn setup(n_sources: usize, seed: u64) -> Setup {
    let mut rng = RunRng::seed_from_u64(seed);
    let (classes, dim, ns, nt) = (3, 2, 8, 8);
    let mut alloc = ParamAlloc::new();
    let arch = MlpArch::new(dim, vec![6], classes, NormKind::Batch);
    let domains: Vec<DomainId> = (0..n_sources)
        .map(|i| DomainId::Source(i as u16))
        .chain([DomainId::Target])
        .collect();
    let net = convert_bn_to_dsbn(Network::mlp(&arch, &mut alloc, &mut rng), &domains, &mut alloc)
        .unwrap();
    let disc = Network::mlp(
        &MlpArch::new(arch.feature_dim(), vec![6], 1, NormKind::None),
        &mut alloc,
        &mut rng,
    );
    let xs = (0..n_sources)
        .map(|_| randn_tensor(&mut rng, &[ns, dim]))
        .collect();
    let xt = randn_tensor(&mut rng, &[nt, dim]);
    let labels = (0..n_sources)
        .map(|i| (0..ns).map(|j| (i + j) % classes).collect())
        .collect();
    let pseudo = (0..nt).map(|j| (j + 1) % classes).collect();
    Setup {
        net,
        disc,
        xs,
        xt,
        labels,
        pseudo,
        feat_dim: arch.feature_dim(),
        classes,
    }
}

/// Evaluates the multi-source objective with the sources presented in the
/// given order.
fn multi_source_value(s: &mut Setup, order: &[usize], lambda: f64) -> f64 {
    let mut g = Graph::new();
    let vt = g.constant(s.xt.clone());
    let t_out = s
        .net
        .forward_eval(&mut g, vt, Some(DomainId::Target))
        .unwrap();
    let mut terms = Vec::new();
    for &i in order {
        let v = g.constant(s.xs[i].clone());
        let out = s
            .net
            .forward_eval(&mut g, v, Some(DomainId::Source(i as u16)))
            .unwrap();
        terms.push(SourceTerm {
            output: out,
            labels: &s.labels[i],
            domain: DomainId::Source(i as u16),
        });
    }
    let mut banks: Vec<CentroidBank> = order
        .iter()
        .map(|_| CentroidBank::new(s.classes, s.feat_dim, 0.7))
        .collect();
    let align = AlignContext::Mstn {
        discriminator: &mut s.disc,
        banks: &mut banks,
        pseudo_labels_t: &s.pseudo,
    };
    let loss = multi_source_total_loss(&mut g, &terms, &t_out, align, lambda).unwrap();
    g.value(loss).item()
}

#[test]
fn multi_source_is_permutation_invariant() {
    let mut s = setup(3, 31);
    let forward = multi_source_value(&mut s, &[0, 1, 2], 0.8);
    let backward = multi_source_value(&mut s, &[2, 0, 1], 0.8);
    assert!((forward - backward).abs() <= 1e-12 * forward.abs().max(1.0));
}

#[test]
fn single_source_equals_source_list_of_one() {
    let mut s = setup(1, 32);
    // Direct single-source total loss.
    let mut g = Graph::new();
    let vt = g.constant(s.xt.clone());
    let t_out = s
        .net
        .forward_eval(&mut g, vt, Some(DomainId::Target))
        .unwrap();
    let v = g.constant(s.xs[0].clone());
    let s_out = s
        .net
        .forward_eval(&mut g, v, Some(DomainId::Source(0)))
        .unwrap();
    let mut bank = CentroidBank::new(s.classes, s.feat_dim, 0.7);
    let direct = mstn_total_loss(
        &mut g,
        &s_out,
        &s.labels[0],
        &t_out,
        &s.pseudo,
        &mut s.disc,
        &mut bank,
        0.8,
    )
    .unwrap();
    let direct = g.value(direct).item();
    let through_list = multi_source_value(&mut s, &[0], 0.8);
    assert_eq!(direct, through_list);
}

#[test]
fn total_losses_are_linear_in_lambda() {
    let mut s = setup(2, 33);
    let l0 = multi_source_value(&mut s, &[0, 1], 0.0);
    let l1 = multi_source_value(&mut s, &[0, 1], 1.0);
    let lh = multi_source_value(&mut s, &[0, 1], 0.5);
    assert!((lh - 0.5 * (l0 + l1)).abs() < 1e-12 * l1.abs().max(1.0));
}

#[test]
fn two_identical_sources_average_to_single_source_value() {
    let mut s = setup(2, 34);
    // Make the second source an exact copy of the first.
    s.xs[1] = s.xs[0].clone();
    s.labels[1] = s.labels[0].clone();
    let single = multi_source_value(&mut s, &[0], 0.6);
    let doubled = multi_source_value(&mut s, &[0, 0], 0.6);
    assert!((single - doubled).abs() < 1e-12 * single.abs().max(1.0));
}
