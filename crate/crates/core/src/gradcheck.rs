//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the supplied closure, so it stays independent
//! of the backward pass it is used to verify.

use alloc::vec::Vec;

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-5;

/// Central finite differences of a scalar function at `at`.
pub fn central_diff<F>(mut f: F, at: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point);
        point[i] = orig - step;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Largest relative error between an analytic and a numeric gradient,
/// normalized by `max(1, |a|, |n|)` per component.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0_f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

pub mod suite {
    //! Finite-difference verification of every differentiable operation and
    //! every training objective, on randomized small instances.
    //!
    //! Each case builds an instance, computes analytic gradients through the
    //! graph, and compares them against central differences of a forward-only
    //! closure. Instances whose perturbation step could cross a ReLU kink are
    //! rejected and redrawn. Gradient-reversal paths are checked against the
    //! sign-flipped objective they are defined to optimize.

    use alloc::vec;
    use alloc::vec::Vec;

    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    use super::{central_diff, max_rel_err, DEFAULT_STEP};
    use crate::derive_seed;
    use crate::domain::DomainId;
    use crate::graph::Graph;
    use crate::loss::{
        domain_adversarial_loss, multi_source_total_loss, semantic_matching_loss,
        AlignContext, CentroidBank, ClassPrior, SourceTerm,
    };
    use crate::nn::{MlpArch, Network, NormKind};
    use crate::norm::convert_bn_to_dsbn;
    use crate::param::ParamAlloc;
    use crate::tensor::Tensor;
    use crate::RunRng;

    /// Outcome of one case over all its instances.
    #[derive(Clone, Debug)]
    pub struct CaseReport {
        pub name: &'static str,
        pub instances: usize,
        pub max_rel_err: f64,
    }

    /// Runs every case with `instances` randomized instances each.
    pub fn run_all(seed: u64, instances: usize) -> Vec<CaseReport> {
        let cases: Vec<(&'static str, fn(u64, usize) -> f64)> = vec![
            ("sum_squares", case_sum_squares),
            ("scale_add_sub", case_scale_add_sub),
            ("select_mean", case_select_mean),
            ("affine_transform", case_affine),
            ("relu", case_relu),
            ("softmax", case_softmax),
            ("grad_reverse", case_grad_reverse),
            ("softmax_cross_entropy", case_xent),
            ("softmax_cross_entropy_weighted", case_xent_weighted),
            ("sigmoid_bce", case_bce),
            ("sigmoid_bce_weighted", case_bce_weighted),
            ("bn_train", case_bn_train),
            ("bn_eval", case_bn_eval),
            ("semantic_matching_loss", case_semantic_matching),
            ("domain_adversarial_loss", case_domain_adversarial),
            ("mstn_total_loss", case_mstn_total),
            ("cpua_total_loss", case_cpua_total),
            ("multi_source_total_loss", case_multi_source),
            ("stage2_classification_loss", case_stage2_loss),
        ];
        cases
            .into_iter()
            .enumerate()
            .map(|(i, (name, f))| CaseReport {
                name,
                instances,
                max_rel_err: f(derive_seed(seed, i as u64), instances),
            })
            .collect()
    }

    fn randn(rng: &mut RunRng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect()
    }

    fn randn_tensor(rng: &mut RunRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, randn(rng, n)).expect("sized")
    }

    fn rand_labels(rng: &mut RunRng, n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..classes)).collect()
    }

    fn check(
        base: &[f64],
        analytic: &[f64],
        mut eval: impl FnMut(&[f64]) -> f64,
    ) -> f64 {
        let numeric = central_diff(&mut eval, base, DEFAULT_STEP);
        max_rel_err(analytic, &numeric)
    }

    fn case_sum_squares(seed: u64, instances: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, 7);
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(&base));
            let loss = g.sum_squares(x);
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let x = g.constant(Tensor::vector(flat));
                let loss = g.sum_squares(x);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_scale_add_sub(seed: u64, instances: usize) -> f64 {
        let n = 5;
        let build = |g: &mut Graph, flat: &[f64]| {
            let a = g.constant(Tensor::vector(&flat[..n]));
            let b = g.constant(Tensor::vector(&flat[n..2 * n]));
            let c = g.constant(Tensor::vector(&flat[2 * n..]));
            let s = g.add(a, b).unwrap();
            let s = g.sub(s, c).unwrap();
            let s = g.scale(s, 1.7);
            (g.sum_squares(s), [a, b, c])
        };
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, 3 * n);
            let mut g = Graph::new();
            let (loss, parts) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for p in parts {
                analytic.extend_from_slice(g.grad(p).unwrap().values());
            }
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_select_mean(seed: u64, instances: usize) -> f64 {
        let (n, m) = (6, 4);
        let rows = [0usize, 2, 5, 2];
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, n * m);
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[n, m], flat.to_vec()).unwrap());
                let mean = g.select_mean(x, &rows).unwrap();
                (g.sum_squares(mean), x)
            };
            let mut g = Graph::new();
            let (loss, x) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_affine(seed: u64, instances: usize) -> f64 {
        let (n, k, m) = (4, 3, 2);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, n * k + k * m + m);
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[n, k], flat[..n * k].to_vec()).unwrap());
                let w = g.constant(
                    Tensor::new(&[k, m], flat[n * k..n * k + k * m].to_vec()).unwrap(),
                );
                let b = g.constant(Tensor::vector(&flat[n * k + k * m..]));
                let y = g.affine_transform(x, w, b).unwrap();
                (g.sum_squares(y), [x, w, b])
            };
            let mut g = Graph::new();
            let (loss, parts) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for p in parts {
                analytic.extend_from_slice(g.grad(p).unwrap().values());
            }
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_relu(seed: u64, instances: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            // Keep inputs away from the kink.
            let base: Vec<f64> = randn(&mut rng, 20)
                .into_iter()
                .map(|v| v + 0.3 * v.signum())
                .collect();
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[4, 5], flat.to_vec()).unwrap());
                let y = g.relu(x);
                (g.sum_squares(y), x)
            };
            let mut g = Graph::new();
            let (loss, x) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_softmax(seed: u64, instances: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, 12);
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[4, 3], flat.to_vec()).unwrap());
                let p = g.softmax(x).unwrap();
                (g.sum_squares(p), x)
            };
            let mut g = Graph::new();
            let (loss, x) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    /// Gradient reversal is not the derivative of its forward map; its
    /// backward must equal `-scale` times the plain gradient.
    fn case_grad_reverse(seed: u64, instances: usize) -> f64 {
        let scale = 0.7;
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, 12);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[3, 4], base.clone()).unwrap());
            let r = g.grad_reverse(x, scale);
            let loss = g.sum_squares(r);
            g.backward(loss).unwrap();
            let analytic = g.grad(x).unwrap().values().to_vec();
            let numeric = central_diff(
                |flat: &[f64]| {
                    let mut g = Graph::new();
                    let x = g.constant(Tensor::new(&[3, 4], flat.to_vec()).unwrap());
                    let r = g.grad_reverse(x, scale);
                    let loss = g.sum_squares(r);
                    g.value(loss).item()
                },
                &base,
                DEFAULT_STEP,
            );
            let reference: Vec<f64> = numeric.iter().map(|v| -scale * v).collect();
            worst = worst.max(max_rel_err(&analytic, &reference));
        }
        worst
    }

    fn case_xent(seed: u64, instances: usize) -> f64 {
        xent_impl(seed, instances, false)
    }

    fn case_xent_weighted(seed: u64, instances: usize) -> f64 {
        xent_impl(seed, instances, true)
    }

    fn xent_impl(seed: u64, instances: usize, weighted: bool) -> f64 {
        let (n, c) = (5, 4);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, n * c);
            let labels = rand_labels(&mut rng, n, c);
            let weights: Vec<f64> = randn(&mut rng, n).iter().map(|v| v.abs() + 0.3).collect();
            let build = |g: &mut Graph, flat: &[f64]| {
                let z = g.constant(Tensor::new(&[n, c], flat.to_vec()).unwrap());
                let loss = if weighted {
                    g.softmax_cross_entropy_weighted(z, &labels, &weights).unwrap()
                } else {
                    g.softmax_cross_entropy(z, &labels).unwrap()
                };
                (loss, z)
            };
            let mut g = Graph::new();
            let (loss, z) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let analytic = g.grad(z).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_bce(seed: u64, instances: usize) -> f64 {
        bce_impl(seed, instances, false)
    }

    fn case_bce_weighted(seed: u64, instances: usize) -> f64 {
        bce_impl(seed, instances, true)
    }

    fn bce_impl(seed: u64, instances: usize, weighted: bool) -> f64 {
        let n = 6;
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, n);
            let targets: Vec<bool> = (0..n).map(|_| rng.random_range(0..2) == 1).collect();
            let weights: Vec<f64> = randn(&mut rng, n).iter().map(|v| v.abs() + 0.3).collect();
            let build = |g: &mut Graph, flat: &[f64]| {
                let s = g.constant(Tensor::vector(flat));
                let loss = if weighted {
                    g.sigmoid_bce_weighted(s, &targets, &weights).unwrap()
                } else {
                    g.sigmoid_bce(s, &targets).unwrap()
                };
                (loss, s)
            };
            let mut g = Graph::new();
            let (loss, s) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let analytic = g.grad(s).unwrap().values().to_vec();
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_bn_train(seed: u64, instances: usize) -> f64 {
        let (n, c) = (5, 3);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let mut base = randn(&mut rng, n * c + 2 * c);
            for v in base[n * c..n * c + c].iter_mut() {
                *v = 1.0 + 0.5 * *v; // gamma around 1
            }
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[n, c], flat[..n * c].to_vec()).unwrap());
                let gamma = g.constant(Tensor::vector(&flat[n * c..n * c + c]));
                let beta = g.constant(Tensor::vector(&flat[n * c + c..]));
                let out = g.bn_train(x, gamma, beta, eps).unwrap();
                (g.sum_squares(out.out), [x, gamma, beta])
            };
            let mut g = Graph::new();
            let (loss, parts) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for p in parts {
                analytic.extend_from_slice(g.grad(p).unwrap().values());
            }
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_bn_eval(seed: u64, instances: usize) -> f64 {
        let (n, c) = (4, 3);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, n * c + 2 * c);
            let mean = randn(&mut rng, c);
            let var: Vec<f64> = randn(&mut rng, c).iter().map(|v| v.abs() + 0.3).collect();
            let build = |g: &mut Graph, flat: &[f64]| {
                let x = g.constant(Tensor::new(&[n, c], flat[..n * c].to_vec()).unwrap());
                let gamma = g.constant(Tensor::vector(&flat[n * c..n * c + c]));
                let beta = g.constant(Tensor::vector(&flat[n * c + c..]));
                let out = g.bn_eval(x, gamma, beta, &mean, &var, eps).unwrap();
                (g.sum_squares(out), [x, gamma, beta])
            };
            let mut g = Graph::new();
            let (loss, parts) = build(&mut g, &base);
            g.backward(loss).unwrap();
            let mut analytic = Vec::new();
            for p in parts {
                analytic.extend_from_slice(g.grad(p).unwrap().values());
            }
            worst = worst.max(check(&base, &analytic, |flat| {
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, flat);
                g.value(loss).item()
            }));
        }
        worst
    }

    fn case_semantic_matching(seed: u64, instances: usize) -> f64 {
        let (ns, nt, dim, classes) = (6, 5, 4, 3);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let base = randn(&mut rng, (ns + nt) * dim);
            let labels_s = rand_labels(&mut rng, ns, classes);
            let labels_t = rand_labels(&mut rng, nt, classes);
            let bank0 = CentroidBank::from_centroids(
                (0..classes).map(|_| randn(&mut rng, dim)).collect(),
                (0..classes).map(|_| randn(&mut rng, dim)).collect(),
                0.7,
            );
            let mut eval = |flat: &[f64]| {
                let mut bank = bank0.clone();
                let mut g = Graph::new();
                let fs = g.constant(Tensor::new(&[ns, dim], flat[..ns * dim].to_vec()).unwrap());
                let ft = g.constant(Tensor::new(&[nt, dim], flat[ns * dim..].to_vec()).unwrap());
                let loss =
                    semantic_matching_loss(&mut g, fs, &labels_s, ft, &labels_t, &mut bank)
                        .unwrap();
                g.value(loss).item()
            };
            let mut bank = bank0.clone();
            let mut g = Graph::new();
            let fs = g.constant(Tensor::new(&[ns, dim], base[..ns * dim].to_vec()).unwrap());
            let ft = g.constant(Tensor::new(&[nt, dim], base[ns * dim..].to_vec()).unwrap());
            let loss =
                semantic_matching_loss(&mut g, fs, &labels_s, ft, &labels_t, &mut bank).unwrap();
            g.backward(loss).unwrap();
            let mut analytic = g.grad(fs).unwrap().values().to_vec();
            analytic.extend_from_slice(g.grad(ft).unwrap().values());
            worst = worst.max(check(&base, &analytic, &mut eval));
        }
        worst
    }

    fn discriminator(input: usize, alloc: &mut ParamAlloc, rng: &mut RunRng) -> Network {
        Network::mlp(&MlpArch::new(input, vec![6], 1, NormKind::None), alloc, rng)
    }

    /// Features sit below the reversal, so their reference is the finite
    /// difference of the negated objective; discriminator parameters sit
    /// above it and follow the plain objective.
    fn case_domain_adversarial(seed: u64, instances: usize) -> f64 {
        let (ns, nt, dim) = (4, 5, 3);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let mut disc;
            let (fs0, ft0);
            let (analytic_feat, analytic_disc);
            loop {
                let mut a = ParamAlloc::new();
                let mut d = discriminator(dim, &mut a, &mut rng);
                let fs = randn_tensor(&mut rng, &[ns, dim]);
                let ft = randn_tensor(&mut rng, &[nt, dim]);
                let mut g = Graph::new();
                let vs = g.constant(fs.clone());
                let vt = g.constant(ft.clone());
                let loss = domain_adversarial_loss(&mut g, vs, vt, &mut d, 1.0).unwrap();
                if g.min_abs_relu_input() < 1e-4 {
                    continue;
                }
                g.backward(loss).unwrap();
                d.accumulate_grads(&g);
                let mut feat = g.grad(vs).unwrap().values().to_vec();
                feat.extend_from_slice(g.grad(vt).unwrap().values());
                analytic_feat = feat;
                analytic_disc = d.flat_grads();
                disc = d;
                fs0 = fs;
                ft0 = ft;
                break;
            }
            let disc_base = disc.flat_params();
            let mut feat_base = fs0.values().to_vec();
            feat_base.extend_from_slice(ft0.values());

            // Below the reversal: features against the negated loss.
            let err_feat = check(&feat_base, &analytic_feat, |flat| {
                let mut g = Graph::new();
                let vs =
                    g.constant(Tensor::new(&[ns, dim], flat[..ns * dim].to_vec()).unwrap());
                let vt = g.constant(Tensor::new(&[nt, dim], flat[ns * dim..].to_vec()).unwrap());
                let loss = domain_adversarial_loss(&mut g, vs, vt, &mut disc, 1.0).unwrap();
                -g.value(loss).item()
            });
            // Above the reversal: discriminator against the plain loss.
            let err_disc = check(&disc_base, &analytic_disc, |flat| {
                disc.set_flat_params(flat);
                let mut g = Graph::new();
                let vs = g.constant(fs0.clone());
                let vt = g.constant(ft0.clone());
                let loss = domain_adversarial_loss(&mut g, vs, vt, &mut disc, 1.0).unwrap();
                g.value(loss).item()
            });
            disc.set_flat_params(&disc_base);
            worst = worst.max(err_feat).max(err_disc);
        }
        worst
    }

    struct AdaptInstance {
        net: Network,
        disc: Network,
        xs: Vec<Tensor>,
        xt: Tensor,
        labels_s: Vec<Vec<usize>>,
        pseudo_t: Vec<usize>,
        banks: Vec<CentroidBank>,
        analytic_net: Vec<f64>,
        analytic_disc: Vec<f64>,
    }

    /// Builds a full adaptation instance (DSBN classifier, discriminator,
    /// batches) and runs one analytic backward of the requested objective.
    #[allow(clippy::too_many_arguments)]
    fn build_adapt_instance(
        rng: &mut RunRng,
        n_sources: usize,
        classes: usize,
        dim: usize,
        lambda: f64,
        cpua: bool,
    ) -> AdaptInstance {
        let (ns, nt) = (6, 5);
        let hidden = vec![5, 4];
        loop {
            let mut alloc = ParamAlloc::new();
            let arch = MlpArch::new(dim, hidden.clone(), classes, NormKind::Batch);
            let base = Network::mlp(&arch, &mut alloc, rng);
            let domains: Vec<DomainId> = (0..n_sources)
                .map(|i| DomainId::Source(i as u16))
                .chain([DomainId::Target])
                .collect();
            let mut net = convert_bn_to_dsbn(base, &domains, &mut alloc).unwrap();
            let disc_in = if cpua { classes } else { arch.feature_dim() };
            let mut disc = discriminator(disc_in, &mut alloc, rng);

            let xs: Vec<Tensor> = (0..n_sources)
                .map(|_| randn_tensor(rng, &[ns, dim]))
                .collect();
            let xt = randn_tensor(rng, &[nt, dim]);
            let labels_s: Vec<Vec<usize>> = (0..n_sources)
                .map(|_| rand_labels(rng, ns, classes))
                .collect();
            let pseudo_t = rand_labels(rng, nt, classes);
            let mut banks: Vec<CentroidBank> = (0..n_sources)
                .map(|_| CentroidBank::new(classes, arch.feature_dim(), 0.7))
                .collect();

            let mut g = Graph::new();
            let mut terms = Vec::new();
            for (i, x) in xs.iter().enumerate() {
                let v = g.constant(x.clone());
                let out = net
                    .forward_train(&mut g, v, Some(DomainId::Source(i as u16)))
                    .unwrap();
                terms.push(SourceTerm {
                    output: out,
                    labels: &labels_s[i],
                    domain: DomainId::Source(i as u16),
                });
            }
            let vt = g.constant(xt.clone());
            let t_out = net
                .forward_train(&mut g, vt, Some(DomainId::Target))
                .unwrap();
            let source_priors: Vec<ClassPrior> = labels_s
                .iter()
                .map(|l| ClassPrior::from_labels(l, classes))
                .collect();
            let target_prior = ClassPrior::from_labels(&pseudo_t, classes);
            let align = if cpua {
                AlignContext::Cpua {
                    discriminator: &mut disc,
                    source_priors: &source_priors,
                    target_prior: &target_prior,
                    pseudo_labels_t: &pseudo_t,
                }
            } else {
                AlignContext::Mstn {
                    discriminator: &mut disc,
                    banks: &mut banks,
                    pseudo_labels_t: &pseudo_t,
                }
            };
            let loss = multi_source_total_loss(&mut g, &terms, &t_out, align, lambda).unwrap();
            if g.min_abs_relu_input() < 1e-4 {
                continue;
            }
            // CPUA weights need every pseudo-class populated.
            if cpua && ClassPrior::from_labels(&pseudo_t, classes).counts().iter().any(|&c| c == 0)
            {
                continue;
            }
            g.backward(loss).unwrap();
            net.accumulate_grads(&g);
            disc.accumulate_grads(&g);
            // Reset the banks touched by the analytic pass.
            let banks: Vec<CentroidBank> = (0..n_sources)
                .map(|_| CentroidBank::new(classes, arch.feature_dim(), 0.7))
                .collect();
            let analytic_net = net.flat_grads();
            let analytic_disc = disc.flat_grads();
            return AdaptInstance {
                net,
                disc,
                xs,
                xt,
                labels_s,
                pseudo_t,
                banks,
                analytic_net,
                analytic_disc,
            };
        }
    }

    /// Forward-only value of the adaptation objective with the adversarial
    /// term entering with the given sign.
    fn adapt_value(inst: &mut AdaptInstance, lambda: f64, cpua: bool, da_sign: f64) -> f64 {
        let n_sources = inst.xs.len();
        let mut banks: Vec<CentroidBank> = inst.banks.to_vec();
        let mut g = Graph::new();
        let mut total = 0.0;
        let vt = g.constant(inst.xt.clone());
        let t_out = inst
            .net
            .forward_train(&mut g, vt, Some(DomainId::Target))
            .unwrap();
        for i in 0..n_sources {
            let v = g.constant(inst.xs[i].clone());
            let s_out = inst
                .net
                .forward_train(&mut g, v, Some(DomainId::Source(i as u16)))
                .unwrap();
            let (cls, da, align_extra) = if cpua {
                let prior = ClassPrior::from_labels(&inst.labels_s[i], inst.net_classes());
                let t_prior = ClassPrior::from_labels(&inst.pseudo_t, inst.net_classes());
                let w_s: Vec<f64> = inst.labels_s[i]
                    .iter()
                    .map(|&y| crate::loss::cpua_source_weights(&prior, y).unwrap())
                    .collect();
                let w_t: Vec<f64> = inst
                    .pseudo_t
                    .iter()
                    .map(|&y| crate::loss::cpua_target_weights(&t_prior, y).unwrap())
                    .collect();
                let cls = g
                    .softmax_cross_entropy_weighted(s_out.logits, &inst.labels_s[i], &w_s)
                    .unwrap();
                let ps = g.softmax(s_out.logits).unwrap();
                let pt = g.softmax(t_out.logits).unwrap();
                let rs = g.grad_reverse(ps, 1.0);
                let rt = g.grad_reverse(pt, 1.0);
                let ds = inst.disc.forward_train(&mut g, rs, None).unwrap();
                let dt = inst.disc.forward_train(&mut g, rt, None).unwrap();
                let ls = g
                    .sigmoid_bce_weighted(ds.logits, &vec![true; w_s.len()], &w_s)
                    .unwrap();
                let lt = g
                    .sigmoid_bce_weighted(dt.logits, &vec![false; w_t.len()], &w_t)
                    .unwrap();
                let da = g.value(ls).item() + g.value(lt).item();
                (g.value(cls).item(), da, 0.0)
            } else {
                let cls = g
                    .softmax_cross_entropy(s_out.logits, &inst.labels_s[i])
                    .unwrap();
                let da = domain_adversarial_loss(
                    &mut g,
                    s_out.features,
                    t_out.features,
                    &mut inst.disc,
                    1.0,
                )
                .unwrap();
                let sm = semantic_matching_loss(
                    &mut g,
                    s_out.features,
                    &inst.labels_s[i],
                    t_out.features,
                    &inst.pseudo_t,
                    &mut banks[i],
                )
                .unwrap();
                (g.value(cls).item(), g.value(da).item(), g.value(sm).item())
            };
            total += cls + lambda * (da_sign * da + align_extra);
        }
        total / n_sources as f64
    }

    impl AdaptInstance {
        fn net_classes(&self) -> usize {
            self.banks.first().map_or(3, CentroidBank::classes)
        }
    }

    fn adapt_case(seed: u64, instances: usize, n_sources: usize, cpua: bool) -> f64 {
        let lambda = 0.7;
        let (classes, dim) = (3, 3);
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            let mut inst = build_adapt_instance(&mut rng, n_sources, classes, dim, lambda, cpua);
            let net_base = inst.net.flat_params();
            let disc_base = inst.disc.flat_params();
            let analytic_net = inst.analytic_net.clone();
            let analytic_disc = inst.analytic_disc.clone();

            // Classifier parameters sit below the reversal.
            let err_net = check(&net_base, &analytic_net, |flat| {
                inst.net.set_flat_params(flat);
                adapt_value(&mut inst, lambda, cpua, -1.0)
            });
            inst.net.set_flat_params(&net_base);
            // Discriminator parameters sit above it.
            let err_disc = check(&disc_base, &analytic_disc, |flat| {
                inst.disc.set_flat_params(flat);
                adapt_value(&mut inst, lambda, cpua, 1.0)
            });
            inst.disc.set_flat_params(&disc_base);
            worst = worst.max(err_net).max(err_disc);
        }
        worst
    }

    fn case_mstn_total(seed: u64, instances: usize) -> f64 {
        adapt_case(seed, instances, 1, false)
    }

    fn case_cpua_total(seed: u64, instances: usize) -> f64 {
        adapt_case(seed, instances, 1, true)
    }

    fn case_multi_source(seed: u64, instances: usize) -> f64 {
        adapt_case(seed, instances, 2, false)
    }

    /// Stage-2 objective: mean source cross-entropy plus pseudo-labeled
    /// target cross-entropy. No reversal, so a plain finite-difference check
    /// over all network parameters applies.
    fn case_stage2_loss(seed: u64, instances: usize) -> f64 {
        let (ns, nt, dim, classes) = (6, 5, 3, 3);
        let hidden = vec![5, 4];
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = RunRng::seed_from_u64(derive_seed(seed, i as u64));
            loop {
                let mut alloc = ParamAlloc::new();
                let arch = MlpArch::new(dim, hidden.clone(), classes, NormKind::Batch);
                let base = Network::mlp(&arch, &mut alloc, &mut rng);
                let domains = [DomainId::Source(0), DomainId::Target];
                let mut net = convert_bn_to_dsbn(base, &domains, &mut alloc).unwrap();
                let xs = randn_tensor(&mut rng, &[ns, dim]);
                let xt = randn_tensor(&mut rng, &[nt, dim]);
                let labels_s = rand_labels(&mut rng, ns, classes);
                let pseudo_t = rand_labels(&mut rng, nt, classes);

                let eval = |net: &mut Network, g: &mut Graph| {
                    let vs = g.constant(xs.clone());
                    let s_out = net.forward_train(g, vs, Some(DomainId::Source(0))).unwrap();
                    let ce_s = g.softmax_cross_entropy(s_out.logits, &labels_s).unwrap();
                    let vt = g.constant(xt.clone());
                    let t_out = net.forward_train(g, vt, Some(DomainId::Target)).unwrap();
                    let ce_t = g.softmax_cross_entropy(t_out.logits, &pseudo_t).unwrap();
                    g.add(ce_s, ce_t).unwrap()
                };
                let mut g = Graph::new();
                let loss = eval(&mut net, &mut g);
                if g.min_abs_relu_input() < 1e-4 {
                    continue;
                }
                g.backward(loss).unwrap();
                net.accumulate_grads(&g);
                let analytic = net.flat_grads();
                let base_params = net.flat_params();
                let err = check(&base_params, &analytic, |flat| {
                    net.set_flat_params(flat);
                    let mut g = Graph::new();
                    let loss = eval(&mut net, &mut g);
                    g.value(loss).item()
                });
                worst = worst.max(err);
                break;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum x_i^2, grad = 2x.
        let at = [0.5, -1.25, 3.0];
        let numeric = central_diff(|x| x.iter().map(|v| v * v).sum(), &at, DEFAULT_STEP);
        let analytic: alloc::vec::Vec<f64> = at.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_err(&analytic, &numeric) < DEFAULT_TOL);
    }
}
