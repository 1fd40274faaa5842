//! Synthetic domain-shift datasets, per-domain batching, and the
//! transductive evaluation protocol.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::domain::DomainId;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Network;
use crate::tensor::Tensor;
use crate::RunRng;

/// Feature matrix plus labels for one domain.
///
/// Labels are stored for every domain but quarantined: training code can
/// only reach them through [`LabeledDataset::supervision`], which yields
/// `None` for the target domain. Evaluation goes through
/// [`LabeledDataset::eval_labels`].
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    domain: DomainId,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        domain: DomainId,
        class_count: usize,
    ) -> Result<Self> {
        let (n, _) = features.dims2("dataset features")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                context: "dataset labels",
                left: vec![n],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            features,
            labels,
            domain,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Training labels; `None` for the target domain, whose labels are held
    /// out for evaluation only.
    pub fn supervision(&self) -> Option<&[usize]> {
        self.domain.is_source().then_some(self.labels.as_slice())
    }

    /// Ground-truth labels for the evaluation protocol.
    pub fn eval_labels(&self) -> &[usize] {
        &self.labels
    }

    /// Re-tags the dataset with a different domain id.
    pub fn with_domain(mut self, domain: DomainId) -> Self {
        self.domain = domain;
        self
    }

    /// Copies the selected examples into a batch.
    pub fn batch(&self, ids: &[usize]) -> Result<DomainBatch> {
        let features = self.features.gather_rows(ids)?;
        let labels = self
            .domain
            .is_source()
            .then(|| ids.iter().map(|&i| self.labels[i]).collect());
        Ok(DomainBatch {
            domain: self.domain,
            example_ids: ids.to_vec(),
            features,
            labels,
        })
    }
}

/// A single-domain mini-batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub domain: DomainId,
    pub example_ids: Vec<usize>,
    pub features: Tensor,
    /// Ground-truth labels; present only for source domains.
    pub labels: Option<Vec<usize>>,
}

/// Geometry of the synthetic benchmark: Gaussian clusters centered on the
/// vertices of a regular simplex.
#[derive(Clone, Debug)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic cluster noise.
    pub noise: f64,
    /// Circumradius of the simplex the cluster centers sit on.
    pub radius: f64,
    pub seed: u64,
}

/// Rigid transform defining one domain's view of the base clusters: rotation
/// in the first two coordinates followed by a translation.
#[derive(Clone, Debug)]
pub struct DomainTransform {
    pub rotation: f64,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dims: usize) -> Self {
        DomainTransform {
            rotation: 0.0,
            shift: vec![0.0; dims],
        }
    }
}

/// Source and shifted-target datasets with identical class structure; the
/// target is the same cluster mixture mapped by the rotation and then
/// translated by the shift.
pub fn make_shifted_blobs(
    spec: &BlobSpec,
    rotation: f64,
    shift: &[f64],
) -> Result<(LabeledDataset, LabeledDataset)> {
    let sources = [DomainTransform::identity(spec.dims)];
    let target = DomainTransform {
        rotation,
        shift: shift.to_vec(),
    };
    let (mut sources, target) = make_multi_source_blobs(spec, &sources, &target)?;
    Ok((sources.remove(0), target))
}

/// One generator call per source domain plus the shared target, all drawn
/// from the same base cluster mixture under per-domain transforms.
pub fn make_multi_source_blobs(
    spec: &BlobSpec,
    source_transforms: &[DomainTransform],
    target_transform: &DomainTransform,
) -> Result<(Vec<LabeledDataset>, LabeledDataset)> {
    validate_spec(spec)?;
    if source_transforms.is_empty() {
        return Err(Error::InvalidConfig("at least one source domain".into()));
    }
    for tf in source_transforms.iter().chain([target_transform]) {
        if tf.shift.len() != spec.dims {
            return Err(Error::InvalidConfig(format!(
                "shift has {} components, dataset has {} dims",
                tf.shift.len(),
                spec.dims
            )));
        }
    }
    let centers = simplex_vertices(spec.classes, spec.dims)?;

    let mut master = RunRng::seed_from_u64(spec.seed);
    let mut sources = Vec::with_capacity(source_transforms.len());
    for (i, tf) in source_transforms.iter().enumerate() {
        let seed = master.next_u64();
        sources.push(sample_domain(
            spec,
            &centers,
            tf,
            DomainId::Source(i as u16),
            seed,
        )?);
    }
    let target_seed = master.next_u64();
    let target = sample_domain(spec, &centers, target_transform, DomainId::Target, target_seed)?;
    Ok((sources, target))
}

/// Concatenates source domains into a single dataset tagged `source0`.
pub fn merge_sources(sources: &[LabeledDataset]) -> Result<LabeledDataset> {
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot merge zero sources".into()))?;
    let dim = first.dim();
    let classes = first.class_count();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for ds in sources {
        if ds.dim() != dim || ds.class_count() != classes {
            return Err(Error::InvalidConfig(
                "merged sources must share dims and classes".into(),
            ));
        }
        values.extend_from_slice(ds.features().values());
        labels.extend_from_slice(ds.eval_labels());
    }
    let features = Tensor::new(&[labels.len(), dim], values)?;
    LabeledDataset::new(features, labels, DomainId::Source(0), classes)
}

fn validate_spec(spec: &BlobSpec) -> Result<()> {
    if spec.classes < 2 || spec.dims < 2 {
        return Err(Error::InvalidConfig(
            "blob generation needs classes >= 2 and dims >= 2".into(),
        ));
    }
    if spec.classes > spec.dims + 1 {
        return Err(Error::InvalidConfig(format!(
            "a regular simplex with {} vertices needs at least {} dims",
            spec.classes,
            spec.classes - 1
        )));
    }
    if spec.per_class == 0 || spec.noise <= 0.0 || spec.radius <= 0.0 {
        return Err(Error::InvalidConfig(
            "per_class, noise, and radius must be positive".into(),
        ));
    }
    Ok(())
}

fn sample_domain(
    spec: &BlobSpec,
    centers: &[Vec<f64>],
    tf: &DomainTransform,
    domain: DomainId,
    seed: u64,
) -> Result<LabeledDataset> {
    let n = spec.classes * spec.per_class;
    let mut rng = RunRng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    let (sin, cos) = (math::sin(tf.rotation), math::cos(tf.rotation));
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut x: Vec<f64> = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.noise * z
                })
                .collect();
            // Rotate in the first two coordinates, then translate.
            let (x0, x1) = (x[0], x[1]);
            x[0] = cos * x0 - sin * x1;
            x[1] = sin * x0 + cos * x1;
            for (xi, si) in x.iter_mut().zip(&tf.shift) {
                *xi += si;
            }
            values.extend_from_slice(&x);
            labels.push(c);
        }
    }
    let features = Tensor::new(&[n, spec.dims], values)?;
    LabeledDataset::new(features, labels, domain, spec.classes)
}

/// Vertices of a regular simplex with unit circumradius, embedded in
/// `dims`-dimensional space (requires `classes <= dims + 1`).
fn simplex_vertices(classes: usize, dims: usize) -> Result<Vec<Vec<f64>>> {
    // Standard construction: unit vectors with pairwise dot -1/(C-1) in
    // C-1 dimensions, padded with zeros.
    let c = classes;
    let mut v = vec![vec![0.0; dims]; c];
    for i in 0..c - 1 {
        let norm_sq: f64 = v[i][..i].iter().map(|a| a * a).sum();
        v[i][i] = math::sqrt(1.0 - norm_sq);
        for k in i + 1..c {
            let dot: f64 = (0..i).map(|j| v[i][j] * v[k][j]).sum();
            v[k][i] = (-1.0 / (c as f64 - 1.0) - dot) / v[i][i];
        }
    }
    Ok(v)
}

/// Round-robin per-domain batches of one epoch: every step yields one batch
/// from each domain, each batch single-domain, shuffled per epoch from the
/// given seed, dropping the last partial batch.
pub struct PerDomainBatches<'a> {
    datasets: &'a [&'a LabeledDataset],
    order: Vec<Vec<usize>>,
    batch_size: usize,
    steps: usize,
    step: usize,
}

/// Builds the batch stream for one epoch.
pub fn per_domain_batches<'a>(
    datasets: &'a [&'a LabeledDataset],
    batch_size: usize,
    seed: u64,
) -> Result<PerDomainBatches<'a>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(
            "batch_size must be at least 2 for batch statistics".into(),
        ));
    }
    if datasets.is_empty() {
        return Err(Error::InvalidConfig("no datasets to batch".into()));
    }
    let mut order = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        if ds.len() < batch_size {
            return Err(Error::InvalidConfig(format!(
                "dataset {} has {} examples, smaller than batch size {}",
                ds.domain(),
                ds.len(),
                batch_size
            )));
        }
        let mut ids: Vec<usize> = (0..ds.len()).collect();
        let mut rng = RunRng::seed_from_u64(crate::derive_seed(seed, i as u64));
        ids.shuffle(&mut rng);
        order.push(ids);
    }
    let steps = datasets
        .iter()
        .map(|ds| ds.len() / batch_size)
        .min()
        .unwrap_or(0);
    Ok(PerDomainBatches {
        datasets,
        order,
        batch_size,
        steps,
        step: 0,
    })
}

impl PerDomainBatches<'_> {
    /// Optimizer steps this epoch provides.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl Iterator for PerDomainBatches<'_> {
    type Item = Vec<DomainBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.step >= self.steps {
            return None;
        }
        let lo = self.step * self.batch_size;
        let hi = lo + self.batch_size;
        let round: Vec<DomainBatch> = self
            .datasets
            .iter()
            .zip(&self.order)
            .map(|(ds, ids)| {
                let batch = ds.batch(&ids[lo..hi]).expect("ids in range");
                debug_assert_eq!(batch.domain, ds.domain());
                batch
            })
            .collect();
        self.step += 1;
        Some(round)
    }
}

/// Per-class and overall accuracy of a network on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Accuracy per class, in `[0, 1]`; classes absent from the dataset get 0.
    pub per_class: Vec<f64>,
    /// Mean of the per-class accuracies over classes present in the dataset.
    pub class_avg: f64,
    /// Fraction of correctly classified examples.
    pub overall: f64,
    /// Dataset size.
    pub n: usize,
}

/// Transductive evaluation: eval-mode forward with the dataset's own domain
/// branch over every example, scored against the held-out labels. Never
/// mutates normalization statistics.
pub fn evaluate_transductive(network: &Network, dataset: &LabeledDataset) -> Result<Metrics> {
    let classes = dataset.class_count();
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    let labels = dataset.eval_labels();
    let chunk = 256;
    let n = dataset.len();
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let ids: Vec<usize> = (i..hi).collect();
        let x = dataset.features().gather_rows(&ids)?;
        let (_, logits) = network.infer(&x, Some(dataset.domain()))?;
        for (row, &id) in logits.argmax_rows().iter().zip(&ids) {
            let y = labels[id];
            count[y] += 1;
            if *row == y {
                correct[y] += 1;
            }
        }
        i = hi;
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let present = count.iter().filter(|&&c| c > 0).count().max(1);
    let class_avg = per_class
        .iter()
        .zip(&count)
        .filter(|(_, &n)| n > 0)
        .map(|(&a, _)| a)
        .sum::<f64>()
        / present as f64;
    let overall = correct.iter().sum::<usize>() as f64 / n.max(1) as f64;
    Ok(Metrics {
        per_class,
        class_avg,
        overall,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> BlobSpec {
        BlobSpec {
            classes: 3,
            dims: 2,
            per_class: 40,
            noise: 0.3,
            radius: 1.0,
            seed,
        }
    }

    #[test]
    fn generated_domains_are_balanced_and_aligned() {
        let (source, target) = make_shifted_blobs(&spec(5), 0.6, &[1.0, -0.5]).unwrap();
        assert_eq!(source.len(), 120);
        assert_eq!(target.len(), 120);
        assert_eq!(source.class_count(), target.class_count());
        for c in 0..3 {
            let count = |ds: &LabeledDataset| ds.eval_labels().iter().filter(|&&y| y == c).count();
            assert_eq!(count(&source), count(&target));
        }
        assert!(source.supervision().is_some());
        assert!(target.supervision().is_none());
    }

    #[test]
    fn generation_is_deterministic() {
        let (s1, t1) = make_shifted_blobs(&spec(9), 0.9, &[1.5, 0.0]).unwrap();
        let (s2, t2) = make_shifted_blobs(&spec(9), 0.9, &[1.5, 0.0]).unwrap();
        assert_eq!(s1.features().values(), s2.features().values());
        assert_eq!(t1.features().values(), t2.features().values());
    }

    #[test]
    fn simplex_vertices_are_regular() {
        for (classes, dims) in [(2usize, 2usize), (3, 2), (4, 3), (5, 7)] {
            let v = simplex_vertices(classes, dims).unwrap();
            for i in 0..classes {
                let norm: f64 = v[i].iter().map(|a| a * a).sum();
                assert!((norm - 1.0).abs() < 1e-12, "unit circumradius");
                for j in i + 1..classes {
                    let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                    assert!((dot + 1.0 / (classes as f64 - 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn too_many_classes_for_dims_is_rejected() {
        let bad = BlobSpec {
            classes: 4,
            dims: 2,
            ..spec(1)
        };
        assert!(matches!(
            make_shifted_blobs(&bad, 0.0, &[0.0, 0.0]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn shift_dimension_mismatch_is_rejected() {
        assert!(matches!(
            make_shifted_blobs(&spec(1), 0.0, &[0.0]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn merged_sources_preserve_example_multiset() {
        let tfs = [
            DomainTransform::identity(2),
            DomainTransform {
                rotation: -0.4,
                shift: vec![0.5, 0.5],
            },
        ];
        let (sources, _) =
            make_multi_source_blobs(&spec(3), &tfs, &DomainTransform::identity(2)).unwrap();
        let merged = merge_sources(&sources).unwrap();
        assert_eq!(merged.len(), sources[0].len() + sources[1].len());
        assert_eq!(merged.domain(), DomainId::Source(0));
        // Same example multiset, in concatenation order.
        let mut concat = sources[0].features().values().to_vec();
        concat.extend_from_slice(sources[1].features().values());
        assert_eq!(merged.features().values(), concat.as_slice());
    }

    #[test]
    fn batches_are_single_domain_and_cover_each_example_once() {
        let (source, target) = make_shifted_blobs(&spec(7), 0.5, &[1.0, 0.0]).unwrap();
        let datasets = [&source, &target];
        let mut seen_source = vec![0usize; source.len()];
        let stream = per_domain_batches(&datasets, 16, 42).unwrap();
        assert_eq!(stream.steps(), 120 / 16);
        for round in stream {
            assert_eq!(round.len(), 2);
            assert_eq!(round[0].domain, DomainId::Source(0));
            assert_eq!(round[1].domain, DomainId::Target);
            assert!(round[1].labels.is_none());
            for &id in &round[0].example_ids {
                seen_source[id] += 1;
            }
        }
        // Drop-last: every example appears at most once per epoch.
        assert!(seen_source.iter().all(|&c| c <= 1));
    }

    #[test]
    fn batch_shuffle_is_seeded() {
        let (source, target) = make_shifted_blobs(&spec(7), 0.5, &[1.0, 0.0]).unwrap();
        let datasets = [&source, &target];
        let ids = |seed: u64| -> Vec<usize> {
            per_domain_batches(&datasets, 16, seed)
                .unwrap()
                .flat_map(|round| round[0].example_ids.clone())
                .collect()
        };
        assert_eq!(ids(1), ids(1));
        assert_ne!(ids(1), ids(2));
    }

    #[test]
    fn undersized_dataset_or_batch_rejected() {
        let (source, target) = make_shifted_blobs(&spec(7), 0.0, &[0.0, 0.0]).unwrap();
        let datasets = [&source, &target];
        assert!(per_domain_batches(&datasets, 1, 0).is_err());
        assert!(per_domain_batches(&datasets, 1000, 0).is_err());
    }
}
