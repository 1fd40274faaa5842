//! Dataset and embedding CSV formats.
//!
//! Datasets: header `f_0,...,f_{d-1},label,domain`, one row per example.
//! Embeddings: header `id,domain,class,f_0,...,f_{k-1}` with the
//! penultimate-layer features of each example under its own domain branch.

use std::path::Path;

use anyhow::{bail, Context, Result};

use dsbn_core::data::LabeledDataset;
use dsbn_core::domain::DomainId;
use dsbn_core::nn::Network;
use dsbn_core::tensor::Tensor;

/// Writes one or more domains into a single dataset CSV.
pub fn export_datasets(path: &Path, datasets: &[&LabeledDataset]) -> Result<()> {
    let first = datasets.first().context("no datasets to export")?;
    let dim = first.dim();
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut header: Vec<String> = (0..dim).map(|j| format!("f_{j}")).collect();
    header.push("label".to_string());
    header.push("domain".to_string());
    w.write_record(&header)?;
    for ds in datasets {
        if ds.dim() != dim {
            bail!("datasets in one file must share the feature dimension");
        }
        for i in 0..ds.len() {
            let mut record: Vec<String> =
                ds.features().row(i).iter().map(|v| format!("{v}")).collect();
            record.push(ds.eval_labels()[i].to_string());
            record.push(ds.domain().to_string());
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_domain(s: &str) -> Result<DomainId> {
    if s == "target" {
        return Ok(DomainId::Target);
    }
    if let Some(idx) = s.strip_prefix("source") {
        let idx: u16 = idx
            .parse()
            .with_context(|| format!("bad source domain index in {s:?}"))?;
        return Ok(DomainId::Source(idx));
    }
    bail!("unknown domain {s:?} (expected sourceN or target)");
}

/// Reads a dataset CSV back into per-domain datasets, in domain order
/// (sources by index, then the target if present). The class count is the
/// largest label plus one.
pub fn import_datasets(path: &Path) -> Result<(Vec<LabeledDataset>, Option<LabeledDataset>)> {
    let mut r = csv::Reader::from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    if header.len() < 3 {
        bail!("dataset CSV needs feature columns plus label and domain");
    }
    let dim = header.len() - 2;
    let mut groups: std::collections::BTreeMap<DomainId, (Vec<f64>, Vec<usize>)> =
        std::collections::BTreeMap::new();
    let mut classes = 0usize;
    for record in r.records() {
        let record = record?;
        if record.len() != dim + 2 {
            bail!("row has {} fields, expected {}", record.len(), dim + 2);
        }
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            features.push(record[j].parse::<f64>().context("bad feature value")?);
        }
        let label: usize = record[dim].parse().context("bad label")?;
        let domain = parse_domain(&record[dim + 1])?;
        classes = classes.max(label + 1);
        let slot = groups.entry(domain).or_default();
        slot.0.extend_from_slice(&features);
        slot.1.push(label);
    }
    let mut sources = Vec::new();
    let mut target = None;
    for (domain, (values, labels)) in groups {
        let features = Tensor::new(&[labels.len(), dim], values)?;
        let ds = LabeledDataset::new(features, labels, domain, classes)?;
        if domain.is_target() {
            target = Some(ds);
        } else {
            sources.push(ds);
        }
    }
    Ok((sources, target))
}

/// Writes penultimate-layer features of every example, evaluated under the
/// example's own domain branch in eval mode.
pub fn export_embeddings(
    path: &Path,
    network: &Network,
    datasets: &[&LabeledDataset],
) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut feat_dim: Option<usize> = None;
    let mut header_written = false;
    for ds in datasets {
        let chunk = 256;
        let mut i = 0;
        while i < ds.len() {
            let hi = (i + chunk).min(ds.len());
            let ids: Vec<usize> = (i..hi).collect();
            let x = ds.features().gather_rows(&ids)?;
            let (features, _) = network.infer(&x, Some(ds.domain()))?;
            let k = features.shape()[1];
            if !header_written {
                feat_dim = Some(k);
                let mut header = vec!["id".to_string(), "domain".to_string(), "class".to_string()];
                header.extend((0..k).map(|j| format!("f_{j}")));
                w.write_record(&header)?;
                header_written = true;
            }
            if feat_dim != Some(k) {
                bail!("inconsistent feature dimension across domains");
            }
            for (row, &id) in ids.iter().enumerate().map(|(r, i)| (r, i)) {
                let mut record = vec![
                    id.to_string(),
                    ds.domain().to_string(),
                    ds.eval_labels()[id].to_string(),
                ];
                record.extend(features.row(row).iter().map(|v| format!("{v}")));
                w.write_record(&record)?;
            }
            i = hi;
        }
    }
    w.flush()?;
    Ok(())
}
