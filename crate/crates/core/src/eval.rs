//! Clean, group-level and verified error rates, and confusion counts.
//!
//! Argmax ties count against the prediction: a flat network is correct only
//! if the true class is the unique maximizer.

use serde::{Deserialize, Serialize};

use crate::bounds::{margin_bounds_batch, verdict_from_lower, Verdict};
use crate::data::Dataset;
use crate::error::{parse_document, Error, Result};
use crate::groups::{spec_inner, spec_outer, spec_standard, GroupPartition, PartitionFile, SpecMatrix};
use crate::ndt::Ndt;
use crate::network::Network;

const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Network(&'a Network),
    Ndt(&'a Ndt),
}

impl Predictor<'_> {
    pub fn n_classes(&self) -> usize {
        match self {
            Predictor::Network(n) => n.n_classes(),
            Predictor::Ndt(t) => t.n_classes(),
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Indices attaining the maximum among `allowed` entries.
pub fn argmax_set(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<usize> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (0..logits.len()).filter(|&i| allowed(i) && logits[i] == max).collect()
}

/// Calls `f(label, logits)` for every sample in dataset order.
fn for_each_logits(net: &Network, ds: &Dataset, mut f: impl FnMut(usize, &[f64])) -> Result<()> {
    for idx in chunks(ds.len()) {
        let (x, y) = ds.gather(&idx);
        let logits = net.forward_batch(&x)?;
        for (k, &label) in y.iter().enumerate() {
            f(label, logits.row(k));
        }
    }
    Ok(())
}

fn check_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid(format!("dataset `{}` is empty", ds.name)));
    }
    Ok(())
}

fn check_partition(n_classes: usize, partition: &GroupPartition) -> Result<()> {
    if partition.n_classes() != n_classes {
        return Err(Error::shape(format!(
            "partition covers {} classes, model has {n_classes}",
            partition.n_classes()
        )));
    }
    Ok(())
}

fn rate(count: usize, ds: &Dataset) -> f64 {
    count as f64 / ds.len() as f64
}

pub fn clean_error_network(net: &Network, ds: &Dataset) -> Result<f64> {
    clean_error(Predictor::Network(net), ds)
}

pub fn clean_error(p: Predictor<'_>, ds: &Dataset) -> Result<f64> {
    check_nonempty(ds)?;
    let mut wrong = 0;
    match p {
        Predictor::Network(net) => for_each_logits(net, ds, |y, l| {
            wrong += usize::from(argmax_set(l, |_| true) != [y]);
        })?,
        Predictor::Ndt(t) => {
            for idx in chunks(ds.len()) {
                let (x, y) = ds.gather(&idx);
                let pred = t.predict_batch(&x)?;
                wrong += pred.iter().zip(&y).filter(|(p, y)| p != y).count();
            }
        }
    }
    Ok(rate(wrong, ds))
}

pub fn inter_group_error(p: Predictor<'_>, ds: &Dataset, partition: &GroupPartition) -> Result<f64> {
    check_nonempty(ds)?;
    check_partition(p.n_classes(), partition)?;
    let mut wrong = 0;
    match p {
        Predictor::Network(net) => for_each_logits(net, ds, |y, l| {
            let set = argmax_set(l, |_| true);
            wrong += usize::from(set.iter().any(|&c| !partition.same_group(c, y)));
        })?,
        Predictor::Ndt(t) => {
            for idx in chunks(ds.len()) {
                let (x, y) = ds.gather(&idx);
                let pred = t.predict_batch(&x)?;
                wrong += pred
                    .iter()
                    .zip(&y)
                    .filter(|(&p, &y)| !partition.same_group(p, y))
                    .count();
            }
        }
    }
    Ok(rate(wrong, ds))
}

/// Error of the decision restricted to the true class's group. For a tree,
/// routing is forced along the true path until the node's classes lie inside
/// that group.
pub fn intra_group_error(p: Predictor<'_>, ds: &Dataset, partition: &GroupPartition) -> Result<f64> {
    check_nonempty(ds)?;
    check_partition(p.n_classes(), partition)?;
    let mut wrong = 0;
    match p {
        Predictor::Network(net) => for_each_logits(net, ds, |y, l| {
            wrong += usize::from(argmax_set(l, |c| partition.same_group(c, y)) != [y]);
        })?,
        Predictor::Ndt(t) => {
            for i in 0..ds.len() {
                let y = ds.label(i);
                let pred = t.predict_within(&ds.input_tensor(i), y, |c| partition.same_group(c, y))?;
                wrong += usize::from(pred != y);
            }
        }
    }
    Ok(rate(wrong, ds))
}

/// Fraction of samples with some active row of their specification whose
/// certified lower margin is `<= 0`.
fn verified_rate(
    net: &Network,
    ds: &Dataset,
    eps: f64,
    spec_for: impl Fn(usize) -> Result<SpecMatrix>,
) -> Result<f64> {
    check_nonempty(ds)?;
    let mut failed = 0;
    for idx in chunks(ds.len()) {
        let (x, y) = ds.gather(&idx);
        let specs: Vec<SpecMatrix> = y.iter().map(|&c| spec_for(c)).collect::<Result<_>>()?;
        let refs: Vec<&SpecMatrix> = specs.iter().collect();
        let (lo, _) = margin_bounds_batch(net, &x, &refs, eps)?;
        for (k, s) in specs.iter().enumerate() {
            failed += usize::from(verdict_from_lower(s, lo.row(k)) == Verdict::NotCertified);
        }
    }
    Ok(rate(failed, ds))
}

pub fn verified_inter_group_error(net: &Network, ds: &Dataset, partition: &GroupPartition, eps: f64) -> Result<f64> {
    check_partition(net.n_classes(), partition)?;
    let n = net.n_classes();
    verified_rate(net, ds, eps, |y| spec_outer(y, partition, n))
}

pub fn verified_intra_group_error(
    net: &Network,
    ds: &Dataset,
    partition: &GroupPartition,
    eps_inner: f64,
) -> Result<f64> {
    check_partition(net.n_classes(), partition)?;
    let n = net.n_classes();
    verified_rate(net, ds, eps_inner, |y| spec_inner(y, partition, n))
}

pub fn verified_error(net: &Network, ds: &Dataset, eps: f64) -> Result<f64> {
    let n = net.n_classes();
    verified_rate(net, ds, eps, |y| spec_standard(y, n))
}

/// Rate of samples whose root decision is not certified at `eps`.
pub fn ndt_verified_inter_group_error(ndt: &Ndt, ds: &Dataset, eps: f64) -> Result<f64> {
    check_nonempty(ds)?;
    let root = ndt.root_network()?;
    let mut failed = 0;
    for idx in chunks(ds.len()) {
        let (x, y) = ds.gather(&idx);
        let specs: Vec<SpecMatrix> = y
            .iter()
            .map(|&c| spec_standard(ndt.root_group_of(c)?, 2))
            .collect::<Result<_>>()?;
        let refs: Vec<&SpecMatrix> = specs.iter().collect();
        let (lo, _) = margin_bounds_batch(root, &x, &refs, eps)?;
        for (k, s) in specs.iter().enumerate() {
            failed += usize::from(verdict_from_lower(s, lo.row(k)) == Verdict::NotCertified);
        }
    }
    Ok(rate(failed, ds))
}

/// `counts[y][pred]`. A flat network's tied prediction is attributed to the
/// true class only if it is the unique maximizer, otherwise to the smallest
/// other maximizer.
pub fn confusion(p: Predictor<'_>, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let n = p.n_classes();
    let mut counts = vec![vec![0usize; n]; n];
    match p {
        Predictor::Network(net) => for_each_logits(net, ds, |y, l| {
            let set = argmax_set(l, |_| true);
            let pred = if set == [y] {
                y
            } else {
                set.iter().copied().find(|&c| c != y).unwrap_or(y)
            };
            counts[y][pred] += 1;
        })?,
        Predictor::Ndt(t) => {
            for idx in chunks(ds.len()) {
                let (x, y) = ds.gather(&idx);
                for (p, y) in t.predict_batch(&x)?.into_iter().zip(y) {
                    counts[y][p] += 1;
                }
            }
        }
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_id: String,
    pub dataset: String,
    pub n_samples: usize,
    pub eps_outer: f64,
    pub eps_inner: f64,
    pub partition: PartitionFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub clean_error: f64,
    pub inter_group_error: f64,
    pub verified_inter_group_error: f64,
    pub intra_group_error: f64,
    /// Not defined for decision trees.
    pub verified_intra_group_error: Option<f64>,
    pub verified_error: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
    pub metadata: ReportMetadata,
}

/// All metrics at one pair of radii. For a tree, the verified inter-group
/// error is the root certification failure rate.
pub fn evaluate(
    p: Predictor<'_>,
    ds: &Dataset,
    partition: &GroupPartition,
    eps_outer: f64,
    eps_inner: f64,
    model_id: &str,
) -> Result<MetricsReport> {
    check_nonempty(ds)?;
    check_partition(p.n_classes(), partition)?;
    let (vinter, vintra, verr) = match p {
        Predictor::Network(net) => (
            verified_inter_group_error(net, ds, partition, eps_outer)?,
            Some(verified_intra_group_error(net, ds, partition, eps_inner)?),
            Some(verified_error(net, ds, eps_outer)?),
        ),
        Predictor::Ndt(t) => (ndt_verified_inter_group_error(t, ds, eps_outer)?, None, None),
    };
    Ok(MetricsReport {
        clean_error: clean_error(p, ds)?,
        inter_group_error: inter_group_error(p, ds, partition)?,
        verified_inter_group_error: vinter,
        intra_group_error: intra_group_error(p, ds, partition)?,
        verified_intra_group_error: vintra,
        verified_error: verr,
        confusion: confusion(p, ds)?,
        metadata: ReportMetadata {
            model_id: model_id.to_string(),
            dataset: ds.name.clone(),
            n_samples: ds.len(),
            eps_outer,
            eps_inner,
            partition: partition.to_file(),
        },
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<MetricsReport> {
        parse_document(text)
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10}",
            "model", "eps", "error", "inter", "v-inter", "intra", "v-intra", "verified"
        )
    }

    /// One aligned row; rates are percentages.
    pub fn table_row(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let opt = |v: Option<f64>| v.map(pct).unwrap_or_else(|| "-".into());
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>10} {:>8} {:>10} {:>10}",
            self.metadata.model_id,
            format!("{:.4}", self.metadata.eps_outer),
            pct(self.clean_error),
            pct(self.inter_group_error),
            pct(self.verified_inter_group_error),
            pct(self.intra_group_error),
            opt(self.verified_intra_group_error),
            opt(self.verified_error),
        )
    }

    pub fn to_table(&self) -> String {
        format!("{}\n{}\n", Self::table_header(), self.table_row())
    }
}
