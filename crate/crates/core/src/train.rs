//! Verifiable training: the worst-case-margin robust loss, the two-term
//! group-prioritized loss (with optional upper-bound scattering), the
//! warmup/ramp schedule, and the optimization loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bounds::{elided_margins, penultimate_intervals};
use crate::data::{batches, Dataset};
use crate::error::{parse_document, Error, Result};
use crate::eval::clean_error_network;
use crate::groups::{spec_inner, spec_outer, spec_standard, GroupPartition, PartitionFile, SpecMatrix};
use crate::network::{BoundNetwork, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    Standard,
    Outer,
    Inner,
}

/// One summed robust term: CE over the negated lower margins of a
/// specification family at radius `eps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerm {
    pub kind: SpecKind,
    pub eps: f64,
    /// Overrides the config-level partition for this term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionFile>,
    #[serde(default)]
    pub ubs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossMode {
    Natural,
    Robust {
        eps: f64,
    },
    Igrp {
        eps_outer: f64,
        eps_inner: f64,
        #[serde(default)]
        ubs: bool,
    },
    Terms {
        terms: Vec<LossTerm>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_warmup")]
    pub natural_warmup_epochs: usize,
    /// Defaults to 40% of the epochs left after warmup.
    #[serde(default)]
    pub ramp_epochs: Option<usize>,
    #[serde(default = "default_kappa_start")]
    pub kappa_start: f64,
    #[serde(default = "default_kappa_end")]
    pub kappa_end: f64,
}

fn default_warmup() -> usize {
    5
}
fn default_kappa_start() -> f64 {
    1.0
}
fn default_kappa_end() -> f64 {
    0.5
}
fn default_threads() -> usize {
    1
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            natural_warmup_epochs: default_warmup(),
            ramp_epochs: None,
            kappa_start: default_kappa_start(),
            kappa_end: default_kappa_end(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub eps_multiplier: f64,
    pub kappa: f64,
}

impl ScheduleState {
    pub const NATURAL: ScheduleState = ScheduleState {
        eps_multiplier: 0.0,
        kappa: 1.0,
    };
    pub const ROBUST: ScheduleState = ScheduleState {
        eps_multiplier: 1.0,
        kappa: 0.0,
    };
}

impl ScheduleConfig {
    pub fn ramp_len(&self, total_epochs: usize) -> usize {
        match self.ramp_epochs {
            Some(r) => r,
            None => {
                let rest = total_epochs.saturating_sub(self.natural_warmup_epochs);
                if rest == 0 {
                    0
                } else {
                    ((rest as f64 * 0.4).round() as usize).max(1)
                }
            }
        }
    }

    /// State for 0-based `epoch`.
    pub fn state(&self, epoch: usize, total_epochs: usize) -> ScheduleState {
        let eps_multiplier = if epoch < self.natural_warmup_epochs {
            0.0
        } else {
            let ramp = self.ramp_len(total_epochs);
            if ramp == 0 {
                1.0
            } else {
                ((epoch - self.natural_warmup_epochs + 1) as f64 / ramp as f64).clamp(0.0, 1.0)
            }
        };
        ScheduleState {
            eps_multiplier,
            kappa: self.kappa_start + (self.kappa_end - self.kappa_start) * eps_multiplier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub loss: LossMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionFile>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Inverse-frequency per-sample weights.
    #[serde(default)]
    pub sample_weights: bool,
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, loss: LossMode) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            optimizer: OptimizerConfig::default(),
            loss,
            partition: None,
            schedule: ScheduleConfig::default(),
            sample_weights: false,
            threads: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = parse_document(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let eps_ok = |path: &str, e: f64| {
            if e.is_finite() && e >= 0.0 {
                Ok(())
            } else {
                Err(Error::schema(path, format!("must be a finite value >= 0, got {e}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::schema("batch_size", "must be >= 1"));
        }
        if self.threads == 0 {
            return Err(Error::schema("threads", "must be >= 1"));
        }
        match &self.optimizer {
            OptimizerConfig::SgdMomentum { lr, momentum } => {
                if !(lr.is_finite() && *lr > 0.0) {
                    return Err(Error::schema("optimizer.lr", "must be > 0"));
                }
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::schema("optimizer.momentum", "must be in [0, 1)"));
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr.is_finite() && *lr > 0.0) {
                    return Err(Error::schema("optimizer.lr", "must be > 0"));
                }
                for (p, b) in [("optimizer.beta1", beta1), ("optimizer.beta2", beta2)] {
                    if !(0.0..1.0).contains(b) {
                        return Err(Error::schema(p, "must be in [0, 1)"));
                    }
                }
                if !(eps.is_finite() && *eps > 0.0) {
                    return Err(Error::schema("optimizer.eps", "must be > 0"));
                }
            }
        }
        let s = &self.schedule;
        for (p, k) in [("schedule.kappa_start", s.kappa_start), ("schedule.kappa_end", s.kappa_end)] {
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::schema(p, format!("must be in [0, 1], got {k}")));
            }
        }
        if let Some(p) = &self.partition {
            GroupPartition::from_file(p).map_err(|e| Error::schema("partition", e.to_string()))?;
        }
        match &self.loss {
            LossMode::Natural => {}
            LossMode::Robust { eps } => eps_ok("loss.eps", *eps)?,
            LossMode::Igrp {
                eps_outer,
                eps_inner,
                ..
            } => {
                eps_ok("loss.eps_outer", *eps_outer)?;
                eps_ok("loss.eps_inner", *eps_inner)?;
                if eps_inner > eps_outer {
                    return Err(Error::schema(
                        "loss.eps_inner",
                        format!("must not exceed eps_outer ({eps_inner} > {eps_outer})"),
                    ));
                }
                if self.partition.is_none() {
                    return Err(Error::schema("partition", "required for igrp loss"));
                }
            }
            LossMode::Terms { terms } => {
                for (i, t) in terms.iter().enumerate() {
                    eps_ok(&format!("loss.terms[{i}].eps"), t.eps)?;
                    if let Some(p) = &t.partition {
                        GroupPartition::from_file(p)
                            .map_err(|e| Error::schema(format!("loss.terms[{i}].partition"), e.to_string()))?;
                    } else if t.kind != SpecKind::Standard && self.partition.is_none() {
                        return Err(Error::schema(
                            format!("loss.terms[{i}].partition"),
                            "outer/inner terms need a partition",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Robust terms with partitions resolved.
    pub fn resolved_terms(&self) -> Result<Vec<ResolvedTerm>> {
        let global = self.partition.as_ref().map(GroupPartition::from_file).transpose()?;
        let need = |p: &Option<GroupPartition>| {
            p.clone().ok_or_else(|| Error::schema("partition", "required for group terms"))
        };
        Ok(match &self.loss {
            LossMode::Natural => vec![],
            LossMode::Robust { eps } => vec![ResolvedTerm::standard(*eps)],
            LossMode::Igrp {
                eps_outer,
                eps_inner,
                ubs,
            } => {
                let p = need(&global)?;
                vec![
                    ResolvedTerm {
                        kind: SpecKind::Outer,
                        eps: *eps_outer,
                        partition: Some(p.clone()),
                        ubs: *ubs,
                    },
                    ResolvedTerm {
                        kind: SpecKind::Inner,
                        eps: *eps_inner,
                        partition: Some(p),
                        ubs: *ubs,
                    },
                ]
            }
            LossMode::Terms { terms } => terms
                .iter()
                .map(|t| {
                    let partition = match (&t.partition, t.kind) {
                        (_, SpecKind::Standard) => None,
                        (Some(p), _) => Some(GroupPartition::from_file(p)?),
                        (None, _) => Some(need(&global)?),
                    };
                    Ok(ResolvedTerm {
                        kind: t.kind,
                        eps: t.eps,
                        partition,
                        ubs: t.ubs,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedTerm {
    pub kind: SpecKind,
    pub eps: f64,
    pub partition: Option<GroupPartition>,
    pub ubs: bool,
}

impl ResolvedTerm {
    pub fn standard(eps: f64) -> ResolvedTerm {
        ResolvedTerm {
            kind: SpecKind::Standard,
            eps,
            partition: None,
            ubs: false,
        }
    }

    pub fn igrp(partition: &GroupPartition, eps_outer: f64, eps_inner: f64, ubs: bool) -> Vec<ResolvedTerm> {
        vec![
            ResolvedTerm {
                kind: SpecKind::Outer,
                eps: eps_outer,
                partition: Some(partition.clone()),
                ubs,
            },
            ResolvedTerm {
                kind: SpecKind::Inner,
                eps: eps_inner,
                partition: Some(partition.clone()),
                ubs,
            },
        ]
    }

    fn spec(&self, y: usize, n: usize) -> Result<SpecMatrix> {
        match (self.kind, &self.partition) {
            (SpecKind::Standard, _) => spec_standard(y, n),
            (SpecKind::Outer, Some(p)) => spec_outer(y, p, n),
            (SpecKind::Inner, Some(p)) => spec_inner(y, p, n),
            _ => Err(Error::invalid("group term without a partition")),
        }
    }

    /// Rows zeroed by this term's spec (other than `y`).
    fn complement(&self, y: usize, n: usize) -> Result<Option<SpecMatrix>> {
        match (self.kind, &self.partition) {
            (SpecKind::Outer, Some(p)) => spec_inner(y, p, n).map(Some),
            (SpecKind::Inner, Some(p)) => spec_outer(y, p, n).map(Some),
            _ => Ok(None),
        }
    }
}

/// Penultimate bounds computed once per distinct radius.
struct BoundCache {
    entries: Vec<(u64, Var, Var)>,
}

impl BoundCache {
    fn new() -> Self {
        BoundCache { entries: vec![] }
    }

    fn get(&mut self, tape: &mut Tape, net: &BoundNetwork<'_>, x: &Tensor, eps: f64) -> Result<(Var, Var)> {
        let key = eps.to_bits();
        if let Some(&(_, lo, hi)) = self.entries.iter().find(|e| e.0 == key) {
            return Ok((lo, hi));
        }
        let (lo, hi) = penultimate_intervals(tape, net, x, eps)?;
        self.entries.push((key, lo, hi));
        Ok((lo, hi))
    }
}

fn negated_ce(tape: &mut Tape, v: Var, y: &[usize]) -> Result<Var> {
    let neg = tape.scale(v, -1.0);
    tape.cross_entropy_rows(neg, y)
}

fn term_rows(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    cache: &mut BoundCache,
    x: &Tensor,
    y: &[usize],
    term: &ResolvedTerm,
    eps: f64,
) -> Result<Var> {
    let n = net.network().n_classes();
    let (lo, hi) = cache.get(tape, net, x, eps)?;
    let specs: Vec<SpecMatrix> = y.iter().map(|&c| term.spec(c, n)).collect::<Result<_>>()?;
    let refs: Vec<&SpecMatrix> = specs.iter().collect();
    let (m_lower, _) = elided_margins(tape, net, lo, hi, &refs)?;
    let mut v = m_lower;
    if term.ubs {
        let comp: Vec<Option<SpecMatrix>> = y.iter().map(|&c| term.complement(c, n)).collect::<Result<_>>()?;
        if comp.iter().all(Option::is_some) {
            let comp: Vec<SpecMatrix> = comp.into_iter().flatten().collect();
            let refs: Vec<&SpecMatrix> = comp.iter().collect();
            let (_, m_upper) = elided_margins(tape, net, lo, hi, &refs)?;
            v = tape.add(v, m_upper)?;
        }
    }
    negated_ce(tape, v, y)
}

/// Per-sample natural cross-entropy, `[B]`.
pub fn natural_rows(tape: &mut Tape, net: &BoundNetwork<'_>, x: &Tensor, y: &[usize]) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let logits = net.forward(tape, xv)?;
    tape.cross_entropy_rows(logits, y)
}

/// Per-sample sum of robust terms, each at `eps * eps_multiplier`, `[B]`.
pub fn robust_terms_rows(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    x: &Tensor,
    y: &[usize],
    terms: &[ResolvedTerm],
    eps_multiplier: f64,
) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::invalid("no robust terms"));
    }
    let mut cache = BoundCache::new();
    let mut total: Option<Var> = None;
    for term in terms {
        let rows = term_rows(tape, net, &mut cache, x, y, term, term.eps * eps_multiplier)?;
        total = Some(match total {
            None => rows,
            Some(t) => tape.add(t, rows)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Per-sample `κ·CE_nat + (1−κ)·robust`, `[B]`. Natural mode (no terms) is
/// plain CE regardless of the state; `κ = 1` skips the bound computation.
pub fn objective_rows(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    x: &Tensor,
    y: &[usize],
    terms: &[ResolvedTerm],
    state: ScheduleState,
) -> Result<Var> {
    if terms.is_empty() || state.kappa >= 1.0 {
        return natural_rows(tape, net, x, y);
    }
    let robust = robust_terms_rows(tape, net, x, y, terms, state.eps_multiplier)?;
    if state.kappa <= 0.0 {
        return Ok(robust);
    }
    let nat = natural_rows(tape, net, x, y)?;
    let a = tape.scale(nat, state.kappa);
    let b = tape.scale(robust, 1.0 - state.kappa);
    tape.add(a, b)
}

fn weighted_sum(tape: &mut Tape, rows: Var, weights: Option<&[f64]>) -> Result<Var> {
    match weights {
        None => Ok(tape.sum(rows)),
        Some(w) => {
            let wv = tape.constant(Tensor::vector(w.to_vec()));
            let p = tape.mul(rows, wv)?;
            Ok(tape.sum(p))
        }
    }
}

fn mean_value(net: &Network, f: impl FnOnce(&mut Tape, &BoundNetwork<'_>) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let rows = f(&mut tape, &bound)?;
    let v = tape.value(rows);
    if v.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(v.sum() / v.len() as f64)
}

/// Mean natural cross-entropy over a batch.
pub fn natural_loss(net: &Network, x: &Tensor, y: &[usize]) -> Result<f64> {
    mean_value(net, |t, b| natural_rows(t, b, x, y))
}

/// Mean of `CE(−m̲(x, ε), y)` with the standard specification.
pub fn robust_loss(net: &Network, x: &Tensor, y: &[usize], eps: f64) -> Result<f64> {
    mean_value(net, |t, b| robust_terms_rows(t, b, x, y, &[ResolvedTerm::standard(eps)], 1.0))
}

/// Mean of `CE(−m̲ᴼ(x, ε_outer), y) + CE(−m̲ᴵ(x, ε_inner), y)`.
pub fn igrp_loss(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    partition: &GroupPartition,
    eps_outer: f64,
    eps_inner: f64,
    ubs: bool,
) -> Result<f64> {
    if partition.n_classes() != net.n_classes() {
        return Err(Error::shape(format!(
            "partition covers {} classes, network has {}",
            partition.n_classes(),
            net.n_classes()
        )));
    }
    let terms = ResolvedTerm::igrp(partition, eps_outer, eps_inner, ubs);
    mean_value(net, |t, b| robust_terms_rows(t, b, x, y, &terms, 1.0))
}

/// Training objective on one batch (mean over samples).
pub fn mixed_objective(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    state: ScheduleState,
    config: &TrainConfig,
) -> Result<f64> {
    let terms = config.resolved_terms()?;
    mean_value(net, |t, b| objective_rows(t, b, x, y, &terms, state))
}

/// Value of a scalar built on a fresh tape and its gradients w.r.t. every
/// parameter, in [`Network::parameters`] order.
pub fn value_and_gradients(
    net: &Network,
    f: impl FnOnce(&mut Tape, &BoundNetwork<'_>) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let out = f(&mut tape, &bound)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    Ok((value, bound.parameter_vars().into_iter().map(|v| grads.wrt(v)).collect()))
}

/// Sums the weighted objective over a batch, split into `threads` contiguous
/// chunks whose results are reduced in chunk order.
fn batch_sum_and_gradients(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    weights: Option<&[f64]>,
    terms: &[ResolvedTerm],
    state: ScheduleState,
    threads: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let b = y.len();
    let chunk_fn = |lo: usize, hi: usize| -> Result<(f64, Vec<Tensor>)> {
        let per = x.len() / b;
        let mut shape = x.shape().to_vec();
        shape[0] = hi - lo;
        let xs = Tensor::new(shape, x.data()[lo * per..hi * per].to_vec())?;
        value_and_gradients(net, |tape, bound| {
            let rows = objective_rows(tape, bound, &xs, &y[lo..hi], terms, state)?;
            weighted_sum(tape, rows, weights.map(|w| &w[lo..hi]))
        })
    };
    let threads = threads.min(b).max(1);
    if threads == 1 {
        return chunk_fn(0, b);
    }
    let bounds: Vec<(usize, usize)> = (0..threads)
        .map(|t| (t * b / threads, (t + 1) * b / threads))
        .filter(|(lo, hi)| hi > lo)
        .collect();
    let results: Vec<Result<(f64, Vec<Tensor>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(lo, hi)| s.spawn(move || chunk_fn(lo, hi)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut iter = results.into_iter();
    let (mut total, mut grads) = iter.next().expect("at least one chunk")?;
    for r in iter {
        let (v, g) = r?;
        total += v;
        for (a, b) in grads.iter_mut().zip(&g) {
            a.add_assign(b)?;
        }
    }
    Ok((total, grads))
}

enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Tensor>,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl Optimizer {
    fn new(cfg: &OptimizerConfig, params: &[&Tensor]) -> Optimizer {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        match *cfg {
            OptimizerConfig::SgdMomentum { lr, momentum } => Optimizer::Sgd {
                lr,
                momentum,
                velocity: zeros(),
            },
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        match self {
            Optimizer::Sgd { lr, momentum, velocity } => {
                for ((p, g), vel) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *vv = *momentum * *vv + gv;
                        *pv -= *lr * *vv;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), mt), vt) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mt.data_mut())
                        .zip(vt.data_mut())
                    {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub clean_error: f64,
    pub eps_multiplier: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(text: &str) -> Result<History> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_document)
            .collect::<Result<_>>()?;
        Ok(History { records })
    }
}

/// `N / (k · count_c)` for each present class `c`, with `k` present classes.
pub fn inverse_frequency_weights(ds: &Dataset) -> Vec<f64> {
    let counts = ds.class_counts();
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = ds.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect()
}

pub fn train(mut net: Network, ds: &Dataset, config: &TrainConfig) -> Result<(Network, History)> {
    config.validate()?;
    if ds.n_classes != net.n_classes() {
        return Err(Error::shape(format!(
            "dataset has {} classes, network has {} outputs",
            ds.n_classes,
            net.n_classes()
        )));
    }
    if ds.sample_shape() != net.input_shape() {
        return Err(Error::shape(format!(
            "dataset samples {:?}, network input {:?}",
            ds.sample_shape(),
            net.input_shape()
        )));
    }
    let terms = config.resolved_terms()?;
    for t in &terms {
        if let Some(p) = &t.partition {
            if p.n_classes() != net.n_classes() {
                return Err(Error::schema(
                    "partition",
                    format!("covers {} classes, network has {}", p.n_classes(), net.n_classes()),
                ));
            }
        }
    }
    let class_weights = config.sample_weights.then(|| inverse_frequency_weights(ds));
    let mut history = History::default();
    if config.epochs == 0 {
        return Ok((net, history));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut opt = Optimizer::new(&config.optimizer, &net.parameters());
    for epoch in 0..config.epochs {
        let state = config.schedule.state(epoch, config.epochs);
        let mut loss_total = 0.0;
        for (bi, batch) in batches(ds, config.batch_size, config.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let weights: Option<Vec<f64>> = class_weights
                .as_ref()
                .map(|cw| batch.labels.iter().map(|&c| cw[c]).collect());
            let norm = match &weights {
                Some(w) => w.iter().sum::<f64>(),
                None => batch.labels.len() as f64,
            };
            let (sum, mut grads) = batch_sum_and_gradients(
                &net,
                &batch.inputs,
                &batch.labels,
                weights.as_deref(),
                &terms,
                state,
                config.threads,
            )?;
            let loss = sum / norm;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            for g in &mut grads {
                *g = g.scale(1.0 / norm);
            }
            opt.step(net.parameters_mut(), &grads);
            loss_total += loss * batch.labels.len() as f64;
        }
        history.records.push(EpochRecord {
            epoch,
            mean_loss: loss_total / ds.len() as f64,
            clean_error: clean_error_network(&net, ds)?,
            eps_multiplier: state.eps_multiplier,
            kappa: state.kappa,
        });
    }
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, BlobSpec};
    use crate::network::mlp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, b: usize, d: usize, n: usize) -> (Tensor, Vec<usize>) {
        let x = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        (x, (0..b).map(|_| rng.random_range(0..n)).collect())
    }

    /// Direct log-sum-exp cross-entropy.
    fn ce(v: &[f64], y: usize) -> f64 {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - v[y]
    }

    fn two_groups() -> GroupPartition {
        GroupPartition::from_groups(&[vec![0, 2], vec![1, 3]], 4).unwrap()
    }

    #[test]
    fn robust_loss_at_zero_radius_is_natural_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init(&[5], mlp(5, &[7], 4), 2).unwrap();
        let (x, y) = batch(&mut rng, 6, 5, 4);
        let a = robust_loss(&net, &x, &y, 0.0).unwrap();
        let b = natural_loss(&net, &x, &y).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn robust_loss_grows_with_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(&[4], mlp(4, &[8, 8], 3), 5).unwrap();
        let (x, y) = batch(&mut rng, 4, 4, 3);
        let mut prev = f64::NEG_INFINITY;
        for eps in [0.0, 0.01, 0.05, 0.1, 0.3, 1.0] {
            let l = robust_loss(&net, &x, &y, eps).unwrap();
            assert!(l >= prev - 1e-12);
            prev = l;
        }
    }

    #[test]
    fn robust_loss_bounds_sampled_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::init(&[6], mlp(6, &[10], 3), 8).unwrap();
        let (x, y) = batch(&mut rng, 1, 6, 3);
        let eps = 0.05;
        let bound = robust_loss(&net, &x, &y, eps).unwrap();
        for _ in 0..100 {
            let xp: Vec<f64> = x
                .data()
                .iter()
                .map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0))
                .collect();
            let logits = net.forward(&Tensor::vector(xp)).unwrap();
            let ce = ce(logits.data(), y[0]);
            assert!(bound >= ce - 1e-9);
        }
    }

    #[test]
    fn degenerate_partitions_reduce_to_robust_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::init(&[5], mlp(5, &[6], 4), 3).unwrap();
        let (x, y) = batch(&mut rng, 5, 5, 4);
        let ln4 = 4f64.ln();
        let one = GroupPartition::single_group(4);
        let l = igrp_loss(&net, &x, &y, &one, 0.1, 0.04, false).unwrap();
        let r = robust_loss(&net, &x, &y, 0.04).unwrap();
        assert!((l - (ln4 + r)).abs() < 1e-9);
        let sing = GroupPartition::singletons(4);
        let l = igrp_loss(&net, &x, &y, &sing, 0.1, 0.04, false).unwrap();
        let r = robust_loss(&net, &x, &y, 0.1).unwrap();
        assert!((l - (ln4 + r)).abs() < 1e-9);
    }

    #[test]
    fn igrp_decomposes_into_independently_built_margin_vectors() {
        let net = Network::init(&[3], mlp(3, &[5], 4), 6).unwrap();
        let x = Tensor::vector(vec![0.2, 0.7, 0.4]);
        let p = two_groups();
        for y in 0..4 {
            let xb = x.reshape(&[1, 3]).unwrap();
            let got = igrp_loss(&net, &xb, &[y], &p, 0.08, 0.02, false).unwrap();
            let mo = crate::bounds::margin_bounds(&net, &spec_standard(y, 4).unwrap(), &x, 0.08).unwrap();
            let mi = crate::bounds::margin_bounds(&net, &spec_standard(y, 4).unwrap(), &x, 0.02).unwrap();
            let vo: Vec<f64> = (0..4)
                .map(|i| if p.same_group(i, y) { 0.0 } else { -mo.m_lower.data()[i] })
                .collect();
            let vi: Vec<f64> = (0..4)
                .map(|i| if p.same_group(i, y) && i != y { -mi.m_lower.data()[i] } else { 0.0 })
                .collect();
            let want = ce(&vo, y) + ce(&vi, y);
            assert!((got - want).abs() < 1e-12, "y={y}: {got} vs {want}");
        }
    }

    #[test]
    fn ubs_fills_masked_entries_with_upper_margins() {
        let net = Network::init(&[3], mlp(3, &[5], 4), 6).unwrap();
        let x = Tensor::vector(vec![0.9, 0.1, 0.5]);
        let p = two_groups();
        let y = 1;
        let got = igrp_loss(&net, &x.reshape(&[1, 3]).unwrap(), &[y], &p, 0.1, 0.03, true).unwrap();
        let s = spec_standard(y, 4).unwrap();
        let mo = crate::bounds::margin_bounds(&net, &s, &x, 0.1).unwrap();
        let mi = crate::bounds::margin_bounds(&net, &s, &x, 0.03).unwrap();
        let vo: Vec<f64> = (0..4)
            .map(|i| if p.same_group(i, y) { -mo.m_upper.data()[i] } else { -mo.m_lower.data()[i] })
            .collect();
        let vi: Vec<f64> = (0..4)
            .map(|i| if p.same_group(i, y) { -mi.m_lower.data()[i] } else { -mi.m_upper.data()[i] })
            .collect();
        assert_eq!(vo[y], 0.0);
        let want = ce(&vo, y) + ce(&vi, y);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn igrp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::init(&[4], mlp(4, &[6], 4), 10).unwrap();
        let (x, y) = batch(&mut rng, 3, 4, 4);
        let terms = ResolvedTerm::igrp(&two_groups(), 0.0, 0.0, false);
        let (_, grads) = value_and_gradients(&net, |t, b| {
            let r = robust_terms_rows(t, b, &x, &y, &terms, 1.0)?;
            Ok(t.sum(r))
        })
        .unwrap();
        let h = 1e-6;
        for (pi, g) in grads.iter().enumerate() {
            for k in 0..g.len() {
                let eval = |delta: f64| {
                    let mut n2 = net.clone();
                    n2.parameters_mut()[pi].data_mut()[k] += delta;
                    igrp_loss(&n2, &x, &y, &two_groups(), 0.0, 0.0, false).unwrap() * 3.0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = g.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "param {pi}[{k}]: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn mixed_objective_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::init(&[5], mlp(5, &[6], 4), 1).unwrap();
        let (x, y) = batch(&mut rng, 4, 5, 4);
        let cfg = TrainConfig::new(1, 4, 0, LossMode::Robust { eps: 0.1 });
        let nat = natural_loss(&net, &x, &y).unwrap();
        let rob = robust_loss(&net, &x, &y, 0.1).unwrap();
        let k1 = ScheduleState { eps_multiplier: 1.0, kappa: 1.0 };
        assert!((mixed_objective(&net, &x, &y, k1, &cfg).unwrap() - nat).abs() < 1e-12);
        assert!((mixed_objective(&net, &x, &y, ScheduleState::ROBUST, &cfg).unwrap() - rob).abs() < 1e-12);
        let half = ScheduleState { eps_multiplier: 1.0, kappa: 0.25 };
        let want = 0.25 * nat + 0.75 * rob;
        assert!((mixed_objective(&net, &x, &y, half, &cfg).unwrap() - want).abs() < 1e-12);
        // zero multiplier: the robust term is natural CE
        let z = ScheduleState { eps_multiplier: 0.0, kappa: 0.0 };
        assert!((mixed_objective(&net, &x, &y, z, &cfg).unwrap() - nat).abs() < 1e-12);
        let mut igrp = TrainConfig::new(1, 4, 0, LossMode::Igrp { eps_outer: 0.1, eps_inner: 0.05, ubs: false });
        igrp.partition = Some(GroupPartition::single_group(4).to_file());
        let got = mixed_objective(&net, &x, &y, z, &igrp).unwrap();
        assert!((got - (nat + 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let s = ScheduleConfig::default();
        // 15 epochs: 5 warmup, ramp round(0.4 * 10) = 4
        let st: Vec<ScheduleState> = (0..15).map(|e| s.state(e, 15)).collect();
        for e in 0..5 {
            assert_eq!(st[e].eps_multiplier, 0.0);
            assert_eq!(st[e].kappa, 1.0);
        }
        assert_eq!(st[5].eps_multiplier, 0.25);
        assert_eq!(st[6].eps_multiplier, 0.5);
        assert_eq!(st[8].eps_multiplier, 1.0);
        assert_eq!(st[8].kappa, 0.5);
        assert_eq!(st[14], st[8]);
        let z = ScheduleConfig {
            natural_warmup_epochs: 0,
            ramp_epochs: Some(0),
            kappa_start: 0.0,
            kappa_end: 0.0,
        };
        assert_eq!(z.state(0, 3), ScheduleState::ROBUST);
    }

    #[test]
    fn config_schema_errors_carry_paths() {
        let bad = r#"{"epochs": 2, "batch_size": 4, "loss": {"mode": "robust", "eps": "x"}}"#;
        match TrainConfig::from_json(bad) {
            // tagged enums are buffered, so the path stops at the enum
            Err(Error::Schema { path, message }) => {
                assert_eq!(path, "loss");
                assert!(message.contains("f64"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = r#"{"epochs": 2, "batch_size": 4, "loss": {"mode": "igrp", "eps_outer": 0.1, "eps_inner": 0.2},
                      "partition": {"n_classes": 2, "groups": [[0], [1]]}}"#;
        match TrainConfig::from_json(bad) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "loss.eps_inner"),
            other => panic!("{other:?}"),
        }
        let bad = r#"{"epochs": 2, "batch_size": 4, "loss": {"mode": "igrp", "eps_outer": 0.1, "eps_inner": 0.0}}"#;
        assert!(matches!(TrainConfig::from_json(bad), Err(Error::Schema { .. })));
        let bad = r#"{"epochs": 2, "batch_size": 4, "bogus": 1, "loss": {"mode": "natural"}}"#;
        assert!(matches!(TrainConfig::from_json(bad), Err(Error::Schema { .. })));
        let ok = r#"{"epochs": 2, "batch_size": 4, "loss": {"mode": "natural"},
                     "optimizer": {"type": "sgd_momentum", "lr": 0.1, "momentum": 0.9}}"#;
        let cfg = TrainConfig::from_json(ok).unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    fn separable_pair() -> Dataset {
        synth_blobs(&BlobSpec {
            n_classes: 2,
            input_dim: 2,
            class_centers: vec![vec![0.25, 0.3], vec![0.75, 0.7]],
            noise_stddev: 0.05,
            samples_per_class: 40,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_input_unchanged() {
        let net = Network::init(&[2], mlp(2, &[4], 2), 0).unwrap();
        let (out, h) = train(net.clone(), &separable_pair(), &TrainConfig::new(0, 8, 0, LossMode::Natural)).unwrap();
        assert_eq!(out, net);
        assert!(h.records.is_empty());
    }

    #[test]
    fn natural_training_separates_blobs_deterministically() {
        let ds = separable_pair();
        let mut cfg = TrainConfig::new(20, 8, 3, LossMode::Natural);
        cfg.optimizer = OptimizerConfig::Adam { lr: 0.02, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let net = Network::init(&[2], mlp(2, &[8], 2), 1).unwrap();
        let (a, ha) = train(net.clone(), &ds, &cfg).unwrap();
        let (b, hb) = train(net, &ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.records.len(), 20);
        assert_eq!(ha.records.last().unwrap().clean_error, 0.0);
        assert_eq!(History::from_json_lines(&ha.to_json_lines().unwrap()).unwrap(), ha);
    }

    #[test]
    fn threaded_batches_match_single_thread_closely() {
        let ds = separable_pair();
        let mut cfg = TrainConfig::new(2, 16, 3, LossMode::Robust { eps: 0.05 });
        cfg.schedule.natural_warmup_epochs = 0;
        let net = Network::init(&[2], mlp(2, &[8], 2), 1).unwrap();
        let (a, _) = train(net.clone(), &ds, &cfg).unwrap();
        cfg.threads = 3;
        let (b, _) = train(net.clone(), &ds, &cfg).unwrap();
        let (c, _) = train(net, &ds, &cfg).unwrap();
        assert_eq!(b, c);
        for (p, q) in a.parameters().iter().zip(b.parameters()) {
            for (u, v) in p.data().iter().zip(q.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let ds = separable_pair();
        let mut net = Network::init(&[2], mlp(2, &[4], 2), 0).unwrap();
        net.parameters_mut()[0].data_mut()[0] = f64::NAN;
        let err = train(net, &ds, &TrainConfig::new(1, 8, 0, LossMode::Natural)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0, .. }));
    }

    #[test]
    fn class_mismatch_is_rejected() {
        let ds = separable_pair();
        let net = Network::init(&[2], mlp(2, &[4], 3), 0).unwrap();
        assert!(train(net, &ds, &TrainConfig::new(1, 8, 0, LossMode::Natural)).is_err());
    }

    #[test]
    fn inverse_frequency_weights_balance_classes() {
        let ds = Dataset::new("t", 3, vec![1], vec![0.0; 6], vec![0, 0, 0, 0, 1, 1]).unwrap();
        let w = inverse_frequency_weights(&ds);
        assert_eq!(w, vec![0.75, 1.5, 0.0]);
        assert_eq!(4.0 * w[0], 2.0 * w[1]);
    }
}
