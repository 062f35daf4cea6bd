//! Interval bound propagation over ℓ∞ balls intersected with the `[0, 1]`
//! input domain, and margin bounds for a specification matrix.
//!
//! Affine layers propagate intervals in center/radius form
//! (`μ' = Wμ + b`, `r' = |W| r`); ReLU is applied to both endpoints. The
//! specification matrix is always folded into the final dense layer before
//! its bound step, so margin rows are bounded directly rather than through
//! logit intervals.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::groups::SpecMatrix;
use crate::network::{BoundNetwork, LayerSpec, Network};
use crate::tensor::Tensor;

/// Per-layer interval bounds for one sample.
#[derive(Clone, Debug)]
pub struct IntervalActivations {
    pub input: (Tensor, Tensor),
    /// `(lower, upper)` after each layer, in layer order.
    pub layers: Vec<(Tensor, Tensor)>,
}

/// Certified lower and upper bounds on `C f(x')` over the perturbation set.
#[derive(Clone, Debug)]
pub struct MarginBounds {
    pub m_lower: Tensor,
    pub m_upper: Tensor,
    pub spec: SpecMatrix,
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Robust,
    NotCertified,
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::invalid(format!("perturbation radius must be >= 0, got {eps}")));
    }
    Ok(())
}

/// `[max(x - eps, 0), min(x + eps, 1)]`, elementwise.
pub fn input_box(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    check_eps(eps)?;
    Ok((
        x.map(|v| (v - eps).max(0.0)),
        x.map(|v| (v + eps).min(1.0)),
    ))
}

fn center_radius(tape: &mut Tape, lo: Var, hi: Var) -> Result<(Var, Var)> {
    let s = tape.add(lo, hi)?;
    let mu = tape.scale(s, 0.5);
    let d = tape.sub(hi, lo)?;
    let r = tape.scale(d, 0.5);
    Ok((mu, r))
}

fn endpoints(tape: &mut Tape, mu: Var, r: Var) -> Result<(Var, Var)> {
    Ok((tape.sub(mu, r)?, tape.add(mu, r)?))
}

/// Bounds after layer `i` given bounds on its input.
pub fn interval_step(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    i: usize,
    lo: Var,
    hi: Var,
) -> Result<(Var, Var)> {
    match &net.network().layers()[i] {
        LayerSpec::Dense { .. } => {
            let (w, _) = net.layer_vars(i).expect("dense layer has parameters");
            let (mu, r) = center_radius(tape, lo, hi)?;
            let mu = net.apply_layer(tape, i, mu)?;
            let aw = tape.abs(w);
            let awt = tape.transpose(aw)?;
            let r = tape.matmul(r, awt)?;
            endpoints(tape, mu, r)
        }
        LayerSpec::Conv2d {
            stride, padding, ..
        } => {
            let (k, _) = net.layer_vars(i).expect("conv layer has parameters");
            let (mu, r) = center_radius(tape, lo, hi)?;
            let mu = net.apply_layer(tape, i, mu)?;
            let ak = tape.abs(k);
            let r = tape.conv2d(r, ak, None, *stride, *padding)?;
            endpoints(tape, mu, r)
        }
        LayerSpec::FixedAffine { scale, .. } => {
            let (mu, r) = center_radius(tape, lo, hi)?;
            let mu = net.apply_layer(tape, i, mu)?;
            let abs_scale: Vec<f64> = scale.iter().map(|s| s.abs()).collect();
            let r = tape.channel_affine(r, &abs_scale, &[0.0])?;
            endpoints(tape, mu, r)
        }
        LayerSpec::Relu | LayerSpec::Flatten => Ok((
            net.apply_layer(tape, i, lo)?,
            net.apply_layer(tape, i, hi)?,
        )),
    }
}

/// Interval bounds on the input of the final dense layer for a batch.
pub fn penultimate_intervals(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    x: &Tensor,
    eps: f64,
) -> Result<(Var, Var)> {
    let (lo, hi) = input_box(x, eps)?;
    let mut lo = tape.constant(lo);
    let mut hi = tape.constant(hi);
    let n_layers = net.network().layers().len();
    for i in 0..n_layers - 1 {
        (lo, hi) = interval_step(tape, net, i, lo, hi)?;
    }
    Ok((lo, hi))
}

/// Margin bounds `[B, n]` from penultimate intervals with one specification
/// matrix per sample folded into the final dense layer.
pub fn elided_margins(
    tape: &mut Tape,
    net: &BoundNetwork<'_>,
    lo: Var,
    hi: Var,
    specs: &[&SpecMatrix],
) -> Result<(Var, Var)> {
    let last = net.network().layers().len() - 1;
    let (w, b) = match net.layer_vars(last) {
        Some(v) if matches!(net.network().layers()[last], LayerSpec::Dense { .. }) => v,
        _ => return Err(Error::shape("margin bounds need a dense final layer")),
    };
    let n = net.network().n_classes();
    let batch = specs.len();
    let lo_shape = tape.value(lo).shape().to_vec();
    if lo_shape.len() != 2 || lo_shape[0] != batch {
        return Err(Error::shape(format!(
            "{batch} specification matrices for penultimate bounds {lo_shape:?}"
        )));
    }
    let d = lo_shape[1];
    let mut stacked = Vec::with_capacity(batch * n * n);
    for s in specs {
        if s.n() != n {
            return Err(Error::shape(format!(
                "specification is {}x{0}, network has {n} outputs",
                s.n()
            )));
        }
        stacked.extend(s.entries().iter().map(|&v| f64::from(v)));
    }
    let c = tape.constant(Tensor::new(vec![batch * n, n], stacked)?);
    let w_eff = tape.matmul(c, w)?;
    let w_eff = tape.reshape(w_eff, &[batch, n, d])?;
    let b_col = tape.reshape(b, &[n, 1])?;
    let b_eff = tape.matmul(c, b_col)?;
    let b_eff = tape.reshape(b_eff, &[batch, n])?;

    let (mu, r) = center_radius(tape, lo, hi)?;
    let center = tape.batched_matvec(w_eff, mu)?;
    let center = tape.add(center, b_eff)?;
    let aw = tape.abs(w_eff);
    let radius = tape.batched_matvec(aw, r)?;
    endpoints(tape, center, radius)
}

/// Interval bounds at every layer for one sample.
pub fn propagate_intervals(net: &Network, x: &Tensor, eps: f64) -> Result<IntervalActivations> {
    check_eps(eps)?;
    if x.shape() != net.input_shape() {
        return Err(Error::shape(format!(
            "input {:?} does not match {:?}",
            x.shape(),
            net.input_shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let xb = x.reshape(&shape)?;
    let input = input_box(x, eps)?;
    let (lo0, hi0) = input_box(&xb, eps)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let mut lo = tape.constant(lo0);
    let mut hi = tape.constant(hi0);
    let mut layers = Vec::with_capacity(net.layers().len());
    for i in 0..net.layers().len() {
        (lo, hi) = interval_step(&mut tape, &bound, i, lo, hi)?;
        let unbatch = |t: &Tensor| t.reshape(&t.shape()[1..]).expect("batch of one");
        layers.push((unbatch(tape.value(lo)), unbatch(tape.value(hi))));
    }
    Ok(IntervalActivations { input, layers })
}

/// Margin bounds for a batch of samples, one specification matrix each.
/// Returns `(m_lower, m_upper)`, each `[B, n]`.
pub fn margin_bounds_batch(
    net: &Network,
    x: &Tensor,
    specs: &[&SpecMatrix],
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let (lo, hi) = penultimate_intervals(&mut tape, &bound, x, eps)?;
    let (ml, mu) = elided_margins(&mut tape, &bound, lo, hi, specs)?;
    Ok((tape.value(ml).clone(), tape.value(mu).clone()))
}

pub fn margin_bounds(net: &Network, spec: &SpecMatrix, x: &Tensor, eps: f64) -> Result<MarginBounds> {
    if x.shape() != net.input_shape() {
        return Err(Error::shape(format!(
            "input {:?} does not match {:?}",
            x.shape(),
            net.input_shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let (lo, hi) = margin_bounds_batch(net, &x.reshape(&shape)?, &[spec], eps)?;
    let n = net.n_classes();
    Ok(MarginBounds {
        m_lower: lo.reshape(&[n])?,
        m_upper: hi.reshape(&[n])?,
        spec: spec.clone(),
        eps,
    })
}

/// Robust iff every active row's lower margin is strictly positive.
pub fn verdict_from_lower(spec: &SpecMatrix, m_lower: &[f64]) -> Verdict {
    if spec.active_rows().iter().all(|&i| m_lower[i] > 0.0) {
        Verdict::Robust
    } else {
        Verdict::NotCertified
    }
}

pub fn verify_sample(net: &Network, x: &Tensor, y: usize, eps: f64, spec: &SpecMatrix) -> Result<Verdict> {
    if spec.label() != y {
        return Err(Error::invalid(format!(
            "specification built for label {}, sample label is {y}",
            spec.label()
        )));
    }
    let mb = margin_bounds(net, spec, x, eps)?;
    Ok(verdict_from_lower(spec, mb.m_lower.data()))
}
