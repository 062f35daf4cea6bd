//! Independent reference implementations used by the property and
//! acceptance suites.
#![allow(dead_code)]

use avt::bounds::propagate_intervals;
use avt::network::{mlp, LayerSpec, Network};
use avt::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cross-entropy straight from the definition.
pub fn ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - logits[y]
}

/// `f_y - f_i` for every `i`.
pub fn margins(logits: &[f64], y: usize) -> Vec<f64> {
    logits.iter().map(|v| logits[y] - v).collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// A point of the clipped box around `x`, drawn uniformly.
pub fn in_ball(rng: &mut ChaCha8Rng, x: &[f64], eps: f64) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let (lo, hi) = ((v - eps).max(0.0), (v + eps).min(1.0));
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        })
        .collect()
}

/// Every corner of the clipped box around `x`.
pub fn corners(x: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    (0..1u32 << d)
        .map(|mask| {
            (0..d)
                .map(|k| {
                    if mask >> k & 1 == 1 {
                        (x[k] + eps).min(1.0)
                    } else {
                        (x[k] - eps).max(0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Random MLP (1-3 dense layers, widths <= 16) or a small conv net.
pub fn random_net(rng: &mut ChaCha8Rng, n_classes: usize) -> (Network, Vec<usize>) {
    let seed = rng.random_range(0..u64::MAX);
    if rng.random_range(0..5) == 0 {
        let layers = vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 32,
                out_dim: n_classes,
            },
        ];
        return (Network::init(&[1, 4, 4], layers, seed).unwrap(), vec![1, 4, 4]);
    }
    let d = rng.random_range(2..=8);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=16)).collect();
    (Network::init(&[d], mlp(d, &hidden, n_classes), seed).unwrap(), vec![d])
}

/// Smallest |pre-activation| over every ReLU input, for the clean point and
/// for both interval endpoints at each radius. Finite differences are only
/// meaningful when this is well above the step size.
pub fn relu_gap(net: &Network, x: &Tensor, radii: &[f64]) -> f64 {
    let mut gap = f64::INFINITY;
    for &eps in std::iter::once(&0.0).chain(radii) {
        let ia = propagate_intervals(net, x, eps).unwrap();
        for (i, layer) in net.layers().iter().enumerate() {
            if matches!(layer, LayerSpec::Relu) {
                let (lo, hi) = if i == 0 { &ia.input } else { &ia.layers[i - 1] };
                for v in lo.data().iter().chain(hi.data()) {
                    gap = gap.min(v.abs());
                }
            }
        }
    }
    gap
}

/// Central-difference check of `grads` against `f`, returning the worst
/// relative error `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn worst_fd_error(net: &Network, grads: &[Tensor], h: f64, f: impl Fn(&Network) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |delta: f64| {
                let mut n2 = net.clone();
                n2.parameters_mut()[pi].data_mut()[k] += delta;
                f(&n2)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

/// Brute-force average linkage: all cluster pairs re-scored from raw rows at
/// every step; ties go to the lexicographically smallest (min A, min B).
/// Returns `(members A, members B, distance)` per merge.
pub fn brute_force_average_linkage(rows: &[Vec<f64>]) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut clusters: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
    let mut out = vec![];
    while clusters.len() > 1 {
        clusters.sort_by_key(|c| c[0]);
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += dist(&rows[i], &rows[j]);
                    }
                }
                let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < bd || (d == bd && (clusters[a][0], clusters[b][0]) < (clusters[ba][0], clusters[bb][0]))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.unwrap();
        let cb = clusters.remove(b);
        let ca = clusters.remove(a);
        let mut merged = ca.clone();
        merged.extend(&cb);
        merged.sort_unstable();
        out.push((ca, cb, d));
        clusters.push(merged);
    }
    out
}

/// Central differences over every parameter, returned flat in `grads` order.
pub fn fd_gradient(net: &Network, grads: &[Tensor], h: f64, f: impl Fn(&Network) -> f64) -> Vec<f64> {
    let mut out = vec![];
    for (pi, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let eval = |delta: f64| {
                let mut n2 = net.clone();
                n2.parameters_mut()[pi].data_mut()[k] += delta;
                f(&n2)
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)` over the whole gradient vector.
pub fn vector_relative_error(grads: &[Tensor], fd: &[f64]) -> f64 {
    let a: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(fd).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut fd.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
