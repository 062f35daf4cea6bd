//! Dense row-major `f64` tensors and the primitive kernels the tape records.
//!
//! Every kernel here is a plain function over [`Tensor`] values. The autodiff
//! tape in [`crate::autodiff`] calls the same kernels for its forward pass and
//! for the adjoint computations, so there is exactly one implementation of
//! each piece of arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected a single value, tensor has shape {:?}",
                self.shape
            )))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self, other, "elementwise")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        same_shape(self, other, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Adds `bias[n]` to every row of `x[m, n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "add_row_bias")?;
    if bias.shape != [n] {
        return Err(Error::shape(format!(
            "bias {:?} does not match row width {n}",
            bias.shape
        )));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Column sums of a matrix: the adjoint of [`add_row_bias`] w.r.t. the bias.
pub fn column_sums(x: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "column_sums")?;
    let mut out = vec![0.0; n];
    for row in x.data.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::vector(out))
}

/// `out[b, i] = sum_j w[b, i, j] * x[b, j]`.
pub fn batched_matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (bsz, m, k) = match w.shape.as_slice() {
        &[b, m, k] => (b, m, k),
        s => return Err(Error::shape(format!("batched_matvec weights: {s:?}"))),
    };
    if x.shape != [bsz, k] {
        return Err(Error::shape(format!(
            "batched_matvec: weights {:?} vs vectors {:?}",
            w.shape, x.shape
        )));
    }
    let mut out = vec![0.0; bsz * m];
    for b in 0..bsz {
        let xv = &x.data[b * k..(b + 1) * k];
        for i in 0..m {
            let wr = &w.data[(b * m + i) * k..(b * m + i + 1) * k];
            out[b * m + i] = wr.iter().zip(xv).map(|(a, c)| a * c).sum();
        }
    }
    Tensor::new(vec![bsz, m], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
}

/// Stable `log(sum(exp(z)))`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of one logit vector against a class index.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    if logits.rank() != 1 || logits.len() < 2 {
        return Err(Error::shape(format!(
            "cross-entropy needs a vector of at least 2 logits, got {:?}",
            logits.shape
        )));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(&logits.data) - logits.data[target])
}

/// Output geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [c, h, w] = input;
        let [f, kc, kh, kw] = kernel;
        if kc != c {
            return Err(Error::shape(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("stride and kernel sizes must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.filters, self.out_h, self.out_w]
    }

    /// Visits every (output position, kernel tap) pair that lands inside the
    /// unpadded input, passing flat offsets `(input_idx, kernel_idx, output_idx)`
    /// relative to one sample and one filter/channel pair.
    #[inline]
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let (h, w, p, s) = (
            self.height as isize,
            self.width as isize,
            self.padding as isize,
            self.stride as isize,
        );
        for oh in 0..self.out_h {
            for ow in 0..self.out_w {
                let out_idx = oh * self.out_w + ow;
                for i in 0..self.kernel_h {
                    let ih = oh as isize * s + i as isize - p;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    for j in 0..self.kernel_w {
                        let iw = ow as isize * s + j as isize - p;
                        if iw < 0 || iw >= w {
                            continue;
                        }
                        visit(
                            (ih * w + iw) as usize,
                            i * self.kernel_w + j,
                            out_idx,
                        );
                    }
                }
            }
        }
    }
}

fn conv_geometry_batch(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, ConvGeometry)> {
    let (n, c, h, w) = match input.shape.as_slice() {
        &[n, c, h, w] => (n, c, h, w),
        s => return Err(Error::shape(format!("conv input must be [N,C,H,W], got {s:?}"))),
    };
    let k: [usize; 4] = kernels
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::shape(format!("kernels must be [F,C,kh,kw], got {:?}", kernels.shape)))?;
    Ok((n, ConvGeometry::new([c, h, w], k, stride, padding)?))
}

/// Batched cross-correlation over `[N, C, H, W]` inputs. `bias` may be omitted
/// (used when propagating interval radii).
pub fn conv2d_batch(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, g) = conv_geometry_batch(input, kernels, stride, padding)?;
    if let Some(b) = bias {
        if b.shape != [g.filters] {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {} filters",
                b.shape, g.filters
            )));
        }
    }
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kernel_h * g.kernel_w;
    let mut out = vec![0.0; n * g.filters * out_plane];
    for s in 0..n {
        for f in 0..g.filters {
            let o = &mut out[(s * g.filters + f) * out_plane..(s * g.filters + f + 1) * out_plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b.data[f]);
            }
            for c in 0..g.in_channels {
                let x = &input.data[(s * g.in_channels + c) * in_plane..][..in_plane];
                let k = &kernels.data[(f * g.in_channels + c) * k_plane..][..k_plane];
                g.for_each_tap(|xi, ki, oi| o[oi] += k[ki] * x[xi]);
            }
        }
    }
    Tensor::new(vec![n, g.filters, g.out_h, g.out_w], out)
}

/// Adjoints of [`conv2d_batch`]: returns `(d_input, d_kernels, d_bias)` for an
/// upstream gradient `grad` of the output's shape.
pub fn conv2d_batch_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad: &Tensor,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, g) = conv_geometry_batch(input, kernels, stride, padding)?;
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let k_plane = g.kernel_h * g.kernel_w;
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let mut d_kernels = vec![0.0; kernels.len()];
    let mut d_bias = vec![0.0; g.filters];
    for s in 0..n {
        for f in 0..g.filters {
            let go = &grad.data[(s * g.filters + f) * out_plane..][..out_plane];
            d_bias[f] += go.iter().sum::<f64>();
            for c in 0..g.in_channels {
                let x = &input.data[(s * g.in_channels + c) * in_plane..][..in_plane];
                let koff = (f * g.in_channels + c) * k_plane;
                let dk = &mut d_kernels[koff..koff + k_plane];
                g.for_each_tap(|xi, ki, oi| dk[ki] += x[xi] * go[oi]);
                if let Some(dx) = d_input.as_mut() {
                    let k = &kernels.data[koff..koff + k_plane];
                    let dx = &mut dx[(s * g.in_channels + c) * in_plane..][..in_plane];
                    g.for_each_tap(|xi, ki, oi| dx[xi] += k[ki] * go[oi]);
                }
            }
        }
    }
    Ok((
        d_input.map(|d| Tensor::new(input.shape.clone(), d)).transpose()?,
        Tensor::new(kernels.shape.clone(), d_kernels)?,
        Tensor::vector(d_bias),
    ))
}

/// Single-image cross-correlation plus bias: `input[C,H,W]`, `kernels[F,C,kh,kw]`.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let mut shape = vec![1];
    if input.rank() != 3 {
        return Err(Error::shape(format!("conv2d input must be [C,H,W], got {:?}", input.shape)));
    }
    shape.extend_from_slice(&input.shape);
    let out = conv2d_batch(&input.reshape(&shape)?, kernels, Some(bias), stride, padding)?;
    let out_shape = out.shape[1..].to_vec();
    out.reshape(&out_shape)
}
