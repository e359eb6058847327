//! Smooth primitive operations.
//!
//! Every primitive supports three passes: plain evaluation, forward
//! propagation of input tangents (a block of directional derivatives), and a
//! reverse sweep that back-propagates both the output cotangent and a
//! cotangent on the propagated tangents. The last part is what lets a loss
//! depend on the input Jacobian, as the SNR penalty does.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DMatrixViewMut, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One-dimensional multi-channel convolution, stride 1, zero "same" padding.
///
/// Inputs and outputs are channel-major: entry `c * len + p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out][in][tap]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(invalid("convolution kernel size must be odd"));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid("convolution needs at least one channel"));
        }
        if weight.len() != out_channels * in_channels * kernel {
            return Err(Error::Dimension {
                context: "convolution weight",
                expected: out_channels * in_channels * kernel,
                got: weight.len(),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::Dimension {
                context: "convolution bias",
                expected: out_channels,
                got: bias.len(),
            });
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        })
    }

    #[inline]
    fn w(&self, o: usize, c: usize, t: usize) -> f64 {
        self.weight[(o * self.in_channels + c) * self.kernel + t]
    }

    fn len_of(&self, input_dim: usize) -> usize {
        input_dim / self.in_channels
    }

    /// Linear part only (no bias).
    fn apply(&self, a: &[f64], out: &mut [f64]) {
        let len = self.len_of(a.len());
        let pad = self.kernel / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for t in 0..self.kernel {
                    let w = self.w(o, c, t);
                    for p in 0..len {
                        let q = p + t;
                        if q >= pad && q - pad < len {
                            out[o * len + p] += w * a[c * len + q - pad];
                        }
                    }
                }
            }
        }
    }

    fn apply_transpose(&self, g: &[f64], out: &mut [f64]) {
        let len = g.len() / self.out_channels;
        let pad = self.kernel / 2;
        out.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for t in 0..self.kernel {
                    let w = self.w(o, c, t);
                    for p in 0..len {
                        let q = p + t;
                        if q >= pad && q - pad < len {
                            out[c * len + q - pad] += w * g[o * len + p];
                        }
                    }
                }
            }
        }
    }

    /// Accumulates d<g, conv(a)>/dw into `gw`.
    fn accumulate_weight_grad(&self, g: &[f64], a: &[f64], gw: &mut [f64]) {
        let len = self.len_of(a.len());
        let pad = self.kernel / 2;
        for o in 0..self.out_channels {
            for c in 0..self.in_channels {
                for t in 0..self.kernel {
                    let mut acc = 0.0;
                    for p in 0..len {
                        let q = p + t;
                        if q >= pad && q - pad < len {
                            acc += g[o * len + p] * a[c * len + q - pad];
                        }
                    }
                    gw[(o * self.in_channels + c) * self.kernel + t] += acc;
                }
            }
        }
    }
}

/// A continuously differentiable primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Affine {
        weight: DMatrix<f64>,
        bias: DVector<f64>,
    },
    Conv1d(Conv1d),
    Tanh,
    /// Exact GELU, `x * Phi(x)`.
    Gelu,
    /// Non-overlapping average pooling over each channel.
    AvgPool { channels: usize, window: usize },
    /// `e / max(1, |e| / clip)`.
    ScaleClip { clip: f64 },
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Value, first and second derivative of an elementwise activation.
fn activation(layer: &Layer, x: f64) -> (f64, f64, f64) {
    match layer {
        Layer::Tanh => {
            let s = x.tanh();
            let ds = 1.0 - s * s;
            (s, ds, -2.0 * s * ds)
        }
        Layer::Gelu => {
            let cdf = std_normal_cdf(x);
            let pdf = std_normal_pdf(x);
            (x * cdf, cdf + x * pdf, pdf * (2.0 - x * x))
        }
        _ => unreachable!("not an elementwise layer"),
    }
}

impl Layer {
    pub fn affine(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Dimension {
                context: "affine bias",
                expected: weight.nrows(),
                got: bias.len(),
            });
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        Ok(Layer::Affine { weight, bias })
    }

    pub fn scale_clip(clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip.is_finite()) {
            return Err(invalid(format!("clip norm must be positive, got {clip}")));
        }
        Ok(Layer::ScaleClip { clip })
    }

    pub fn avg_pool(channels: usize, window: usize) -> Result<Self> {
        if channels == 0 || window == 0 {
            return Err(invalid("average pool needs positive channels and window"));
        }
        Ok(Layer::AvgPool { channels, window })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Affine { .. } => "affine",
            Layer::Conv1d(_) => "conv1d",
            Layer::Tanh => "tanh",
            Layer::Gelu => "gelu",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::ScaleClip { .. } => "scale_clip",
        }
    }

    /// Output width for a given input width, validating compatibility.
    pub fn output_dim(&self, input_dim: usize) -> Result<usize> {
        match self {
            Layer::Affine { weight, .. } => {
                if weight.ncols() != input_dim {
                    return Err(Error::Dimension {
                        context: "affine input",
                        expected: weight.ncols(),
                        got: input_dim,
                    });
                }
                Ok(weight.nrows())
            }
            Layer::Conv1d(conv) => {
                if input_dim % conv.in_channels != 0 {
                    return Err(invalid(format!(
                        "convolution input width {input_dim} is not a multiple of {} channels",
                        conv.in_channels
                    )));
                }
                Ok(conv.out_channels * (input_dim / conv.in_channels))
            }
            Layer::AvgPool { channels, window } => {
                if input_dim % (channels * window) != 0 {
                    return Err(invalid(format!(
                        "pool input width {input_dim} does not split into {channels} channels of windows {window}"
                    )));
                }
                Ok(input_dim / window)
            }
            Layer::Tanh | Layer::Gelu | Layer::ScaleClip { .. } => Ok(input_dim),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Affine { weight, bias } => weight.len() + bias.len(),
            Layer::Conv1d(conv) => conv.weight.len() + conv.bias.len(),
            _ => 0,
        }
    }

    /// Named parameter blocks as `(suffix, row-major shape, flat values)`.
    /// Flat values follow the layout used by the gradient buffers.
    pub(crate) fn param_blocks(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Layer::Affine { weight, bias } => vec![
                ("weight", vec![weight.nrows(), weight.ncols()]),
                ("bias", vec![bias.len()]),
            ],
            Layer::Conv1d(conv) => vec![
                (
                    "weight",
                    vec![conv.out_channels, conv.in_channels, conv.kernel],
                ),
                ("bias", vec![conv.out_channels]),
            ],
            _ => Vec::new(),
        }
    }

    /// Copies parameters into `out`. Affine weights are stored column-major.
    pub(crate) fn read_params(&self, out: &mut [f64]) {
        match self {
            Layer::Affine { weight, bias } => {
                let n = weight.len();
                out[..n].copy_from_slice(weight.as_slice());
                out[n..].copy_from_slice(bias.as_slice());
            }
            Layer::Conv1d(conv) => {
                let n = conv.weight.len();
                out[..n].copy_from_slice(&conv.weight);
                out[n..].copy_from_slice(&conv.bias);
            }
            _ => {}
        }
    }

    pub(crate) fn write_params(&mut self, src: &[f64]) {
        match self {
            Layer::Affine { weight, bias } => {
                let n = weight.len();
                weight.as_mut_slice().copy_from_slice(&src[..n]);
                bias.as_mut_slice().copy_from_slice(&src[n..]);
            }
            Layer::Conv1d(conv) => {
                let n = conv.weight.len();
                conv.weight.copy_from_slice(&src[..n]);
                conv.bias.copy_from_slice(&src[n..]);
            }
            _ => {}
        }
    }

    pub fn forward(&self, a: &DVector<f64>) -> DVector<f64> {
        match self {
            Layer::Affine { weight, bias } => weight * a + bias,
            Layer::Conv1d(conv) => {
                let len = conv.len_of(a.len());
                let mut out = DVector::zeros(conv.out_channels * len);
                conv.apply(a.as_slice(), out.as_mut_slice());
                for o in 0..conv.out_channels {
                    for p in 0..len {
                        out[o * len + p] += conv.bias[o];
                    }
                }
                out
            }
            Layer::Tanh | Layer::Gelu => a.map(|x| activation(self, x).0),
            Layer::AvgPool { window, .. } => {
                let n = a.len() / window;
                DVector::from_iterator(
                    n,
                    (0..n).map(|j| {
                        a.rows(j * window, *window).sum() / *window as f64
                    }),
                )
            }
            Layer::ScaleClip { clip } => {
                let norm = a.norm();
                if norm <= *clip {
                    a.clone()
                } else {
                    a * (*clip / norm)
                }
            }
        }
    }

    /// Forward pass over a batch stored one sample per column.
    pub(crate) fn forward_batch(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Layer::Affine { weight, bias } => {
                let mut y = weight * a;
                for mut col in y.column_iter_mut() {
                    col += bias;
                }
                y
            }
            Layer::Tanh | Layer::Gelu => a.map(|x| activation(self, x).0),
            _ => {
                let cols: Vec<DVector<f64>> = a
                    .column_iter()
                    .map(|c| self.forward(&c.into_owned()))
                    .collect();
                DMatrix::from_columns(&cols)
            }
        }
    }

    /// First-order reverse sweep over a batch; returns input cotangents.
    pub(crate) fn backward_batch(&self, a: &DMatrix<f64>, g: &DMatrix<f64>, pgrad: &mut [f64]) -> DMatrix<f64> {
        match self {
            Layer::Affine { weight, .. } => {
                let (k, d) = weight.shape();
                let (gw, gb) = pgrad.split_at_mut(k * d);
                let mut gw = DMatrixViewMut::from_slice(gw, k, d);
                gw.gemm(1.0, g, &a.transpose(), 1.0);
                for (acc, row) in gb.iter_mut().zip(g.row_iter()) {
                    *acc += row.sum();
                }
                weight.tr_mul(g)
            }
            Layer::Tanh | Layer::Gelu => g.zip_map(a, |gv, x| gv * activation(self, x).1),
            _ => {
                let cols: Vec<DVector<f64>> = a
                    .column_iter()
                    .zip(g.column_iter())
                    .map(|(ac, gc)| {
                        self.backward(&ac.into_owned(), None, &gc.into_owned(), None, Some(&mut *pgrad))
                            .0
                    })
                    .collect();
                DMatrix::from_columns(&cols)
            }
        }
    }

    /// Jacobian of this primitive at `a`.
    pub fn local_jacobian(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let n = a.len();
        match self {
            Layer::Affine { weight, .. } => weight.clone(),
            Layer::Tanh | Layer::Gelu => {
                DMatrix::from_diagonal(&a.map(|x| activation(self, x).1))
            }
            Layer::ScaleClip { clip } => {
                let norm = a.norm();
                if norm <= *clip {
                    DMatrix::identity(n, n)
                } else {
                    let u = a / norm;
                    (DMatrix::identity(n, n) - &u * u.transpose()) * (*clip / norm)
                }
            }
            Layer::Conv1d(_) | Layer::AvgPool { .. } => {
                self.push_linear(&DMatrix::identity(n, n))
            }
        }
    }

    /// Applies the linear part of a linear layer to every column.
    fn push_linear(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Layer::Affine { weight, .. } => weight * t,
            Layer::Conv1d(conv) => {
                let out_dim = conv.out_channels * conv.len_of(t.nrows());
                let mut out = DMatrix::zeros(out_dim, t.ncols());
                for j in 0..t.ncols() {
                    conv.apply(t.column(j).as_slice(), out.column_mut(j).as_mut_slice());
                }
                out
            }
            Layer::AvgPool { window, .. } => {
                let n = t.nrows() / window;
                let mut out = DMatrix::zeros(n, t.ncols());
                for j in 0..t.ncols() {
                    for r in 0..n {
                        out[(r, j)] = t.view((r * window, j), (*window, 1)).sum() / *window as f64;
                    }
                }
                out
            }
            _ => unreachable!("not a linear layer"),
        }
    }

    fn pull_linear(&self, g: &DVector<f64>, input_dim: usize) -> DVector<f64> {
        match self {
            Layer::Affine { weight, .. } => weight.tr_mul(g),
            Layer::Conv1d(conv) => {
                let mut out = DVector::zeros(input_dim);
                conv.apply_transpose(g.as_slice(), out.as_mut_slice());
                out
            }
            Layer::AvgPool { window, .. } => DVector::from_iterator(
                input_dim,
                (0..input_dim).map(|i| g[i / window] / *window as f64),
            ),
            _ => unreachable!("not a linear layer"),
        }
    }

    fn pull_linear_matrix(&self, g: &DMatrix<f64>, input_dim: usize) -> DMatrix<f64> {
        match self {
            Layer::Affine { weight, .. } => weight.tr_mul(g),
            _ => {
                let mut out = DMatrix::zeros(input_dim, g.ncols());
                for j in 0..g.ncols() {
                    let col = self.pull_linear(&g.column(j).into_owned(), input_dim);
                    out.set_column(j, &col);
                }
                out
            }
        }
    }

    /// Propagates input tangents `t` (one per column) through the layer.
    /// `None` stands for the identity block at the map input.
    pub fn push_tangent(&self, a: &DVector<f64>, t: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let Some(t) = t else {
            return self.local_jacobian(a);
        };
        match self {
            Layer::Affine { .. } | Layer::Conv1d(_) | Layer::AvgPool { .. } => self.push_linear(t),
            Layer::Tanh | Layer::Gelu => {
                let mut out = t.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= activation(self, a[i]).1;
                }
                out
            }
            Layer::ScaleClip { clip } => {
                let norm = a.norm();
                if norm <= *clip {
                    t.clone()
                } else {
                    let u = a / norm;
                    let ut = t.tr_mul(&u).transpose();
                    (t - &u * ut) * (*clip / norm)
                }
            }
        }
    }

    /// Reverse sweep.
    ///
    /// `g_y` is the cotangent of the output, `g_t` the optional cotangent of
    /// the propagated tangents. Parameter gradients are accumulated into
    /// `pgrad` (length [`num_params`](Self::num_params)) when given. Returns the input
    /// cotangent and, when `g_t` is present, the cotangent of the input
    /// tangents.
    pub fn backward(
        &self,
        a: &DVector<f64>,
        t: Option<&DMatrix<f64>>,
        g_y: &DVector<f64>,
        g_t: Option<&DMatrix<f64>>,
        pgrad: Option<&mut [f64]>,
    ) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let n = a.len();
        let identity;
        let t = match (t, g_t.is_some()) {
            (Some(t), _) => Some(t),
            (None, true) => {
                identity = DMatrix::identity(n, n);
                Some(&identity)
            }
            (None, false) => None,
        };
        match self {
            Layer::Affine { weight, .. } => {
                let (k, d) = weight.shape();
                let g_a = weight.tr_mul(g_y);
                let g_t_in = match (g_t, t) {
                    (Some(g_t), Some(_)) => Some(weight.tr_mul(g_t)),
                    _ => None,
                };
                if let Some(pgrad) = pgrad {
                    let (gw, gb) = pgrad.split_at_mut(k * d);
                    let mut gw = DMatrixViewMut::from_slice(gw, k, d);
                    gw.ger(1.0, g_y, a, 1.0);
                    for (acc, g) in gb.iter_mut().zip(g_y.iter()) {
                        *acc += g;
                    }
                    if let (Some(g_t), Some(t)) = (g_t, t) {
                        gw.gemm(1.0, g_t, &t.transpose(), 1.0);
                    }
                }
                (g_a, g_t_in)
            }
            Layer::Conv1d(conv) => {
                if let Some(pgrad) = pgrad {
                    let (gw, gb) = pgrad.split_at_mut(conv.weight.len());
                    conv.accumulate_weight_grad(g_y.as_slice(), a.as_slice(), gw);
                    let len = g_y.len() / conv.out_channels;
                    for o in 0..conv.out_channels {
                        gb[o] += g_y.rows(o * len, len).sum();
                    }
                    if let (Some(g_t), Some(t)) = (g_t, t) {
                        for j in 0..t.ncols() {
                            conv.accumulate_weight_grad(
                                g_t.column(j).as_slice(),
                                t.column(j).as_slice(),
                                gw,
                            );
                        }
                    }
                }
                let g_a = self.pull_linear(g_y, n);
                let g_t_in = g_t.map(|g_t| self.pull_linear_matrix(g_t, n));
                (g_a, g_t_in)
            }
            Layer::AvgPool { .. } => {
                let g_a = self.pull_linear(g_y, n);
                let g_t_in = g_t.map(|g_t| self.pull_linear_matrix(g_t, n));
                (g_a, g_t_in)
            }
            Layer::Tanh | Layer::Gelu => {
                let derivs: Vec<(f64, f64)> = a
                    .iter()
                    .map(|&x| {
                        let (_, d1, d2) = activation(self, x);
                        (d1, d2)
                    })
                    .collect();
                let mut g_a = DVector::from_iterator(n, (0..n).map(|i| derivs[i].0 * g_y[i]));
                let g_t_in = match (g_t, t) {
                    (Some(g_t), Some(t)) => {
                        let mut g_in = g_t.clone();
                        for i in 0..n {
                            let contraction = g_t.row(i).dot(&t.row(i));
                            g_a[i] += derivs[i].1 * contraction;
                            let mut row = g_in.row_mut(i);
                            row *= derivs[i].0;
                        }
                        Some(g_in)
                    }
                    _ => None,
                };
                (g_a, g_t_in)
            }
            Layer::ScaleClip { clip } => {
                let norm = a.norm();
                if norm <= *clip {
                    return (g_y.clone(), g_t.cloned());
                }
                let scale = *clip / norm;
                let u = a / norm;
                let project = |v: DVector<f64>| {
                    let c = u.dot(&v);
                    v - &u * c
                };
                let mut g_a = project(g_y.clone()) * scale;
                let g_t_in = match (g_t, t) {
                    (Some(g_t), Some(t)) => {
                        // S = (C/n) (tr(A) - u'Au) with A = G_T T'.
                        let tu = t.tr_mul(&u);
                        let gu = g_t.tr_mul(&u);
                        let au = g_t * &tu;
                        let atu = t * &gu;
                        let trace_a = g_t.dot(t);
                        let uau = gu.dot(&tu);
                        let sym = (au + atu) * 0.5;
                        g_a -= &u * (*clip / (norm * norm) * (trace_a - uau));
                        g_a -= project(sym) * (2.0 * *clip / (norm * norm));
                        let ug = g_t.tr_mul(&u).transpose();
                        Some((g_t - &u * ug) * scale)
                    }
                    _ => None,
                };
                (g_a, g_t_in)
            }
        }
    }
}
