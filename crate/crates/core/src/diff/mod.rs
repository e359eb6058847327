//! Differentiable core: composable smooth maps with exact input Jacobians and
//! parameter gradients.

mod layer;
pub(crate) mod loss;
pub mod optim;

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, invalid, Error, Result};
use crate::tensor::Tensor;

pub use layer::{Conv1d, Layer};
pub use loss::{loss_gradient, Loss, LossGradient, LossTerm, SoftmaxCrossEntropy, SquaredError};

/// Location of one named parameter block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// An ordered stack of smooth primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothMap {
    input_dim: usize,
    layers: Vec<Layer>,
    /// `dims[i]` is the input width of layer `i`; the last entry is the output width.
    dims: Vec<usize>,
}

/// Activations (and optionally tangents) recorded by a forward pass, consumed
/// by [`SmoothMap::backprop`].
#[derive(Debug, Clone)]
pub struct Traced {
    inputs: Vec<DVector<f64>>,
    tangents: Vec<Option<DMatrix<f64>>>,
    pub output: DVector<f64>,
    /// Jacobian of the output w.r.t. the map input, when requested.
    pub jacobian: Option<DMatrix<f64>>,
}

/// Activation used by [`SmoothMap::mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl SmoothMap {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(invalid("input dimension must be positive"));
        }
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(input_dim);
        for layer in &layers {
            let next = layer.output_dim(*dims.last().unwrap())?;
            dims.push(next);
        }
        Ok(Self {
            input_dim,
            layers,
            dims,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::new(d, Vec::new())
    }

    /// `x -> weight * x + bias`; a zero bias when `bias` is `None`.
    pub fn affine(weight: DMatrix<f64>, bias: Option<DVector<f64>>) -> Result<Self> {
        let d = weight.ncols();
        let bias = bias.unwrap_or_else(|| DVector::zeros(weight.nrows()));
        Self::new(d, vec![Layer::affine(weight, bias)?])
    }

    /// Fully connected network with `sizes = [in, h1, ..., out]`, the given
    /// activation between affine layers and a linear output layer.
    /// Weights are drawn with variance `1 / fan_in`, biases start at zero.
    pub fn mlp<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(invalid("an MLP needs at least input and output sizes"));
        }
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid normal");
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(rng));
            layers.push(Layer::affine(weight, DVector::zeros(fan_out))?);
            if i + 2 < sizes.len() {
                layers.push(match activation {
                    Activation::Tanh => Layer::Tanh,
                    Activation::Gelu => Layer::Gelu,
                });
            }
        }
        Self::new(sizes[0], layers)
    }

    /// Appends a primitive.
    pub fn push(mut self, layer: Layer) -> Result<Self> {
        let next = layer.output_dim(self.output_dim())?;
        self.layers.push(layer);
        self.dims.push(next);
        Ok(self)
    }

    /// `other ∘ self`.
    pub fn then(self, other: &SmoothMap) -> Result<Self> {
        ensure_dim("composition", self.output_dim(), other.input_dim)?;
        let mut layers = self.layers;
        layers.extend(other.layers.iter().cloned());
        Self::new(self.input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Width after each layer (index 0 is the input).
    pub fn widths(&self) -> &[usize] {
        &self.dims
    }

    pub fn evaluate(&self, x: &Tensor) -> Result<Tensor> {
        Tensor::from_dvector(self.eval_vec(&x.to_dvector())?)
    }

    pub fn eval_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("map input", self.input_dim, x.len())?;
        let out = self
            .layers
            .iter()
            .fold(x.clone(), |a, layer| layer.forward(&a));
        Ok(out)
    }

    /// `∂ output_i / ∂ x_j` at `x`, a `k × d` matrix.
    pub fn jacobian(&self, x: &Tensor) -> Result<DMatrix<f64>> {
        self.jacobian_vec(&x.to_dvector())
    }

    pub fn jacobian_vec(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        ensure_dim("map input", self.input_dim, x.len())?;
        let mut a = x.clone();
        let mut t: Option<DMatrix<f64>> = None;
        for layer in &self.layers {
            t = Some(layer.push_tangent(&a, t.as_ref()));
            a = layer.forward(&a);
        }
        Ok(t.unwrap_or_else(|| DMatrix::identity(self.input_dim, self.input_dim)))
    }

    /// Forward pass that records what [`backprop`](Self::backprop) needs.
    /// With `with_jacobian`, the input Jacobian is propagated alongside.
    pub fn trace(&self, x: &DVector<f64>, with_jacobian: bool) -> Result<Traced> {
        ensure_dim("map input", self.input_dim, x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut tangents = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        let mut t: Option<DMatrix<f64>> = None;
        for layer in &self.layers {
            let next_t = with_jacobian.then(|| layer.push_tangent(&a, t.as_ref()));
            let next_a = layer.forward(&a);
            inputs.push(a);
            tangents.push(t);
            a = next_a;
            t = next_t;
        }
        let jacobian = with_jacobian
            .then(|| t.unwrap_or_else(|| DMatrix::identity(self.input_dim, self.input_dim)));
        Ok(Traced {
            inputs,
            tangents,
            output: a,
            jacobian,
        })
    }

    /// Reverse sweep over a recorded pass. Accumulates parameter gradients
    /// into `pgrad` (length [`num_params`](Self::num_params)) and returns the
    /// gradient with respect to the map input.
    ///
    /// `g_jacobian`, the cotangent of the input Jacobian, requires the trace
    /// to have been recorded with `with_jacobian`.
    pub fn backprop(
        &self,
        traced: &Traced,
        g_output: &DVector<f64>,
        g_jacobian: Option<&DMatrix<f64>>,
        pgrad: &mut [f64],
    ) -> Result<DVector<f64>> {
        ensure_dim("output cotangent", self.output_dim(), g_output.len())?;
        ensure_dim("parameter gradient", self.num_params(), pgrad.len())?;
        if g_jacobian.is_some() && traced.jacobian.is_none() {
            return Err(invalid("Jacobian cotangent given for a trace recorded without tangents"));
        }
        Ok(self.sweep(traced, g_output, g_jacobian, Some(pgrad)))
    }

    /// Gradient with respect to the map input only.
    pub fn input_gradient(&self, traced: &Traced, g_output: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("output cotangent", self.output_dim(), g_output.len())?;
        Ok(self.sweep(traced, g_output, None, None))
    }

    fn sweep(
        &self,
        traced: &Traced,
        g_output: &DVector<f64>,
        g_jacobian: Option<&DMatrix<f64>>,
        mut pgrad: Option<&mut [f64]>,
    ) -> DVector<f64> {
        let mut g_a = g_output.clone();
        let mut g_t = g_jacobian.cloned();
        let offsets = self.param_offsets();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = pgrad
                .as_deref_mut()
                .map(|p| &mut p[offsets[i]..offsets[i] + layer.num_params()]);
            let (next_a, next_t) = layer.backward(
                &traced.inputs[i],
                traced.tangents[i].as_ref(),
                &g_a,
                g_t.as_ref(),
                slot,
            );
            g_a = next_a;
            g_t = next_t;
        }
        g_a
    }

    /// Evaluates a batch (one sample per column), keeping the layer inputs
    /// for [`backprop_batch`](Self::backprop_batch).
    pub(crate) fn forward_batch(&self, x: DMatrix<f64>) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
        ensure_dim("map input", self.input_dim, x.nrows())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x;
        for layer in &self.layers {
            let next = layer.forward_batch(&a);
            inputs.push(a);
            a = next;
        }
        Ok((inputs, a))
    }

    pub(crate) fn backprop_batch(
        &self,
        inputs: &[DMatrix<f64>],
        g_output: DMatrix<f64>,
        pgrad: &mut [f64],
    ) -> DMatrix<f64> {
        let offsets = self.param_offsets();
        let mut g = g_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let slot = &mut pgrad[offsets[i]..offsets[i] + layer.num_params()];
            g = layer.backward_batch(&inputs[i], &g, slot);
        }
        g
    }

    /// Evaluates many inputs at once.
    pub fn eval_many(&self, xs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let (_, out) = self.forward_batch(DMatrix::from_columns(xs))?;
        Ok(out.column_iter().map(|c| c.into_owned()).collect())
    }

    fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_params();
        }
        offsets
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Named blocks `"{layer}.weight"` / `"{layer}.bias"` in flat order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, shape) in layer.param_blocks() {
                let len = shape.iter().product();
                out.push(ParamInfo {
                    name: format!("{i}.{suffix}"),
                    shape,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        out
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        for (layer, off) in self.layers.iter().zip(self.param_offsets()) {
            layer.read_params(&mut out[off..off + layer.num_params()]);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim("parameter vector", self.num_params(), params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter update".into()));
        }
        let offsets = self.param_offsets();
        for (layer, off) in self.layers.iter_mut().zip(offsets) {
            let n = layer.num_params();
            layer.write_params(&params[off..off + n]);
        }
        Ok(())
    }

    /// Parameters as named row-major tensors.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        named_blocks(&self.param_layout(), &self.params_flat())
    }

    /// Hash of the exact parameter bits and architecture.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dims.hash(&mut h);
        for layer in &self.layers {
            layer.name().hash(&mut h);
        }
        for v in self.params_flat() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Splits a flat buffer into named row-major tensors following `layout`.
/// Affine weights are stored column-major in flat buffers and transposed here.
pub(crate) fn named_blocks(layout: &[ParamInfo], flat: &[f64]) -> Vec<(String, Tensor)> {
    layout
        .iter()
        .map(|info| {
            let block = &flat[info.offset..info.offset + info.len];
            let data = if info.name.ends_with(".weight") && info.shape.len() == 2 {
                let (rows, cols) = (info.shape[0], info.shape[1]);
                DMatrix::from_column_slice(rows, cols, block)
                    .transpose()
                    .as_slice()
                    .to_vec()
            } else {
                block.to_vec()
            };
            let tensor = Tensor::new(info.shape.clone(), data).expect("finite parameters");
            (info.name.clone(), tensor)
        })
        .collect()
}
