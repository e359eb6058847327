use nalgebra::{DMatrix, DVector};

use super::{named_blocks, ParamInfo, SmoothMap};
use crate::error::{ensure_dim, invalid, Error, Result};
use crate::tensor::Tensor;

/// Per-sample loss contribution and its cotangents.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    pub grad_output: DVector<f64>,
    /// Cotangent of the input Jacobian, for losses that depend on it.
    pub grad_jacobian: Option<DMatrix<f64>>,
}

/// A scalar loss on map outputs, evaluated sample by sample.
pub trait Loss {
    /// Whether [`evaluate`](Self::evaluate) wants the input Jacobian.
    fn uses_jacobian(&self) -> bool {
        false
    }

    fn evaluate(&self, index: usize, output: &DVector<f64>, jacobian: Option<&DMatrix<f64>>) -> LossTerm;
}

/// `|y - target|^2` (not halved).
pub struct SquaredError<'a> {
    pub targets: &'a [DVector<f64>],
}

impl Loss for SquaredError<'_> {
    fn evaluate(&self, index: usize, output: &DVector<f64>, _: Option<&DMatrix<f64>>) -> LossTerm {
        let r = output - &self.targets[index];
        LossTerm {
            value: r.norm_squared(),
            grad_output: r * 2.0,
            grad_jacobian: None,
        }
    }
}

/// Softmax cross-entropy against integer class labels.
pub struct SoftmaxCrossEntropy<'a> {
    pub labels: &'a [usize],
}

pub(crate) fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exp = logits.map(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

impl Loss for SoftmaxCrossEntropy<'_> {
    fn evaluate(&self, index: usize, output: &DVector<f64>, _: Option<&DMatrix<f64>>) -> LossTerm {
        let label = self.labels[index];
        let mut p = softmax(output);
        let value = -p[label].max(f64::MIN_POSITIVE).ln();
        p[label] -= 1.0;
        LossTerm {
            value,
            grad_output: p,
            grad_jacobian: None,
        }
    }
}

/// Mean loss over a batch and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub value: f64,
    /// Flat gradient, aligned with [`SmoothMap::params_flat`].
    pub flat: Vec<f64>,
    layout: Vec<ParamInfo>,
}

impl LossGradient {
    /// Gradient blocks keyed like [`SmoothMap::named_params`].
    pub fn named(&self) -> Vec<(String, Tensor)> {
        named_blocks(&self.layout, &self.flat)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Mean of `loss` over `batch` and its parameter gradient.
pub fn loss_gradient<L: Loss + ?Sized>(map: &SmoothMap, loss: &L, batch: &[Tensor]) -> Result<LossGradient> {
    let xs: Vec<DVector<f64>> = batch.iter().map(Tensor::to_dvector).collect();
    batch_loss_gradient(map, loss, &xs)
}

pub(crate) fn batch_loss_gradient<L: Loss + ?Sized>(
    map: &SmoothMap,
    loss: &L,
    batch: &[DVector<f64>],
) -> Result<LossGradient> {
    if batch.is_empty() {
        return Err(invalid("loss gradient over an empty batch"));
    }
    let mut flat = vec![0.0; map.num_params()];
    let mut total = 0.0;
    if !loss.uses_jacobian() {
        for x in batch {
            ensure_dim("map input", map.input_dim(), x.len())?;
        }
        let (inputs, out) = map.forward_batch(DMatrix::from_columns(batch))?;
        let mut g = DMatrix::zeros(out.nrows(), out.ncols());
        for (i, col) in out.column_iter().enumerate() {
            let term = loss.evaluate(i, &col.into_owned(), None);
            if !term.value.is_finite() {
                return Err(Error::NonFinite(format!("loss at batch sample {i}")));
            }
            ensure_dim("loss cotangent", map.output_dim(), term.grad_output.len())?;
            total += term.value;
            g.set_column(i, &term.grad_output);
        }
        map.backprop_batch(&inputs, g, &mut flat);
        return finish(map, total, flat, batch.len());
    }
    for (i, x) in batch.iter().enumerate() {
        let traced = map.trace(x, loss.uses_jacobian())?;
        let term = loss.evaluate(i, &traced.output, traced.jacobian.as_ref());
        if !term.value.is_finite() {
            return Err(Error::NonFinite(format!("loss at batch sample {i}")));
        }
        ensure_dim("loss cotangent", map.output_dim(), term.grad_output.len())?;
        total += term.value;
        map.backprop(&traced, &term.grad_output, term.grad_jacobian.as_ref(), &mut flat)?;
    }
    finish(map, total, flat, batch.len())
}

fn finish(map: &SmoothMap, total: f64, mut flat: Vec<f64>, n: usize) -> Result<LossGradient> {
    let scale = 1.0 / n as f64;
    flat.iter_mut().for_each(|g| *g *= scale);
    if flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    Ok(LossGradient {
        value: total * scale,
        flat,
        layout: map.param_layout(),
    })
}
