//! Reverse-mode differentiation over the tensor operations the model uses.
//!
//! Model code is written once against the [`Graph`] trait. [`Eager`]
//! evaluates it directly on tensors; [`Tape`] records every operation so
//! [`Tape::backward`] can produce gradients for trainable leaves. Both share
//! the forward kernels in this module, so a recorded value is bit-identical
//! to the eager one.

mod gradcheck;
mod tape;

pub use gradcheck::{
    central_differences, check_program, finite_diff_check, op_suite, rel_err, GradCheckReport, ScalarProgram,
};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::tensor::{self, Shape, Tensor, TensorError, NORM_FLOOR};

/// Operations shared by eager evaluation and the recording tape.
pub trait Graph {
    type Value: Clone;

    /// Introduces a tensor. `trainable` leaves receive gradients on a tape.
    fn leaf(&mut self, t: &Tensor, trainable: bool) -> Self::Value;

    fn constant(&mut self, t: &Tensor) -> Self::Value {
        self.leaf(t, false)
    }

    fn param(&mut self, t: &Tensor) -> Self::Value {
        self.leaf(t, true)
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn contract(&mut self, a: &Self::Value, b: &Self::Value, axes: &[(usize, usize)]) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Elementwise product of equally shaped values.
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Multiplication by a constant.
    fn scale(&mut self, a: &Self::Value, factor: f64) -> Result<Self::Value>;
    fn reshape(&mut self, a: &Self::Value, dims: &[usize]) -> Result<Self::Value>;
    fn tanh(&mut self, a: &Self::Value) -> Result<Self::Value>;
    fn sigmoid(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Mean of all entries, as a rank-0 value.
    fn mean(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Scales every vector along the last axis to unit norm.
    fn l2_normalize(&mut self, a: &Self::Value) -> Result<Self::Value>;
    /// Cosine between matching vectors along the last axis. The result keeps
    /// the leading axes (rank-0 for two plain vectors).
    fn cosine_similarity(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    /// Mean over rows of `-log softmax(logits)[label]` for `(B, C)` logits.
    fn softmax_cross_entropy(&mut self, logits: &Self::Value, labels: &[usize]) -> Result<Self::Value>;
}

/// Direct evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type Value = Tensor;

    fn leaf(&mut self, t: &Tensor, _trainable: bool) -> Tensor {
        t.clone()
    }

    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }

    fn contract(&mut self, a: &Tensor, b: &Tensor, axes: &[(usize, usize)]) -> Result<Tensor> {
        Ok(tensor::contract(a, b, axes)?)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(a.add(b)?)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(a.zip_map(b, |x, y| x * y)?)
    }

    fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        Ok(a.scale(factor))
    }

    fn reshape(&mut self, a: &Tensor, dims: &[usize]) -> Result<Tensor> {
        Ok(a.reshape(dims)?)
    }

    fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(f64::tanh))
    }

    fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(sigmoid))
    }

    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(mean_kernel(a))
    }

    fn l2_normalize(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(normalize_kernel(a)?.0)
    }

    fn cosine_similarity(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Ok(cosine_kernel(a, b)?.out)
    }

    fn softmax_cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        Ok(softmax_ce_kernel(logits, labels)?.0)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn mean_kernel(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    Tensor::scalar(a.data().iter().sum::<f64>() / n)
}

fn last_axis(t: &Tensor) -> Result<usize> {
    t.dims()
        .last()
        .copied()
        .ok_or_else(|| TensorError::InvalidShape("operation needs rank >= 1".into()).into())
}

/// Returns the normalized tensor and the per-row norms.
pub(crate) fn normalize_kernel(a: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let width = last_axis(a)?;
    let mut out = Vec::with_capacity(a.len());
    let mut norms = Vec::with_capacity(a.len() / width);
    for row in a.data().chunks(width) {
        let n = tensor::norm(row);
        if n < NORM_FLOOR {
            return Err(TensorError::ZeroNorm.into());
        }
        norms.push(n);
        out.extend(row.iter().map(|x| x / n));
    }
    Ok((Tensor::from_parts(a.shape().clone(), out), norms))
}

pub(crate) struct CosineParts {
    pub out: Tensor,
    /// Unclamped cosines, used by the backward pass.
    pub raw: Vec<f64>,
    pub norms_a: Vec<f64>,
    pub norms_b: Vec<f64>,
}

pub(crate) fn cosine_kernel(a: &Tensor, b: &Tensor) -> Result<CosineParts> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible(a.dims().to_vec(), b.dims().to_vec()).into());
    }
    let width = last_axis(a)?;
    let rows = a.len() / width;
    let mut raw = Vec::with_capacity(rows);
    let mut norms_a = Vec::with_capacity(rows);
    let mut norms_b = Vec::with_capacity(rows);
    for (ra, rb) in a.data().chunks(width).zip(b.data().chunks(width)) {
        let (na, nb) = (tensor::norm(ra), tensor::norm(rb));
        if na < NORM_FLOOR || nb < NORM_FLOOR {
            return Err(TensorError::ZeroNorm.into());
        }
        raw.push(tensor::dot(ra, rb) / (na * nb));
        norms_a.push(na);
        norms_b.push(nb);
    }
    let lead = &a.dims()[..a.rank() - 1];
    let out = Tensor::from_parts(
        Shape::new(lead.to_vec())?,
        raw.iter().map(|c| c.clamp(-1.0, 1.0)).collect(),
    );
    Ok(CosineParts {
        out,
        raw,
        norms_a,
        norms_b,
    })
}

/// Returns the mean loss and the softmax probabilities.
pub(crate) fn softmax_ce_kernel(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    if logits.rank() != 2 {
        return Err(TensorError::InvalidShape(format!("logits must be (B, C), got {:?}", logits.dims())).into());
    }
    let (rows, classes) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != rows {
        return Err(Error::BatchMismatch(rows, labels.len()));
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        total += sum.ln() - (row[label] - max);
        probs.extend(row.iter().map(|&z| (z - max).exp() / sum));
    }
    Ok((
        Tensor::scalar(total / rows as f64),
        Tensor::from_parts(logits.shape().clone(), probs),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_single_class_is_zero() {
        let z = Tensor::from_vec(&[2, 1], vec![3.0, -7.5]).unwrap();
        let (loss, _) = softmax_ce_kernel(&z, &[0, 0]).unwrap();
        assert_eq!(loss.data()[0], 0.0);
    }

    #[test]
    fn softmax_uniform_is_ln2() {
        let z = Tensor::from_vec(&[1, 2], vec![12.0, 12.0]).unwrap();
        let (loss, _) = softmax_ce_kernel(&z, &[1]).unwrap();
        assert_eq!(loss.data()[0], std::f64::consts::LN_2);
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let z = Tensor::from_vec(&[1, 3], vec![1e4, -1e4, 0.0]).unwrap();
        let (loss, probs) = softmax_ce_kernel(&z, &[1]).unwrap();
        assert!(loss.is_finite() && probs.is_finite());
        assert!((loss.data()[0] - 2e4).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        let z = Tensor::zeros(&[1, 2]).unwrap();
        assert!(matches!(
            softmax_ce_kernel(&z, &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_rows_shape() {
        let a = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 2.]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3., 0., 1., 0.]).unwrap();
        let c = cosine_kernel(&a, &b).unwrap().out;
        assert_eq!(c.dims(), &[2]);
        assert_eq!(c.data(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_saturates_finite() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
    }
}
