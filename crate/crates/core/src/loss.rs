//! Classification and preservation losses.

use crate::autodiff::{Eager, Graph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `cos(f_v, f_t_c) / τ` over the batch.
///
/// `f_v` is `(B, D)`, `f_t` is `(C, D)`; both unit-norm, so the
/// contraction is the cosine.
pub fn loss_cls<G: Graph>(g: &mut G, f_v: &G::Value, f_t: &G::Value, labels: &[usize], tau: f64) -> Result<G::Value> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    let sims = g.contract(f_v, f_t, &[(1, 1)])?;
    let logits = g.scale(&sims, 1.0 / tau)?;
    g.softmax_cross_entropy(&logits, labels)
}

/// Mean of `1 - cos(f_v, frozen)` over the batch, in `[0, 2]`.
pub fn loss_reg<G: Graph>(g: &mut G, f_v: &G::Value, frozen: &G::Value) -> Result<G::Value> {
    let (a, b) = (g.value(f_v).dims()[0], g.value(frozen).dims()[0]);
    if a != b {
        return Err(Error::BatchMismatch(a, b));
    }
    let cos = g.cosine_similarity(f_v, frozen)?;
    let mean = g.mean(&cos)?;
    let neg = g.scale(&mean, -1.0)?;
    let one = g.constant(&Tensor::scalar(1.0));
    g.add(&one, &neg)
}

/// `cls + λ·reg`.
pub fn total_loss<G: Graph>(g: &mut G, cls: &G::Value, reg: &G::Value, lambda: f64) -> Result<G::Value> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let weighted = g.scale(reg, lambda)?;
    g.add(cls, &weighted)
}

pub fn loss_cls_value(f_v: &Tensor, f_t: &Tensor, labels: &[usize], tau: f64) -> Result<f64> {
    Ok(loss_cls(&mut Eager, f_v, f_t, labels, tau)?.data()[0])
}

pub fn loss_reg_value(f_v: &Tensor, frozen: &Tensor) -> Result<f64> {
    Ok(loss_reg(&mut Eager, f_v, frozen)?.data()[0])
}

pub fn total_loss_value(cls: f64, reg: f64, lambda: f64) -> Result<f64> {
    let t = total_loss(&mut Eager, &Tensor::scalar(cls), &Tensor::scalar(reg), lambda)?;
    Ok(t.data()[0])
}
