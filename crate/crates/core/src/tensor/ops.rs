//! Stochastic and optimizer-side operations that sit next to the tape.

use super::rng::RngStream;
use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Inverted dropout: zero each entry with probability `p` and scale survivors
/// by `1/(1-p)`. Identity when `training` is false or `p == 0`.
pub fn dropout(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Var> {
    check_dropout(p)?;
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.value(x).len(), p, rng);
    tape.mul_const(x, mask)
}

pub fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    Ok(())
}

pub fn dropout_mask(n: usize, p: f64, rng: &mut RngStream) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect()
}

/// One SGD step with momentum and L2 weight decay, in place:
/// `g = grad + wd * param; v = momentum * v + g; param -= lr * v`.
pub fn sgd_momentum_step(
    param: &mut Tensor,
    grad: &[f64],
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.len() != param.len() || velocity.shape() != param.shape() {
        return Err(Error::Dimension(format!(
            "sgd step: param {:?}, grad len {}, velocity {:?}",
            param.shape(),
            grad.len(),
            velocity.shape()
        )));
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(velocity.data_mut())
    {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Cosine-annealed learning rate for `epoch` in `[0, total]`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config(
            "cosine schedule needs at least one epoch".into(),
        ));
    }
    if epoch > total || lr_min > lr_max {
        return Err(Error::Config(format!(
            "cosine schedule: epoch {epoch}/{total}, lr range [{lr_min}, {lr_max}]"
        )));
    }
    let t = epoch as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}
