//! Segmentation, intermediate-supervision and reconstruction losses.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated. The
//! composite objectives return both the differentiable scalar and a
//! [`LossBreakdown`] of every term's value.

use crate::error::{Error, Result};
use crate::models::ForwardOutputs;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Number of intermediate supervision levels (`j = 0..4`).
pub const LEVELS: usize = 5;

/// Term weights of the composite objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// weight of `L_image`
    pub alpha: f64,
    /// weight of `L_mask`
    pub gamma: f64,
    /// overall weight of the intermediate terms
    pub lambda: f64,
    /// per-level weights of the intermediate terms
    pub omega: [f64; LEVELS],
    /// weight of the reconstruction term
    pub beta: f64,
    /// BCE share inside `L_BD`
    pub bd_bce: f64,
    /// Dice share inside `L_BD`
    pub bd_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, gamma: 1.0, lambda: 1.0, omega: [1.0; LEVELS], beta: 1.0, bd_bce: 1.0, bd_dice: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("bd_bce", self.bd_bce),
            ("bd_dice", self.bd_dice),
        ];
        for (name, v) in named.into_iter().chain(self.omega.iter().map(|&w| ("omega", w))) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Multiply every outer weight (not the `L_BD` shares) by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            alpha: self.alpha * c,
            gamma: self.gamma * c,
            lambda: self.lambda * c,
            beta: self.beta * c,
            ..self.clone()
        }
    }
}

/// Values of every term of one evaluation. Terms a model does not produce stay 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_image: f64,
    pub l_mask: f64,
    pub l_t: f64,
    pub l_j: [f64; LEVELS],
    pub l_h1: f64,
    pub l_h: f64,
}

impl LossBreakdown {
    /// Weighted accumulation, for averaging over batches.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.l_image += w * other.l_image;
        self.l_mask += w * other.l_mask;
        self.l_t += w * other.l_t;
        for (a, b) in self.l_j.iter_mut().zip(other.l_j) {
            *a += w * b;
        }
        self.l_h1 += w * other.l_h1;
        self.l_h += w * other.l_h;
    }
}

pub fn bce_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    tape.bce(pred, target)
}

pub fn dice_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    tape.dice(pred, target, DICE_SMOOTH)
}

pub fn mse_loss<T: Real>(tape: &mut Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    tape.mse(a, b)
}

/// `L_BD = bd_bce·BCE + bd_dice·Dice`.
pub fn l_bd<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    let bce = bce_loss(tape, pred, target)?;
    let dice = dice_loss(tape, pred, target)?;
    tape.weighted_sum(&[(bce, T::of(w.bd_bce)), (dice, T::of(w.bd_dice))])
}

fn scalar<T: Real>(tape: &Tape<'_, T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// `α·L_image` only; the objective of the plain U-Net.
pub fn image_only<T: Real>(
    tape: &mut Tape<'_, T>,
    outputs: &ForwardOutputs,
    m: Var,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let l_image = l_bd(tape, outputs.y, m, w)?;
    let total = tape.weighted_sum(&[(l_image, T::of(w.alpha))])?;
    let value = scalar(tape, total);
    Ok((total, LossBreakdown { l_image: scalar(tape, l_image), l_h1: value, l_h: value, ..Default::default() }))
}

/// `L_h¹ = α·L_BD(y, m) + γ·L_BD(y', m) + λ·Σⱼ ωⱼ·MSE(yⱼ, y'ⱼ)`.
///
/// With `detach_mask_branch` the intermediate targets `y'ⱼ` are treated as
/// constants in the MSE terms.
pub fn hybrid_h1<T: Real>(
    tape: &mut Tape<'_, T>,
    outputs: &ForwardOutputs,
    m: Var,
    w: &LossWeights,
    detach_mask_branch: bool,
) -> Result<(Var, LossBreakdown)> {
    let y_prime = outputs.y_prime.ok_or(Error::MissingHead("y_prime"))?;
    let y_j = outputs.y_j.as_ref().ok_or(Error::MissingHead("y_j"))?;
    let y_prime_j = outputs.y_prime_j.as_ref().ok_or(Error::MissingHead("y_prime_j"))?;
    if y_j.len() != LEVELS || y_prime_j.len() != LEVELS {
        return Err(Error::invalid(
            "hybrid_h1",
            format!("expected {LEVELS} intermediate pairs, got {} and {}", y_j.len(), y_prime_j.len()),
        ));
    }
    let l_image = l_bd(tape, outputs.y, m, w)?;
    let l_mask = l_bd(tape, y_prime, m, w)?;
    let mut terms = vec![(l_image, T::of(w.alpha)), (l_mask, T::of(w.gamma))];
    let mut l_j = [0.0; LEVELS];
    for j in 0..LEVELS {
        let target = if detach_mask_branch { tape.detach(y_prime_j[j]) } else { y_prime_j[j] };
        let lj = mse_loss(tape, y_j[j], target)?;
        l_j[j] = scalar(tape, lj);
        terms.push((lj, T::of(w.lambda * w.omega[j])));
    }
    let total = tape.weighted_sum(&terms)?;
    let value = scalar(tape, total);
    Ok((
        total,
        LossBreakdown {
            l_image: scalar(tape, l_image),
            l_mask: scalar(tape, l_mask),
            l_j,
            l_h1: value,
            l_h: value,
            l_t: 0.0,
        },
    ))
}

/// `L_h = L_h¹ + β·BCE(x̃, x)`. `x` must already lie in `[0, 1]`.
pub fn total_h<T: Real>(
    tape: &mut Tape<'_, T>,
    outputs: &ForwardOutputs,
    x: Var,
    m: Var,
    w: &LossWeights,
    detach_mask_branch: bool,
) -> Result<(Var, LossBreakdown)> {
    let x_tilde = outputs.x_tilde.ok_or(Error::MissingHead("x_tilde"))?;
    let (h1, mut breakdown) = hybrid_h1(tape, outputs, m, w, detach_mask_branch)?;
    let l_t = bce_loss(tape, x_tilde, x)?;
    let total = tape.weighted_sum(&[(h1, T::one()), (l_t, T::of(w.beta))])?;
    breakdown.l_t = scalar(tape, l_t);
    breakdown.l_h = scalar(tape, total);
    Ok((total, breakdown))
}

/// BCE of two plain tensors, without gradients.
pub fn eval_bce<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, t) = (tape.leaf(pred.clone(), false), tape.leaf(target.clone(), false));
    let l = bce_loss(&mut tape, p, t)?;
    Ok(scalar(&tape, l))
}

/// Smoothed Dice loss of two plain tensors, without gradients.
pub fn eval_dice<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, t) = (tape.leaf(pred.clone(), false), tape.leaf(target.clone(), false));
    let l = dice_loss(&mut tape, p, t)?;
    Ok(scalar(&tape, l))
}
