//! Segmentation loss: weighted sum of binary cross-entropy and soft Dice.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Smoothing constant of the Dice term.
pub const DICE_EPS: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 2.0;

/// Scalar loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `α·bce + β·dice`.
pub fn total_loss(bce: f64, dice: f64, alpha: f64, beta: f64) -> LossBreakdown {
    LossBreakdown { bce, dice, total: alpha * bce + beta * dice, alpha, beta }
}

fn check(g: &Graph, logits: Var, gt: &Tensor) -> Result<()> {
    if g.shape(logits) != gt.shape() {
        return shape_err(format!("loss: logits {:?} vs mask {:?}", g.shape(logits), gt.shape()));
    }
    Ok(())
}

/// Mean of `softplus(x) − x·y`, the logit form of binary cross-entropy.
pub fn bce_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    check(g, logits, gt)?;
    let y = g.constant(gt.clone());
    let sp = g.softplus(logits);
    let xy = g.mul(logits, y)?;
    let per_pixel = g.sub(sp, xy)?;
    Ok(g.mean(per_pixel))
}

/// `1 − (2Σpy + ε) / (Σp + Σy + ε)` with `p = σ(x)`.
pub fn dice_loss(g: &mut Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    check(g, logits, gt)?;
    let y = g.constant(gt.clone());
    let p = g.sigmoid(logits);
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let num = g.affine(inter, 2.0, DICE_EPS);
    let sp = g.sum(p);
    let den = g.affine(sp, 1.0, gt.sum() + DICE_EPS);
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -1.0, 1.0))
}

/// Graph nodes of the three loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bce: Var,
    pub dice: Var,
    pub total: Var,
}

/// Builds both terms and their weighted sum on the tape.
pub fn segmentation_loss(g: &mut Graph, logits: Var, gt: &Tensor, alpha: f64, beta: f64) -> Result<LossVars> {
    let bce = bce_loss(g, logits, gt)?;
    let dice = dice_loss(g, logits, gt)?;
    let a = g.scale(bce, alpha);
    let b = g.scale(dice, beta);
    let total = g.add(a, b)?;
    Ok(LossVars { bce, dice, total })
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, alpha: f64, beta: f64) -> LossBreakdown {
        LossBreakdown {
            bce: g.value(self.bce).item(),
            dice: g.value(self.dice).item(),
            total: g.value(self.total).item(),
            alpha,
            beta,
        }
    }
}
