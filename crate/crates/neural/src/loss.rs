//! Joint segmentation loss over both branches.

use std::rc::Rc;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing added to the numerator and denominator of the soft Dice ratio.
/// An empty target with an empty prediction scores a Dice loss of 0.
pub const DICE_EPS: f64 = 1e-5;

/// Cross-entropy plus soft Dice loss of one branch.
pub fn branch_loss(t: &Tape, logits: Var, target: Rc<Tensor>) -> Result<Var> {
    let ce = t.bce_with_logits_mean(logits, target.clone())?;
    let prob = t.sigmoid(logits);
    let dice = t.soft_dice_loss(prob, target, DICE_EPS)?;
    t.add(ce, dice)
}

/// Unweighted sum of both branch losses.
pub fn joint_loss(t: &Tape, y1: Rc<Tensor>, y2: Rc<Tensor>, logits1: Var, logits2: Var) -> Result<Var> {
    let l1 = branch_loss(t, logits1, y1)?;
    let l2 = branch_loss(t, logits2, y2)?;
    t.add(l1, l2)
}
