use crate::augment::{augment, AugmentDraw, AugmentSpec};
use crate::autodiff::{Tape, Var};
use crate::bilevel::BilevelProblem;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::segnet::{soft_dice_loss_smoothed, SegArch};

/// One synthetic training item with its frozen augmentation draw.
#[derive(Debug, Clone)]
pub struct SynthItem {
    /// `[1, H, W]`.
    pub image: Grid,
    /// `[C, H, W]`.
    pub one_hot: Grid,
    pub draw: AugmentDraw,
}

#[derive(Debug, Clone)]
pub struct RealItem {
    pub image: Grid,
    pub one_hot: Grid,
}

/// Segmentation network trained on augmented synthetic items and scored on
/// real items; batch losses are means in item order.
pub struct SegProblem<'a> {
    pub arch: &'a SegArch,
    pub augment: &'a AugmentSpec,
    pub synth: &'a [SynthItem],
    pub real: &'a [RealItem],
    pub dice_smooth: f64,
}

fn batch_mean(tape: &mut Tape, losses: Vec<Var>) -> Result<Var> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for l in it {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / n as f64))
}

impl BilevelProblem for SegProblem<'_> {
    fn synth_loss(&self, tape: &mut Tape, phi: &[Var], theta: &[Var]) -> Result<Var> {
        let mut losses = Vec::with_capacity(self.synth.len());
        for item in self.synth {
            let x = tape.constant(item.image.clone());
            let xa = augment(tape, self.augment, theta, x, &item.draw)?;
            let p = self.arch.forward(tape, phi, xa)?;
            losses.push(soft_dice_loss_smoothed(tape, p, &item.one_hot, self.dice_smooth)?);
        }
        batch_mean(tape, losses)
    }

    fn real_loss(&self, tape: &mut Tape, phi: &[Var]) -> Result<Var> {
        let mut losses = Vec::with_capacity(self.real.len());
        for item in self.real {
            let x = tape.constant(item.image.clone());
            let p = self.arch.forward(tape, phi, x)?;
            losses.push(soft_dice_loss_smoothed(tape, p, &item.one_hot, self.dice_smooth)?);
        }
        batch_mean(tape, losses)
    }
}
