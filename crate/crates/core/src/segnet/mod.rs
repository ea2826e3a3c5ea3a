//! The segmentation network, its training loss and the evaluation metric.

mod dense;
mod loss;
mod unet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, SeededRng};
use crate::params::ParamSet;

pub use dense::DenseSpec;
pub use loss::{hard_dice, soft_dice_loss, soft_dice_loss_smoothed, DiceScores, DICE_SMOOTH};
pub use unet::{standardize, UNetSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegArch {
    Unet(UNetSpec),
    /// Oracle-scale per-pixel model supporting exact second-order gradients.
    Dense(DenseSpec),
}

impl SegArch {
    pub fn classes(&self) -> usize {
        match self {
            SegArch::Unet(s) => s.out_channels,
            SegArch::Dense(s) => s.classes,
        }
    }

    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamSet> {
        match self {
            SegArch::Unet(s) => s.init(rng, true),
            SegArch::Dense(s) => s.init(rng),
        }
    }

    pub fn logits(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        match self {
            SegArch::Unet(s) => s.forward(tape, params, x),
            SegArch::Dense(s) => s.forward(tape, params, x),
        }
    }

    /// Class probabilities `[C, H, W]` for an image `x: [1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let logits = self.logits(tape, params, x)?;
        Ok(tape.softmax0(logits))
    }
}

/// Segmentation weights together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct SegWeights {
    pub arch: SegArch,
    pub params: ParamSet,
}

impl SegWeights {
    pub fn init(arch: SegArch, rng: &mut SeededRng) -> Result<Self> {
        let params = arch.init(rng)?;
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: SegArch) -> Result<Self> {
        let mut w = Self::init(arch, &mut SeededRng::new(0))?;
        let zeros = w.params.grids().iter().map(|g| Grid::zeros(g.shape())).collect();
        w.params = w.params.with_grids(zeros)?;
        Ok(w)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Grid) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = self.params.constants(&mut tape);
        let x = tape.constant(as_channel_image(image)?);
        let p = self.arch.forward(&mut tape, &vars, x)?;
        Ok(Prediction {
            probabilities: tape.value(p).clone(),
        })
    }
}

/// Per-voxel class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Grid,
}

impl Prediction {
    pub fn labels(&self) -> Result<LabelMap> {
        LabelMap::from_scores(&self.probabilities)
    }
}

/// Accepts `[H, W]` or `[1, H, W]` and returns `[1, H, W]`.
pub fn as_channel_image(image: &Grid) -> Result<Grid> {
    match image.shape() {
        [h, w] => image.reshape(&[1, *h, *w]),
        [1, _, _] => Ok(image.clone()),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a single-channel image".into(),
        }),
    }
}
