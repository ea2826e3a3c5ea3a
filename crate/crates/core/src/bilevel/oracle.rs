//! Oracle-scale segmentation problems on which every hypergradient strategy
//! can run, including the exact and brute-force ones.

use crate::augment::{AugmentParams, AugmentSpec, NoiseMode};
use crate::bilevel::{compare_hypergrads, CompareOptions, HypergradReport, RealItem, SegProblem, SynthItem};
use crate::error::Result;
use crate::grid::{Distribution, LabelMap, SeededRng};
use crate::params::ParamSet;
use crate::segnet::{DenseSpec, SegArch, DICE_SMOOTH};
use crate::synth::synth_image;

/// Settings of the oracle comparison.
pub const ORACLE_OPTIONS: CompareOptions = CompareOptions {
    eta: 0.5,
    delta: 1e-3,
    brute_h: Some(1e-5),
};

/// Dense model, noise and bias augmentation, and a few tiny labelled images.
#[derive(Debug, Clone)]
pub struct OracleCase {
    pub arch: SegArch,
    pub augment: AugmentSpec,
    pub synth: Vec<SynthItem>,
    pub real: Vec<RealItem>,
    pub phi: ParamSet,
    pub theta: ParamSet,
}

fn random_map(rng: &mut SeededRng, h: usize, w: usize, classes: usize) -> Result<LabelMap> {
    LabelMap::from_scores(&rng.sample(Distribution::Normal, &[classes, h, w])?)
}

impl OracleCase {
    /// A 4x4, three-class case with 30 segmentation parameters and three
    /// augmentation parameters.
    pub fn dense(seed: u64) -> Result<Self> {
        let (h, w, classes) = (4, 4, 3);
        let mut rng = SeededRng::new(seed);
        let arch = SegArch::Dense(DenseSpec {
            height: h,
            width: w,
            hidden: 3,
            classes,
        });
        let augment = AugmentSpec::noise_bias(NoiseMode::Hyper, vec![2, 2]);
        let basis = augment.basis(h, w)?;
        let phi = arch.init(&mut rng)?;
        let sigma0 = rng.uniform(0.05, 0.2);
        let c0 = rng.uniform(0.1, 0.6);
        let theta = AugmentParams::init(augment.clone(), sigma0, c0, &mut rng)?.params;
        let mut synth = Vec::new();
        for _ in 0..2 {
            let map = random_map(&mut rng, h, w, classes)?;
            let s = synth_image(&map, &mut rng)?;
            let draw = augment.draw(basis.as_ref(), [h, w], &mut rng)?;
            synth.push(SynthItem {
                image: s.image,
                one_hot: s.one_hot,
                draw,
            });
        }
        let mut real = Vec::new();
        for _ in 0..2 {
            let map = random_map(&mut rng, h, w, classes)?;
            let s = synth_image(&map, &mut rng)?;
            let noise = rng.sample(Distribution::Normal, &[1, h, w])?.scale(0.1);
            real.push(RealItem {
                image: s.image.add(&noise)?,
                one_hot: s.one_hot,
            });
        }
        Ok(Self {
            arch,
            augment,
            synth,
            real,
            phi,
            theta,
        })
    }

    pub fn problem(&self) -> SegProblem<'_> {
        SegProblem {
            arch: &self.arch,
            augment: &self.augment,
            synth: &self.synth,
            real: &self.real,
            dice_smooth: DICE_SMOOTH,
        }
    }

    pub fn report(&self, opts: CompareOptions) -> Result<HypergradReport> {
        compare_hypergrads(&self.problem(), &self.phi, &self.theta, opts)
    }
}

/// Reports for seeds `0..seeds`.
pub fn oracle_suite(seeds: u64, opts: CompareOptions) -> Result<Vec<HypergradReport>> {
    (0..seeds).map(|s| OracleCase::dense(s)?.report(opts)).collect()
}
