//! Alternating synthetic and real passes.
//!
//! Each iteration draws a synthetic batch, takes one SGD step on the
//! segmentation weights `phi` (the synthetic pass), then scores the updated
//! weights on real data and differentiates that score through the step into
//! the augmentation parameters `theta` (the real pass), which Adam updates.

mod adam;
mod hypergrad;
mod oracle;
mod problem;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, AugmentSpec};
use crate::checkpoint::{save_augment, save_seg};
use crate::error::{Error, Result};
use crate::grid::rng::derive_seed;
use crate::grid::{LabelMap, SeededRng};
use crate::segnet::{hard_dice, SegArch, SegWeights, DICE_SMOOTH};
use crate::synth::{synth_image, BlobMapSpec, Dataset};

pub use adam::{Adam, AdamConfig};
pub use hypergrad::{
    compare_hypergrads, hypergrad_bruteforce, real_gradient, real_pass_exact, real_pass_fdhvp, sgd_step,
    synthetic_pass, theta_gradient, BilevelProblem, CompareOptions, HypergradReport, RealPass, ScalarToy,
    SyntheticPass,
};
pub use oracle::{oracle_suite, OracleCase, ORACLE_OPTIONS};
pub use problem::{RealItem, SegProblem, SynthItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypergradStrategy {
    /// Differentiate through the update on a retained graph (dense models).
    Exact,
    /// Central-difference Hessian-vector product.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub maps: BlobMapSpec,
    pub seg: SegArch,
    pub augment: AugmentSpec,
    pub sigma_init: f64,
    pub c_init: f64,
    /// Inner SGD step `eta` on `phi`.
    pub inner_lr: f64,
    pub outer: AdamConfig,
    /// Outer learning rate reached at the last iteration (linear decay from
    /// `outer.lr`); equal to `outer.lr` for a constant rate.
    pub outer_lr_final: f64,
    pub iterations: usize,
    pub batch: usize,
    pub real_batch: usize,
    pub strategy: HypergradStrategy,
    pub fd_delta: f64,
    /// Soft Dice smoothing in both losses.
    #[serde(default = "default_dice_smooth")]
    pub dice_smooth: f64,
    /// Fill the synthetic batch with mirrored pairs that share an image and
    /// differ only in the sign of their noise draws.
    #[serde(default)]
    pub antithetic: bool,
    /// Synthetic passes per real pass.
    pub synth_per_real: usize,
    /// Iterations run with `theta` frozen before the real pass starts.
    pub theta_warmup: usize,
    /// Disables every `theta` update when false.
    pub learn_theta: bool,
    /// Validation hard Dice every this many iterations (0 disables).
    pub val_every: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
    /// Where a diverged run dumps its last state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

fn default_dice_smooth() -> f64 {
    DICE_SMOOTH
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.maps.validate()?;
        self.augment.validate()?;
        if self.seg.classes() != self.maps.classes {
            return Err(Error::invalid("network classes differ from label-map classes"));
        }
        if !(self.inner_lr > 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::invalid("inner learning rate must be > 0"));
        }
        if self.outer.lr < 0.0 || self.outer_lr_final < 0.0 {
            return Err(Error::invalid("outer learning rates must be >= 0"));
        }
        if self.batch == 0 || self.real_batch == 0 || self.synth_per_real == 0 {
            return Err(Error::invalid("batch sizes and synth_per_real must be positive"));
        }
        if self.antithetic && self.batch % 2 != 0 {
            return Err(Error::invalid("antithetic batches need an even size"));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::invalid("dice_smooth must be > 0"));
        }
        if !(self.fd_delta > 0.0) {
            return Err(Error::invalid("fd_delta must be > 0"));
        }
        if self.strategy == HypergradStrategy::Exact && !matches!(self.seg, SegArch::Dense(_)) {
            return Err(Error::invalid("exact hypergradients need the dense oracle model"));
        }
        Ok(())
    }

    fn outer_lr(&self, iter: usize) -> f64 {
        if self.iterations <= 1 {
            return self.outer.lr;
        }
        let t = iter as f64 / (self.iterations - 1) as f64;
        self.outer.lr + t * (self.outer_lr_final - self.outer.lr)
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    #[serde(rename = "L_synth")]
    pub l_synth: f64,
    #[serde(rename = "L_real")]
    pub l_real: Option<f64>,
    pub sigma: f64,
    pub c_low: Option<f64>,
    pub c_mid: Option<f64>,
    pub c_high: Option<f64>,
    pub val_dice: Option<f64>,
}

pub struct TrainState {
    pub phi: SegWeights,
    pub theta: AugmentParams,
    pub eta: f64,
    pub adam: Adam,
    pub iter: usize,
    pub rng: SeededRng,
}

/// Optional starting points overriding the configured initialization.
#[derive(Debug, Clone, Default)]
pub struct TrainInit {
    pub phi: Option<SegWeights>,
    pub theta: Option<AugmentParams>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub phi: SegWeights,
    pub theta: AugmentParams,
    pub log: Vec<LogRow>,
}

/// Mean hard Dice of `w` over a dataset.
pub fn evaluate(w: &SegWeights, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (img, lab) in data.images.iter().zip(&data.labels) {
        total += hard_dice(&w.predict(img)?.labels()?, lab)?.mean;
    }
    Ok(total / data.len() as f64)
}

/// Synthetic batch for iteration `iter`, drawn from its own derived stream.
pub fn synth_batch(config: &TrainConfig, basis: Option<&crate::augment::BiasBasis>, iter: usize, sub: usize) -> Result<Vec<SynthItem>> {
    let base = derive_seed(derive_seed(config.seed, 1), (iter * config.synth_per_real + sub) as u64);
    let fresh = if config.antithetic { config.batch / 2 } else { config.batch };
    let mut items = Vec::with_capacity(config.batch);
    for b in 0..fresh {
        let mut rng = SeededRng::new(derive_seed(base, b as u64));
        let map: LabelMap = config.maps.generate(&mut rng)?;
        let s = synth_image(&map, &mut rng)?;
        let draw = config.augment.draw(basis, [map.height(), map.width()], &mut rng)?;
        let item = SynthItem {
            image: s.image,
            one_hot: s.one_hot,
            draw,
        };
        if config.antithetic {
            let mirror = SynthItem {
                draw: item.draw.antithetic(),
                ..item.clone()
            };
            items.push(item);
            items.push(mirror);
        } else {
            items.push(item);
        }
    }
    Ok(items)
}

fn real_batch(config: &TrainConfig, data: &[RealItem], iter: usize) -> Vec<RealItem> {
    let mut rng = SeededRng::new(derive_seed(derive_seed(config.seed, 2), iter as u64));
    (0..config.real_batch).map(|_| data[rng.below(data.len())].clone()).collect()
}

fn check_loss(config: &TrainConfig, iter: usize, name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v > config.divergence_threshold {
        return Err(Error::Divergence {
            iter,
            reason: format!("{name} = {v}"),
        });
    }
    Ok(())
}

impl TrainState {
    pub fn new(config: &TrainConfig, init: TrainInit) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let phi = match init.phi {
            Some(p) if p.arch == config.seg => p,
            Some(_) => return Err(Error::invalid("initial phi has a different architecture")),
            None => SegWeights::init(config.seg.clone(), &mut rng.derive(0))?,
        };
        let theta = match init.theta {
            Some(t) if t.spec == config.augment => t,
            Some(_) => return Err(Error::invalid("initial theta has a different augmentation spec")),
            None => AugmentParams::init(config.augment.clone(), config.sigma_init, config.c_init, &mut rng.derive(3))?,
        };
        let adam = Adam::new(config.outer, &theta.params);
        rng = rng.derive(4);
        Ok(Self {
            phi,
            theta,
            eta: config.inner_lr,
            adam,
            iter: 0,
            rng,
        })
    }

    fn dump(&self, config: &TrainConfig) {
        if let Some(dir) = &config.dump_dir {
            let res = save_seg(&self.phi, dir, "diverged_phi").and_then(|_| save_augment(&self.theta, dir, "diverged_theta"));
            if let Err(e) = res {
                log::error!("failed to dump diverged state: {e}");
            }
        }
    }
}

/// Runs the bilevel loop.
pub fn train(config: &TrainConfig, real_train: &Dataset, real_val: Option<&Dataset>, init: TrainInit) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config, init)?;
    let [h, w] = [config.maps.height, config.maps.width];
    if real_train.manifest.height != h || real_train.manifest.width != w || real_train.manifest.classes != config.maps.classes {
        return Err(Error::invalid("real dataset does not match the configured map shape and classes"));
    }
    let basis = config.augment.basis(h, w)?;
    let real_items: Vec<RealItem> = real_train
        .images
        .iter()
        .zip(&real_train.one_hot)
        .map(|(i, y)| RealItem {
            image: i.clone(),
            one_hot: y.clone(),
        })
        .collect();
    let mut log = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        state.iter = iter;
        let mut l_synth = 0.0;
        let mut last: Option<(SegWeights, Vec<SynthItem>)> = None;
        for sub in 0..config.synth_per_real {
            let items = synth_batch(config, basis.as_ref(), iter, sub)?;
            let problem = SegProblem {
                arch: &config.seg,
                augment: &config.augment,
                synth: &items,
                real: &[],
                dice_smooth: config.dice_smooth,
            };
            let theta_before = state.theta.params.clone();
            let pass = match synthetic_pass(&problem, &state.phi.params, &state.theta.params, state.eta) {
                Ok(p) => p,
                Err(Error::NonFinite { .. }) => {
                    state.dump(config);
                    return Err(Error::Divergence {
                        iter,
                        reason: "non-finite synthetic loss".into(),
                    });
                }
                Err(e) => return Err(e),
            };
            if state.theta.params != theta_before {
                return Err(Error::invalid("synthetic pass mutated theta"));
            }
            if let Err(e) = check_loss(config, iter, "L_synth", pass.loss) {
                state.dump(config);
                return Err(e);
            }
            l_synth = pass.loss;
            let prev = std::mem::replace(
                &mut state.phi,
                SegWeights {
                    arch: config.seg.clone(),
                    params: pass.phi_star,
                },
            );
            last = Some((prev, items));
        }
        let (phi_prev, items) = last.expect("synth_per_real >= 1");

        let mut l_real = None;
        if config.learn_theta && iter >= config.theta_warmup {
            let real = real_batch(config, &real_items, iter);
            let problem = SegProblem {
                arch: &config.seg,
                augment: &config.augment,
                synth: &items,
                real: &real,
                dice_smooth: config.dice_smooth,
            };
            let phi_before = state.phi.params.clone();
            let rp = match config.strategy {
                HypergradStrategy::FiniteDifference => real_pass_fdhvp(
                    &problem,
                    &phi_prev.params,
                    &state.phi.params,
                    &state.theta.params,
                    state.eta,
                    config.fd_delta,
                )?,
                HypergradStrategy::Exact => real_pass_exact(&problem, &phi_prev.params, &state.theta.params, state.eta)?.1,
            };
            if state.phi.params != phi_before {
                return Err(Error::invalid("real pass mutated phi"));
            }
            if let Err(e) = check_loss(config, iter, "L_real", rp.loss) {
                state.dump(config);
                return Err(e);
            }
            if rp.g_theta.iter().any(|g| !g.is_finite()) {
                state.dump(config);
                return Err(Error::Divergence {
                    iter,
                    reason: "non-finite hypergradient".into(),
                });
            }
            let lr = config.outer_lr(iter);
            let next = state.adam.step(&state.theta.params, &rp.g_theta, lr)?;
            state.theta = state.theta.with_params(next);
            l_real = Some(rp.loss);
        }

        let val_dice = match real_val {
            Some(v) if config.val_every > 0 && ((iter + 1) % config.val_every == 0 || iter + 1 == config.iterations) => {
                Some(evaluate(&state.phi, v)?)
            }
            _ => None,
        };
        let c = state.theta.c();
        log.push(LogRow {
            iter,
            l_synth,
            l_real,
            sigma: state.theta.sigma(),
            c_low: c.first().copied(),
            c_mid: c.get(1).copied(),
            c_high: c.get(2).copied(),
            val_dice,
        });
        if iter % 50 == 0 {
            log::debug!("iter {iter}: L_synth {l_synth:.4} sigma {:.4}", state.theta.sigma());
        }
    }
    Ok(TrainOutcome {
        phi: state.phi,
        theta: state.theta,
        log,
    })
}
