//! Versioned TOML experiment configuration.
//!
//! Every constant the training loop depends on is spelled out here with its
//! default, so a written config fully describes a run.

use std::fs;
use std::path::{Path, PathBuf};

use l2s_core::augment::{AugmentKind, AugmentSpec, NoiseMode};
use l2s_core::bilevel::{AdamConfig, HypergradStrategy, TrainConfig};
use l2s_core::segnet::{SegArch, UNetSpec, DICE_SMOOTH};
use l2s_core::synth::{BlobMapSpec, SigmaPreset};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "L2S_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub mode: AugmentKind,
    /// Root of every file the experiment writes.
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Blob-map cell size in pixels.
    pub cell: usize,
    pub empty_fraction: f64,
    /// Real images per split.
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Bias exponents of the "real" images; empty means no bias field.
    pub real_bias_c: Vec<f64>,
    pub lattice: Vec<usize>,
    /// Previously generated datasets (`<data_dir>/<preset>/<split>`); generated
    /// under `output_dir/data` when absent.
    pub data_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            cell: 16,
            empty_fraction: 0.1,
            train_count: 20,
            val_count: 10,
            test_count: 20,
            real_bias_c: vec![],
            lattice: vec![2, 4, 8],
            data_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Noise presets of the "real" training data (rows).
    pub presets: Vec<SigmaPreset>,
    /// Noise presets of the test sets (columns); the row presets when empty.
    pub test_presets: Vec<SigmaPreset>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            presets: [0.0, 0.05, 0.1, 0.15].map(SigmaPreset::Fixed).to_vec(),
            test_presets: vec![],
        }
    }
}

impl GridConfig {
    pub fn columns(&self) -> &[SigmaPreset] {
        if self.test_presets.is_empty() {
            &self.presets
        } else {
            &self.test_presets
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
    pub normalize_input: bool,
    /// Widths of the residual network in nonparametric mode.
    pub residual_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let u = UNetSpec::small(1, 1);
        Self {
            widths: u.widths,
            convs_per_block: u.convs_per_block,
            kernel: u.kernel,
            normalize_input: u.normalize_input,
            residual_widths: vec![4, 8],
        }
    }
}

/// Warm start shared by every run: plain training on noise-free synthetic
/// images. Zero iterations trains every run from a fresh initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub inner_lr: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            inner_lr: 0.2,
            batch: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub iterations: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub outer_lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub real_batch: usize,
    pub antithetic: bool,
    pub synth_per_real: usize,
    pub theta_warmup: usize,
    pub strategy: HypergradStrategy,
    pub fd_delta: f64,
    pub dice_smooth: f64,
    pub noise_mode: NoiseMode,
    /// Initial noise level of learned runs.
    pub sigma_init: f64,
    pub c_init: f64,
    pub val_every: usize,
    pub divergence_threshold: f64,
    /// Inferred sigma is the mean over this trailing fraction of iterations.
    pub readout_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 1500,
            inner_lr: 0.2,
            outer_lr: 0.05,
            outer_lr_final: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 4,
            real_batch: 4,
            antithetic: true,
            synth_per_real: 1,
            theta_warmup: 0,
            strategy: HypergradStrategy::FiniteDifference,
            fd_delta: 1e-3,
            dice_smooth: DICE_SMOOTH,
            noise_mode: NoiseMode::Fixed,
            sigma_init: 0.02,
            c_init: 0.0,
            val_every: 150,
            divergence_threshold: 10.0,
            readout_fraction: 0.2,
        }
    }
}

/// How a run treats the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Parameters fixed at the preset.
    Naive,
    /// Parameters learned from real data.
    Learned,
    /// Parameters fixed at values a learned run arrived at.
    Optimized,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Naive => "naive",
            Family::Learned => "learned",
            Family::Optimized => "optimized",
        }
    }
}

/// Short file-system-safe label of a preset, e.g. `0.05` or `U0.025-0.2`.
pub fn preset_label(p: &SigmaPreset) -> String {
    match p {
        SigmaPreset::Fixed(s) => format!("{s}"),
        SigmaPreset::Range([lo, hi]) => format!("U{lo}-{hi}"),
    }
}

impl ExperimentConfig {
    /// Defaults for `mode` writing under `output_dir`.
    pub fn new(mode: AugmentKind, output_dir: impl Into<PathBuf>) -> Self {
        let mut data = DataConfig::default();
        if mode != AugmentKind::NoiseOnly {
            data.real_bias_c = vec![0.5; data.lattice.len()];
        }
        Self {
            version: SCHEMA_VERSION,
            mode,
            output_dir: output_dir.into(),
            seed: 0,
            data,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainSettings::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the output-root override, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.version != SCHEMA_VERSION {
            return bad(&format!("unsupported config version {} (expected {SCHEMA_VERSION})", self.version));
        }
        if self.grid.presets.is_empty() {
            return bad("grid.presets must not be empty");
        }
        for p in self.grid.presets.iter().chain(&self.grid.test_presets) {
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        let d = &self.data;
        if d.train_count == 0 || d.test_count == 0 {
            return bad("data.train_count and data.test_count must be positive");
        }
        if !d.real_bias_c.is_empty() && d.real_bias_c.len() != d.lattice.len() {
            return bad("data.real_bias_c needs one exponent per lattice entry");
        }
        if let Some(dir) = &d.data_dir {
            if !dir.is_dir() {
                return bad(&format!("data.data_dir {} does not exist", dir.display()));
            }
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.readout_fraction) || t.readout_fraction == 0.0 {
            return bad("train.readout_fraction must be in (0, 1]");
        }
        if t.iterations == 0 {
            return bad("train.iterations must be positive");
        }
        self.train_config(Family::Learned, &self.grid.presets[0], 0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn maps(&self) -> BlobMapSpec {
        BlobMapSpec {
            height: self.data.height,
            width: self.data.width,
            classes: self.data.classes,
            cell: self.data.cell,
            empty_fraction: self.data.empty_fraction,
        }
    }

    pub fn seg_arch(&self) -> SegArch {
        SegArch::Unet(UNetSpec {
            in_channels: 1,
            out_channels: self.data.classes,
            widths: self.model.widths.clone(),
            convs_per_block: self.model.convs_per_block,
            kernel: self.model.kernel,
            normalize_input: self.model.normalize_input,
        })
    }

    pub fn augment_spec(&self) -> AugmentSpec {
        let mut spec = match self.mode {
            AugmentKind::NoiseOnly => AugmentSpec::noise_only(self.train.noise_mode),
            AugmentKind::NoiseBias => AugmentSpec::noise_bias(self.train.noise_mode, self.data.lattice.clone()),
            AugmentKind::Nonparametric => AugmentSpec::nonparametric(self.model.residual_widths.clone()),
        };
        spec.noise_mode = self.train.noise_mode;
        spec
    }

    /// Training configuration of one run; `slot` decorrelates run seeds.
    pub fn train_config(&self, family: Family, preset: &SigmaPreset, slot: u64) -> TrainConfig {
        let t = &self.train;
        let learn = family == Family::Learned;
        let sigma_init = match family {
            Family::Learned => t.sigma_init,
            _ => preset.nominal(),
        };
        let c_init = match family {
            Family::Naive if !self.data.real_bias_c.is_empty() => self.data.real_bias_c[0],
            _ => t.c_init,
        };
        TrainConfig {
            maps: self.maps(),
            seg: self.seg_arch(),
            augment: self.augment_spec(),
            sigma_init,
            c_init,
            inner_lr: t.inner_lr,
            outer: AdamConfig {
                lr: if learn { t.outer_lr } else { 0.0 },
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.adam_eps,
            },
            outer_lr_final: if learn { t.outer_lr_final } else { 0.0 },
            iterations: t.iterations,
            batch: t.batch,
            real_batch: t.real_batch,
            strategy: t.strategy,
            fd_delta: t.fd_delta,
            dice_smooth: t.dice_smooth,
            antithetic: t.antithetic,
            synth_per_real: t.synth_per_real,
            theta_warmup: t.theta_warmup,
            learn_theta: learn,
            val_every: t.val_every,
            divergence_threshold: t.divergence_threshold,
            seed: l2s_core::grid::rng::derive_seed(self.seed, 1000 + slot),
            dump_dir: Some(self.output_dir.join("diverged")),
        }
    }

    /// Configuration of the warm-start run.
    pub fn pretrain_config(&self) -> TrainConfig {
        let mut c = self.train_config(Family::Naive, &SigmaPreset::Fixed(0.0), 0);
        c.augment = AugmentSpec::noise_only(NoiseMode::Fixed);
        c.inner_lr = self.pretrain.inner_lr;
        c.batch = self.pretrain.batch;
        c.antithetic = false;
        c.iterations = self.pretrain.iterations.max(1);
        c.val_every = 0;
        c.seed = l2s_core::grid::rng::derive_seed(self.seed, 999);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for mode in [AugmentKind::NoiseOnly, AugmentKind::NoiseBias, AugmentKind::Nonparametric] {
            let cfg = ExperimentConfig::new(mode, "out");
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("version = 1\nmode = \"noise-only\"\noutput_dir = \"o\"\nseed = 3\n").unwrap();
        assert_eq!(cfg.train, TrainSettings::default());
        assert_eq!(cfg.grid.columns().len(), 4);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ExperimentConfig::new(AugmentKind::NoiseOnly, "o");
        let mut c = base.clone();
        c.version = 2;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.grid.presets.clear();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.data.data_dir = Some("/definitely/not/here".into());
        assert!(c.validate().is_err());
        let mut c = base;
        c.train.batch = 3;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml("version = 1\nmode = \"noise-only\"\noutput_dir = \"o\"\nseed = 0\nbogus = 1\n").is_err());
    }

    #[test]
    fn families_differ_only_in_theta_handling() {
        let cfg = ExperimentConfig::new(AugmentKind::NoiseOnly, "o");
        let p = SigmaPreset::Fixed(0.1);
        let l = cfg.train_config(Family::Learned, &p, 0);
        let n = cfg.train_config(Family::Naive, &p, 0);
        assert!(l.learn_theta && !n.learn_theta);
        assert_eq!(n.sigma_init, 0.1);
        assert_eq!(l.sigma_init, cfg.train.sigma_init);
        assert_eq!(n.outer.lr, 0.0);
    }

    #[test]
    fn preset_labels() {
        assert_eq!(preset_label(&SigmaPreset::Fixed(0.05)), "0.05");
        assert_eq!(preset_label(&SigmaPreset::Fixed(0.0)), "0");
        assert_eq!(preset_label(&SigmaPreset::Range([0.025, 0.2])), "U0.025-0.2");
    }
}
