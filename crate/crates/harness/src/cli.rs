use std::path::PathBuf;

use clap::{Parser, Subcommand};
use l2s_core::augment::AugmentKind;
use l2s_core::bilevel::{oracle_suite, CompareOptions, ORACLE_OPTIONS};
use l2s_core::gradcheck::{run_suite, TOLERANCE};
use l2s_core::synth::{make_real_dataset, RealDatasetSpec, SigmaPreset};

use crate::config::{preset_label, ExperimentConfig, OUTPUT_ROOT_ENV};
use crate::error::{HarnessError, Result};
use crate::experiment::{prepare_data, regrid_from_checkpoints, run_all, split_maps, write_grid, ResultsTable};
use crate::report::render_report;

#[derive(Debug, Parser)]
#[command(name = "l2s", version, about = "Learned synthetic augmentation for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Augmentation mode when no config is given.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AugmentKind>,
    /// Output directory (also settable through L2S_OUTPUT_ROOT).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Restrict the preset grid to one noise level.
    #[arg(long)]
    pub preset_sigma: Option<f64>,
    /// Override the number of training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a "real" dataset with a manifest.
    Generate {
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Upper end of a uniform sigma range starting at --sigma.
        #[arg(long)]
        sigma_max: Option<f64>,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bias exponents, one per lattice entry (2, 4, 8).
        #[arg(long, value_delimiter = ',')]
        bias_c: Vec<f64>,
        #[arg(long, default_value = "data")]
        output: PathBuf,
    },
    /// Train: warm start, learned runs per preset, and the comparison grid.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Only the learned runs and the sigma table.
        #[arg(long)]
        no_grid: bool,
    },
    /// Recompute the Dice grid from saved checkpoints.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Central-difference check of every primitive and both losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare exact, finite-difference and brute-force hypergradients.
    HypergradCheck {
        /// Only the dense oracle model is supported.
        #[arg(long, default_value = "tiny")]
        model: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = ORACLE_OPTIONS.delta)]
        delta: f64,
    },
    /// Render tables and plots from an experiment directory.
    Report {
        /// Experiment output directory.
        dir: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<AugmentKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?} (noise-only, noise-bias, nonparametric)"))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let mut c = ExperimentConfig::new(self.mode.unwrap_or(AugmentKind::NoiseOnly), "l2s-output");
                if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
                    c.output_dir = root.into();
                }
                c
            }
        };
        if let (Some(m), Some(_)) = (self.mode, &self.config) {
            if m != cfg.mode {
                return Err(HarnessError::Config(format!("--mode {m:?} contradicts the config's {:?}", cfg.mode)));
            }
        }
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.preset_sigma {
            cfg.grid.presets = vec![SigmaPreset::Fixed(s)];
        }
        if let Some(n) = self.iterations {
            cfg.train.iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            sigma,
            sigma_max,
            count,
            seed,
            bias_c,
            output,
        } => {
            let preset = match sigma_max {
                Some(hi) => SigmaPreset::Range([sigma, hi]),
                None => SigmaPreset::Fixed(sigma),
            };
            let mut cfg = ExperimentConfig::new(AugmentKind::NoiseOnly, &output);
            cfg.seed = seed;
            cfg.data.train_count = count;
            let lattice = if bias_c.is_empty() { vec![] } else { cfg.data.lattice[..bias_c.len().min(3)].to_vec() };
            let spec = RealDatasetSpec {
                sigma: preset,
                bias_c,
                lattice,
                count,
                seed,
            };
            spec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            let [maps, _, _] = split_maps(&cfg)?;
            let ds = make_real_dataset(&maps, &spec, &output)?;
            println!("wrote {} images at sigma {} to {}", ds.len(), preset_label(&preset), output.display());
        }
        Command::Train { args, no_grid } => {
            let cfg = args.resolve()?;
            let summary = run_all(&cfg, !no_grid)?;
            for r in &summary.recovery.rows {
                println!("preset {:>10}  inferred sigma {:.4}  |err| {:.4}", r.preset, r.inferred_sigma, r.abs_error);
            }
            for d in &summary.dominance {
                println!(
                    "test {:>6}: matched {:.3} vs train {} {:.3} (margin {:+.3})",
                    d.column, d.matched, d.mismatched_row, d.mismatched, d.margin
                );
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Eval { args } => {
            let cfg = args.resolve()?;
            let columns = cfg.grid.columns().iter().map(|p| prepare_data(&cfg, p)).collect::<Result<Vec<_>>>()?;
            let rows = regrid_from_checkpoints(&cfg, &columns)?;
            if rows.is_empty() {
                return Err(HarnessError::Config(format!("no checkpoints under {}", cfg.output_dir.join("runs").display())));
            }
            let table = ResultsTable {
                columns: columns.iter().map(|c| preset_label(&c.preset)).collect(),
                column_sigma: columns.iter().map(|c| c.preset.nominal()).collect(),
                rows,
                recovery: vec![],
            };
            write_grid(&cfg.output_dir.join("grid.csv"), &table)?;
            print!("{}", crate::report::grid_markdown(&table));
        }
        Command::Gradcheck { seed } => {
            let cases = run_suite(seed)?;
            let mut failed = 0;
            for c in &cases {
                let mark = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<36} {:.3e}  {mark}", c.name, c.max_rel_err);
                failed += usize::from(!c.passed());
            }
            println!("{} cases, {failed} above {TOLERANCE:e}", cases.len());
            if failed > 0 {
                return Err(HarnessError::Report("gradient check failed".into()));
            }
        }
        Command::HypergradCheck { model, seeds, delta } => {
            if model != "tiny" {
                return Err(HarnessError::Config(format!("unknown model {model:?}; only \"tiny\" is available")));
            }
            let opts = CompareOptions { delta, ..ORACLE_OPTIONS };
            let reports = oracle_suite(seeds, opts)?;
            let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
            for (i, r) in reports.iter().enumerate() {
                println!(
                    "seed {i:>2}: exact-fd {:.2e}  exact-brute {:.2e}  fd-brute {:.2e}",
                    r.rel_exact_fd.unwrap_or(f64::NAN),
                    r.rel_exact_brute.unwrap_or(f64::NAN),
                    r.rel_fd_brute.unwrap_or(f64::NAN)
                );
            }
            println!("{}", serde_json::to_string(&reports[0])?);
            println!("max pairwise relative error {worst:.3e}");
            if worst > 1e-3 {
                return Err(HarnessError::Report("hypergradient strategies disagree".into()));
            }
        }
        Command::Report { dir } => {
            print!("{}", render_report(&dir)?);
        }
    }
    Ok(())
}
