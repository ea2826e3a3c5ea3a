//! Datasets, training runs, the sigma-recovery table and the cross-condition
//! Dice grid.
//!
//! Output layout under `output_dir`:
//! `data/<preset>/{train,val,test}/`, `pretrain/`, `runs/<family>_<preset>/`
//! (checkpoints plus `log.csv`), `table1.csv`, `grid.csv`, `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use l2s_core::augment::{augment_image, AugmentDraw, AugmentKind, AugmentParams, NoiseDraw};
use l2s_core::bilevel::{evaluate, train, LogRow, TrainInit, TrainOutcome};
use l2s_core::checkpoint::{load_augment, load_seg, save_augment, save_seg};
use l2s_core::grid::rng::derive_seed;
use l2s_core::grid::Grid;
use l2s_core::segnet::SegWeights;
use l2s_core::synth::{blob_maps, Dataset, RealDatasetSpec, SigmaPreset};
use serde::{Deserialize, Serialize};

use crate::config::{preset_label, ExperimentConfig, Family};
use crate::error::{HarnessError, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Real datasets of one noise preset; all presets share label maps.
#[derive(Debug, Clone)]
pub struct PresetData {
    pub preset: SigmaPreset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Stable seed for a string key, independent of grid order.
fn key_seed(base: u64, key: &str) -> u64 {
    key.bytes().fold(derive_seed(base, 0x6b6579), |s, b| derive_seed(s, b as u64))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

impl ExperimentConfig {
    pub fn data_root(&self) -> PathBuf {
        self.data
            .data_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn run_dir(&self, family: Family, preset: &SigmaPreset) -> PathBuf {
        self.output_dir
            .join("runs")
            .join(format!("{}_{}", family.label(), preset_label(preset)))
    }

    pub fn real_spec(&self, preset: &SigmaPreset, split: &str) -> RealDatasetSpec {
        let count = match split {
            "train" => self.data.train_count,
            "val" => self.data.val_count.max(1),
            _ => self.data.test_count,
        };
        let (bias_c, lattice) = if self.data.real_bias_c.is_empty() {
            (vec![], vec![])
        } else {
            (self.data.real_bias_c.clone(), self.data.lattice.clone())
        };
        RealDatasetSpec {
            sigma: *preset,
            bias_c,
            lattice,
            count,
            seed: key_seed(self.seed, &format!("{}/{split}", preset_label(preset))),
        }
    }
}

/// Label maps per split, shared across presets.
pub fn split_maps(cfg: &ExperimentConfig) -> Result<[Vec<l2s_core::LabelMap>; 3]> {
    let d = &cfg.data;
    let val = d.val_count.max(1);
    let all = blob_maps(&cfg.maps(), d.train_count + val + d.test_count, derive_seed(cfg.seed, 7))?;
    let (train, rest) = all.split_at(d.train_count);
    let (val, test) = rest.split_at(val);
    Ok([train.to_vec(), val.to_vec(), test.to_vec()])
}

/// Loads the preset's datasets from `data_root`, generating and writing any
/// that are missing.
pub fn prepare_data(cfg: &ExperimentConfig, preset: &SigmaPreset) -> Result<PresetData> {
    let root = cfg.data_root().join(preset_label(preset));
    let mut maps: Option<[Vec<l2s_core::LabelMap>; 3]> = None;
    let mut sets = Vec::with_capacity(3);
    for (i, split) in SPLITS.iter().enumerate() {
        let dir = root.join(split);
        let spec = cfg.real_spec(preset, split);
        let ds = match Dataset::load(&dir) {
            Ok(ds) if ds.manifest.spec == spec => ds,
            _ => {
                if maps.is_none() {
                    maps = Some(split_maps(cfg)?);
                }
                let ds = Dataset::generate(&maps.as_ref().expect("just built")[i], &spec)?;
                ds.write(&dir)?;
                ds
            }
        };
        sets.push(ds);
    }
    let test = sets.pop().expect("three splits");
    let val = sets.pop().expect("three splits");
    let train = sets.pop().expect("three splits");
    Ok(PresetData {
        preset: *preset,
        train,
        val,
        test,
    })
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}

/// Warm-start weights trained on noise-free synthetic images, cached under
/// `output_dir/pretrain`. `None` when pretraining is disabled.
pub fn pretrain(cfg: &ExperimentConfig, data: &PresetData) -> Result<Option<SegWeights>> {
    if cfg.pretrain.iterations == 0 {
        return Ok(None);
    }
    let dir = cfg.output_dir.join("pretrain");
    let tc = cfg.pretrain_config();
    let stamp = dir.join("config.json");
    let wanted = serde_json::to_string(&tc)?;
    if fs::read_to_string(&stamp).ok().as_deref() == Some(wanted.as_str()) {
        if let Ok(w) = load_seg(&dir, "phi") {
            return Ok(Some(w));
        }
    }
    log::info!("pretraining for {} iterations", tc.iterations);
    let out = train(&tc, &data.train, None, TrainInit::default())?;
    create_dir(&dir)?;
    save_seg(&out.phi, &dir, "phi")?;
    write_log(&dir.join("log.csv"), &out.log)?;
    fs::write(&stamp, wanted).map_err(|e| HarnessError::io(&stamp, e))?;
    Ok(Some(out.phi))
}

/// One finished training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub family: Family,
    pub preset: SigmaPreset,
    pub phi: SegWeights,
    pub theta: AugmentParams,
    pub log: Vec<LogRow>,
    pub seconds: f64,
}

impl RunResult {
    /// Mean materialized sigma over the trailing `fraction` of iterations.
    pub fn inferred_sigma(&self, fraction: f64) -> f64 {
        let n = self.log.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.log[n - k..];
        tail.iter().map(|r| r.sigma).sum::<f64>() / tail.len() as f64
    }
}

/// `A_theta` with noise switched off reproduces its input exactly; only
/// meaningful while the residual head is zero.
pub fn identity_holds(theta: &AugmentParams, image: &Grid) -> Result<bool> {
    let shape = [1, image.shape()[image.shape().len() - 2], image.shape()[image.shape().len() - 1]];
    let draw = AugmentDraw {
        bias: None,
        noise: NoiseDraw {
            eps: Grid::zeros(&shape),
            s: 1.0,
        },
        xi: Some(Grid::zeros(&shape)),
    };
    let mut off = theta.clone();
    if theta.spec.kind != AugmentKind::Nonparametric {
        return Ok(true);
    }
    let grids = theta
        .params
        .iter()
        .map(|(n, g)| {
            if n == l2s_core::augment::SIGMA_NAME {
                Grid::scalar(l2s_core::augment::SIGMA_RAW_OFF)
            } else {
                g.clone()
            }
        })
        .collect();
    off = off.with_params(off.params.with_grids(grids)?);
    let y = augment_image(&off, image, &draw)?;
    Ok(y.data() == image.data())
}

/// Trains one run from the warm start, saving checkpoints and the metric log.
pub fn run_one(
    cfg: &ExperimentConfig,
    family: Family,
    data: &PresetData,
    phi0: Option<&SegWeights>,
    theta: Option<AugmentParams>,
) -> Result<RunResult> {
    let tc = cfg.train_config(family, &data.preset, key_seed(cfg.seed, &format!("{}/{}", family.label(), preset_label(&data.preset))));
    let dir = cfg.run_dir(family, &data.preset);
    create_dir(&dir)?;
    let start = std::time::Instant::now();
    let init = TrainInit {
        phi: phi0.cloned(),
        theta,
    };
    log::info!("{} run at preset {}", family.label(), preset_label(&data.preset));
    let TrainOutcome { phi, theta, log } = train(&tc, &data.train, Some(&data.val), init)?;
    let seconds = start.elapsed().as_secs_f64();
    save_seg(&phi, &dir, "phi")?;
    save_augment(&theta, &dir, "theta")?;
    write_log(&dir.join("log.csv"), &log)?;
    Ok(RunResult {
        family,
        preset: data.preset,
        phi,
        theta,
        log,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub preset: String,
    pub preset_sigma: f64,
    pub inferred_sigma: f64,
    pub final_sigma: f64,
    pub abs_error: f64,
    /// Wall-clock time; reported in `summary.json` but kept out of the CSV
    /// so reruns compare bitwise.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTable {
    pub mode: AugmentKind,
    pub rows: Vec<RecoveryRow>,
    /// Set in nonparametric mode: the zero-residual identity held before
    /// training.
    pub identity_verified: Option<bool>,
}

pub fn write_recovery(path: &Path, table: &RecoveryTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["preset", "preset_sigma", "inferred_sigma", "final_sigma", "abs_error"])?;
    for r in &table.rows {
        w.serialize((&r.preset, r.preset_sigma, r.inferred_sigma, r.final_sigma, r.abs_error))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// One learned run per preset; writes `table1.csv`.
pub fn run_recovery_experiment(
    cfg: &ExperimentConfig,
    data: &[PresetData],
    phi0: Option<&SegWeights>,
) -> Result<(RecoveryTable, Vec<RunResult>)> {
    let mut identity_verified = None;
    if cfg.mode == AugmentKind::Nonparametric {
        let tc = cfg.train_config(Family::Learned, &data[0].preset, 0);
        let theta = AugmentParams::init(tc.augment, tc.sigma_init, tc.c_init, &mut l2s_core::SeededRng::new(tc.seed))?;
        let ok = data[0].train.images.iter().all(|img| identity_holds(&theta, img).unwrap_or(false));
        if !ok {
            return Err(HarnessError::Report("zero-initialised residual network is not the identity".into()));
        }
        identity_verified = Some(true);
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for d in data {
        let run = run_one(cfg, Family::Learned, d, phi0, None)?;
        let inferred = run.inferred_sigma(cfg.train.readout_fraction);
        rows.push(RecoveryRow {
            preset: preset_label(&d.preset),
            preset_sigma: d.preset.nominal(),
            inferred_sigma: inferred,
            final_sigma: run.theta.sigma(),
            abs_error: (inferred - d.preset.nominal()).abs(),
            seconds: run.seconds,
        });
        runs.push(run);
    }
    let table = RecoveryTable {
        mode: cfg.mode,
        rows,
        identity_verified,
    };
    create_dir(&cfg.output_dir)?;
    write_recovery(&cfg.output_dir.join("table1.csv"), &table)?;
    Ok((table, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub family: Family,
    pub train_preset: String,
    /// Mean hard Dice per test column.
    pub dice: Vec<f64>,
}

/// Diagonal dominance of the learned family in one test column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceVerdict {
    pub column: String,
    pub matched: f64,
    pub mismatched_row: String,
    pub mismatched: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub columns: Vec<String>,
    pub column_sigma: Vec<f64>,
    pub rows: Vec<GridRow>,
    pub recovery: Vec<RecoveryRow>,
}

impl ResultsTable {
    pub fn cell(&self, family: Family, train: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows
            .iter()
            .find(|r| r.family == family && r.train_preset == train)
            .map(|r| r.dice[c])
    }

    /// For each column with a matching learned row: the matched Dice minus
    /// the Dice of the learned row whose preset is farthest from the column.
    pub fn dominance(&self, family: Family) -> Vec<DominanceVerdict> {
        let rows: Vec<&GridRow> = self.rows.iter().filter(|r| r.family == family).collect();
        let sigma_of = |label: &str| -> Option<f64> {
            self.columns.iter().position(|c| c == label).map(|i| self.column_sigma[i])
        };
        let mut out = Vec::new();
        for (ci, col) in self.columns.iter().enumerate() {
            let Some(matched) = rows.iter().find(|r| &r.train_preset == col) else {
                continue;
            };
            let cs = self.column_sigma[ci];
            let far = rows
                .iter()
                .filter_map(|r| sigma_of(&r.train_preset).map(|s| (r, (s - cs).abs())))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((far, _)) = far {
                out.push(DominanceVerdict {
                    column: col.clone(),
                    matched: matched.dice[ci],
                    mismatched_row: far.train_preset.clone(),
                    mismatched: far.dice[ci],
                    margin: matched.dice[ci] - far.dice[ci],
                });
            }
        }
        out
    }
}

pub fn write_grid(path: &Path, table: &ResultsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["family".to_string(), "train_sigma".to_string()];
    header.extend(table.columns.iter().map(|c| format!("test_{c}")));
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.family.label().to_string(), r.train_preset.clone()];
        rec.extend(r.dice.iter().map(|d| format!("{d}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Dice of `phi` on every column's test set.
pub fn evaluate_row(phi: &SegWeights, columns: &[PresetData]) -> Result<Vec<f64>> {
    columns.iter().map(|c| Ok(evaluate(phi, &c.test)?)).collect()
}

/// Trains the naive and optimized families next to the given learned runs and
/// scores every model on every test column; writes `grid.csv`.
pub fn run_cross_grid(
    cfg: &ExperimentConfig,
    rows: &[PresetData],
    columns: &[PresetData],
    learned: &[RunResult],
    recovery: &RecoveryTable,
    phi0: Option<&SegWeights>,
) -> Result<ResultsTable> {
    let mut grid_rows = Vec::new();
    for d in rows {
        let label = preset_label(&d.preset);
        let naive = run_one(cfg, Family::Naive, d, phi0, None)?;
        grid_rows.push(GridRow {
            family: Family::Naive,
            train_preset: label.clone(),
            dice: evaluate_row(&naive.phi, columns)?,
        });
        let Some(l) = learned.iter().find(|r| r.preset == d.preset) else {
            continue;
        };
        grid_rows.push(GridRow {
            family: Family::Learned,
            train_preset: label.clone(),
            dice: evaluate_row(&l.phi, columns)?,
        });
        let opt = run_one(cfg, Family::Optimized, d, phi0, Some(l.theta.clone()))?;
        grid_rows.push(GridRow {
            family: Family::Optimized,
            train_preset: label,
            dice: evaluate_row(&opt.phi, columns)?,
        });
    }
    let table = ResultsTable {
        columns: columns.iter().map(|c| preset_label(&c.preset)).collect(),
        column_sigma: columns.iter().map(|c| c.preset.nominal()).collect(),
        rows: grid_rows,
        recovery: recovery.rows.clone(),
    };
    write_grid(&cfg.output_dir.join("grid.csv"), &table)?;
    Ok(table)
}

/// Rebuilds the grid from saved checkpoints alone.
pub fn regrid_from_checkpoints(cfg: &ExperimentConfig, columns: &[PresetData]) -> Result<Vec<GridRow>> {
    let mut out = Vec::new();
    for p in &cfg.grid.presets {
        for family in [Family::Naive, Family::Learned, Family::Optimized] {
            let dir = cfg.run_dir(family, p);
            if !dir.join("phi.json").exists() {
                continue;
            }
            let phi = load_seg(&dir, "phi")?;
            out.push(GridRow {
                family,
                train_preset: preset_label(p),
                dice: evaluate_row(&phi, columns)?,
            });
        }
    }
    Ok(out)
}

/// Loads the theta a run saved.
pub fn load_run_theta(cfg: &ExperimentConfig, family: Family, preset: &SigmaPreset) -> Result<AugmentParams> {
    Ok(load_augment(cfg.run_dir(family, preset), "theta")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: AugmentKind,
    pub seed: u64,
    pub recovery: RecoveryTable,
    pub grid: Option<ResultsTable>,
    pub dominance: Vec<DominanceVerdict>,
    pub total_seconds: f64,
}

pub fn write_summary(cfg: &ExperimentConfig, summary: &Summary) -> Result<PathBuf> {
    let path = cfg.output_dir.join("summary.json");
    fs::write(&path, serde_json::to_vec_pretty(summary)?).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

/// Everything: data, warm start, recovery, and (optionally) the grid.
pub fn run_all(cfg: &ExperimentConfig, with_grid: bool) -> Result<Summary> {
    let start = std::time::Instant::now();
    create_dir(&cfg.output_dir)?;
    let resolved = cfg.output_dir.join("config.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| HarnessError::io(&resolved, e))?;
    let rows: Vec<PresetData> = cfg.grid.presets.iter().map(|p| prepare_data(cfg, p)).collect::<Result<_>>()?;
    let phi0 = pretrain(cfg, &rows[0])?;
    let (recovery, learned) = run_recovery_experiment(cfg, &rows, phi0.as_ref())?;
    let (grid, dominance) = if with_grid {
        let columns: Vec<PresetData> = cfg.grid.columns().iter().map(|p| prepare_data(cfg, p)).collect::<Result<_>>()?;
        let g = run_cross_grid(cfg, &rows, &columns, &learned, &recovery, phi0.as_ref())?;
        let d = g.dominance(Family::Learned);
        (Some(g), d)
    } else {
        (None, vec![])
    };
    let summary = Summary {
        mode: cfg.mode,
        seed: cfg.seed,
        recovery,
        grid,
        dominance,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    write_summary(cfg, &summary)?;
    Ok(summary)
}
