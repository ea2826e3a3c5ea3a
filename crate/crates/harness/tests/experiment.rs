use std::fs;
use std::path::Path;

use l2s_core::augment::AugmentKind;
use l2s_core::bilevel::evaluate;
use l2s_core::checkpoint::load_seg;
use l2s_core::synth::SigmaPreset;
use l2s_harness::config::Family;
use l2s_harness::experiment::{prepare_data, regrid_from_checkpoints, run_all};
use l2s_harness::report::render_report;
use l2s_harness::ExperimentConfig;

fn tiny(mode: AugmentKind, dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(mode, dir);
    c.data.height = 16;
    c.data.width = 16;
    c.data.cell = 8;
    c.data.train_count = 3;
    c.data.val_count = 2;
    c.data.test_count = 3;
    c.data.lattice = vec![2, 4];
    if !c.data.real_bias_c.is_empty() {
        c.data.real_bias_c = vec![0.5, 0.5];
    }
    c.grid.presets = vec![SigmaPreset::Fixed(0.0), SigmaPreset::Fixed(0.1)];
    c.model.widths = vec![2, 4];
    c.model.residual_widths = vec![2, 2];
    c.pretrain.iterations = 4;
    c.train.iterations = 6;
    c.train.batch = 2;
    c.train.real_batch = 2;
    c.train.val_every = 3;
    c
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(AugmentKind::NoiseOnly, dir.path());
    let summary = run_all(&cfg, true).unwrap();
    for f in ["table1.csv", "grid.csv", "summary.json", "config.toml"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert_eq!(summary.recovery.rows.len(), 2);
    let grid = summary.grid.as_ref().unwrap();
    // naive, learned and optimized for each preset
    assert_eq!(grid.rows.len(), 6);
    for r in &grid.rows {
        assert_eq!(r.dice.len(), 2);
        assert!(r.dice.iter().all(|d| (0.0..=1.0).contains(d)));
    }
    assert_eq!(summary.dominance.len(), 2);
    let md = render_report(dir.path()).unwrap();
    assert!(md.contains("| preset sigma |"));
    assert!(dir.path().join("plots/sigma.png").is_file());
    assert!(dir.path().join("report.md").is_file());
}

#[test]
fn cells_are_recomputable_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(AugmentKind::NoiseOnly, dir.path());
    let summary = run_all(&cfg, true).unwrap();
    let grid = summary.grid.unwrap();
    let columns: Vec<_> = cfg.grid.columns().iter().map(|p| prepare_data(&cfg, p).unwrap()).collect();
    let again = regrid_from_checkpoints(&cfg, &columns).unwrap();
    assert_eq!(again.len(), grid.rows.len());
    for row in &again {
        let orig = grid
            .rows
            .iter()
            .find(|r| r.family == row.family && r.train_preset == row.train_preset)
            .unwrap();
        for (a, b) in row.dice.iter().zip(&orig.dice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    let phi = load_seg(cfg.run_dir(Family::Learned, &cfg.grid.presets[1]), "phi").unwrap();
    let d = evaluate(&phi, &columns[1].test).unwrap();
    assert!((d - grid.cell(Family::Learned, "0.1", "0.1").unwrap()).abs() <= 1e-12);
}

#[test]
fn reports_are_bitwise_stable_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&tiny(AugmentKind::NoiseOnly, a.path()), true).unwrap();
    run_all(&tiny(AugmentKind::NoiseOnly, b.path()), true).unwrap();
    for f in ["table1.csv", "grid.csv", "runs/learned_0.1/log.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn preset_order_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = tiny(AugmentKind::NoiseOnly, a.path());
    let mut cb = tiny(AugmentKind::NoiseOnly, b.path());
    cb.grid.presets.reverse();
    let sa = run_all(&ca, false).unwrap();
    let sb = run_all(&cb, false).unwrap();
    for r in &sa.recovery.rows {
        let other = sb.recovery.rows.iter().find(|o| o.preset == r.preset).unwrap();
        assert_eq!(r.inferred_sigma.to_bits(), other.inferred_sigma.to_bits());
    }
}

#[test]
fn other_modes_run_and_nonparametric_checks_identity() {
    for mode in [AugmentKind::NoiseBias, AugmentKind::Nonparametric] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(mode, dir.path());
        cfg.grid.presets.truncate(1);
        let s = run_all(&cfg, false).unwrap();
        assert_eq!(s.recovery.rows.len(), 1);
        assert_eq!(s.recovery.identity_verified, (mode == AugmentKind::Nonparametric).then_some(true));
    }
}

#[test]
fn generated_data_is_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(AugmentKind::NoiseOnly, dir.path());
    let p = SigmaPreset::Fixed(0.1);
    let d1 = prepare_data(&cfg, &p).unwrap();
    let manifest = dir.path().join("data/0.1/train/manifest.json");
    let stamp = fs::metadata(&manifest).unwrap().modified().unwrap();
    let d2 = prepare_data(&cfg, &p).unwrap();
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), stamp);
    assert_eq!(d1.train.images, d2.train.images);
    assert!(d1.train.manifest.samples.iter().all(|s| s.sigma == 0.1));
}
