use l2s_core::autodiff::{grad_check, relative_error, Tape};
use l2s_core::gradcheck::{loss_cases, primitive_cases};
use l2s_core::grid::{Distribution, Grid, SeededRng};
use l2s_core::segnet::soft_dice_loss;
use proptest::prelude::*;

#[test]
fn sum_of_squares() {
    let mut t = Tape::new();
    let x = t.leaf(Grid::from_vec(vec![1.0, 2.0, 3.0]));
    let sq = t.mul(x, x).unwrap();
    let l = t.sum(sq);
    let g = t.gradients(l, &[x]).unwrap();
    assert_eq!(g.values[0].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn inner_product_gradient_is_other_factor() {
    let mut t = Tape::new();
    let xv = Grid::from_vec(vec![0.5, -1.0, 2.0]);
    let yv = Grid::from_vec(vec![3.0, 0.25, -4.0]);
    let x = t.leaf(xv);
    let y = t.leaf(yv.clone());
    let p = t.mul(x, y).unwrap();
    let l = t.sum(p);
    let g = t.gradients(l, &[x]).unwrap();
    assert_eq!(g.values[0], yv);
}

#[test]
fn double_backward_of_half_squared_norm() {
    // f = |x|^2 / 2, g = |grad f|^2 = |x|^2, dg/dx = 2x.
    let xv = Grid::from_vec(vec![1.5, -0.5, 2.0, 0.25]);
    let mut t = Tape::new();
    let x = t.leaf(xv.clone());
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let f = t.mul_scalar(s, 0.5);
    let gf = t.gradients_graph(f, &[x]).unwrap().values[0];
    let gsq = t.mul(gf, gf).unwrap();
    let g = t.sum(gsq);
    let dg = t.gradients(g, &[x]).unwrap();
    assert!(relative_error(&dg.values[0], &xv.scale(2.0)) < 1e-14);
}

#[test]
fn backward_is_idempotent() {
    let mut t = Tape::new();
    let x = t.leaf(Grid::from_vec(vec![0.3, -0.7]));
    let e = t.exp(x);
    let l = t.sum(e);
    let a = t.gradients(l, &[x]).unwrap();
    let b = t.gradients(l, &[x]).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn unreachable_input_gets_flagged_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Grid::from_vec(vec![1.0, 2.0]));
    let y = t.leaf(Grid::from_vec(vec![5.0]));
    let l = t.sum(x);
    let g = t.gradients(l, &[x, y]).unwrap();
    assert_eq!(g.unreachable, vec![1]);
    assert_eq!(g.values[1].data(), &[0.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(Grid::from_vec(vec![2.0]));
    let a = t.mul_scalar(x, 3.0);
    let b = t.exp(x);
    let s = t.add(a, b).unwrap();
    let l = t.sum(s);
    let g = t.gradients(l, &[x]).unwrap();
    assert!((g.values[0].item() - (3.0 + 2f64.exp())).abs() < 1e-12);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Grid::from_vec(vec![0.0, 1.0, -1.0]));
    let r = t.relu(x);
    let l = t.sum(r);
    let g = t.gradients(l, &[x]).unwrap();
    assert_eq!(g.values[0].data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn independent_subgraphs_concatenate() {
    let xv = Grid::from_vec(vec![0.2, 0.9]);
    let yv = Grid::from_vec(vec![-1.1, 0.4, 3.0]);
    let mut t = Tape::new();
    let x = t.leaf(xv.clone());
    let y = t.leaf(yv.clone());
    let ex = t.exp(x);
    let sx = t.sum(ex);
    let yy = t.mul(y, y).unwrap();
    let sy = t.sum(yy);
    let l = t.add(sx, sy).unwrap();
    let joint = t.gradients(l, &[x, y]).unwrap();
    let gx = t.gradients(sx, &[x]).unwrap();
    let gy = t.gradients(sy, &[y]).unwrap();
    assert_eq!(joint.values[0], gx.values[0]);
    assert_eq!(joint.values[1], gy.values[0]);
}

#[test]
fn linear_map_check_is_exact() {
    let m = Grid::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
    let x = Grid::from_fn(&[4, 1], |i| i as f64 - 1.5);
    let chk = grad_check(
        |t, v| {
            let mv = t.constant(m.clone());
            let y = t.matmul(mv, v)?;
            Ok(t.sum(y))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(chk.max_rel_err <= 1e-10, "{}", chk.max_rel_err);
}

#[test]
fn soft_dice_on_random_8x8() {
    let mut rng = SeededRng::new(12);
    let logits = rng.sample(Distribution::Normal, &[2, 8, 8]).unwrap();
    let y = Grid::from_fn(&[2, 8, 8], |i| {
        let fg = (i % 64) % 3 == 0;
        if (i < 64) != fg {
            1.0
        } else {
            0.0
        }
    });
    let chk = grad_check(
        |t, v| {
            let p = t.softmax0(v);
            soft_dice_loss(t, p, &y)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(chk.max_rel_err <= 1e-5, "{}", chk.max_rel_err);
}

#[test]
fn conv_relu_sum_off_kinks() {
    let mut rng = SeededRng::new(5);
    let x = rng.sample(Distribution::Normal, &[2, 6, 6]).unwrap();
    let k = rng.sample(Distribution::Normal, &[3, 2, 3, 3]).unwrap();
    let pre = l2s_core::grid::conv2d(&x, &k).unwrap();
    assert!(pre.data().iter().all(|v| v.abs() > 1e-4), "seed puts an output on a kink");
    let chk = grad_check(
        |t, v| {
            let kv = t.constant(k.clone());
            let c = t.conv2d(v, kv)?;
            let r = t.relu(c);
            Ok(t.sum(r))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(chk.max_rel_err <= 1e-4, "{}", chk.max_rel_err);
}

#[test]
fn every_primitive_passes() {
    for case in primitive_cases(0).unwrap() {
        assert!(case.passed(), "{}: {} (gradient {})", case.name, case.max_rel_err, case.grad_max_abs);
    }
}

#[test]
fn both_losses_pass() {
    for case in loss_cases(0).unwrap() {
        assert!(case.passed(), "{}: {} (gradient {})", case.name, case.max_rel_err, case.grad_max_abs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn primitives_pass_at_random_points(seed in 0u64..10_000) {
        for case in primitive_cases(seed).unwrap() {
            prop_assert!(case.passed(), "{}: {} (gradient {})", case.name, case.max_rel_err, case.grad_max_abs);
        }
    }

    #[test]
    fn elementwise_chain_gradient(xs in proptest::collection::vec(-2.0f64..2.0, 1..8)) {
        // d/dx sum(sigmoid(x) * exp(x)) computed by hand.
        let g = Grid::from_vec(xs.clone());
        let mut t = Tape::new();
        let x = t.leaf(g);
        let s = t.sigmoid(x);
        let e = t.exp(x);
        let p = t.mul(s, e).unwrap();
        let l = t.sum(p);
        let got = t.gradients(l, &[x]).unwrap().values.remove(0);
        for (v, &x0) in got.data().iter().zip(&xs) {
            let sg = 1.0 / (1.0 + (-x0).exp());
            let want = sg * (1.0 - sg) * x0.exp() + sg * x0.exp();
            prop_assert!((v - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }
}
