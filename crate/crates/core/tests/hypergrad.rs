use l2s_core::bilevel::{
    oracle_suite, real_pass_exact, real_pass_fdhvp, synthetic_pass, OracleCase, ScalarToy, ORACLE_OPTIONS,
};

#[test]
fn strategies_agree_on_twenty_dense_seeds() {
    let reports = oracle_suite(20, ORACLE_OPTIONS).unwrap();
    for (seed, r) in reports.iter().enumerate() {
        assert!(r.exact.is_some() && r.brute_force.is_some());
        assert!(r.max_rel_err() <= 1e-3, "seed {seed}: {r:?}");
        let norm: f64 = r.exact.as_ref().unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm > 1e-8, "seed {seed} has a vanishing hypergradient");
    }
}

#[test]
fn oracle_models_are_small() {
    let c = OracleCase::dense(0).unwrap();
    assert!(c.phi.numel() <= 50);
    assert!(c.phi.numel() + c.theta.numel() <= 200);
}

#[test]
fn scalar_toy_closed_form_to_1e6() {
    for (i, (phi, theta, eta, target)) in [(0.3, -1.0, 0.1, 0.8), (2.0, 0.5, 0.5, -1.0), (-1.5, 1.5, 0.01, 0.0)]
        .into_iter()
        .enumerate()
    {
        let toy = ScalarToy { target };
        let (p, t) = ScalarToy::params(phi, theta);
        let want = toy.closed_form(phi, theta, eta);
        let pass = synthetic_pass(&toy, &p, &t, eta).unwrap();
        let fd = real_pass_fdhvp(&toy, &p, &pass.phi_star, &t, eta, 1e-3).unwrap();
        let (_, ex) = real_pass_exact(&toy, &p, &t, eta).unwrap();
        assert!((fd.g_theta[0].item() - want).abs() <= 1e-6, "case {i}");
        assert!((ex.g_theta[0].item() - want).abs() <= 1e-6, "case {i}");
    }
}

#[test]
fn scalar_toy_outer_loop_reaches_fixed_point() {
    // theta descends g = eta (phi* - t) while phi keeps taking synthetic
    // steps; at the fixed point phi* = t and the hypergradient vanishes.
    let toy = ScalarToy { target: 0.7 };
    let eta = 0.5;
    let (mut phi, mut theta) = (-1.0, 2.0);
    let mut g = f64::INFINITY;
    for _ in 0..1000 {
        let (p, t) = ScalarToy::params(phi, theta);
        let pass = synthetic_pass(&toy, &p, &t, eta).unwrap();
        let fd = real_pass_fdhvp(&toy, &p, &pass.phi_star, &t, eta, 1e-3).unwrap();
        g = fd.g_theta[0].item();
        phi = pass.phi_star.grids()[0].item();
        theta -= 1.0 * g;
    }
    assert!(g.abs() < 1e-6, "{g}");
}
