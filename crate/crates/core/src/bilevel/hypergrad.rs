use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{global_norm, ParamSet};

/// The two losses of the bilevel problem with every source of randomness
/// already frozen, so each can be evaluated repeatedly at different points.
pub trait BilevelProblem {
    /// `L_synth(phi, theta)`.
    fn synth_loss(&self, tape: &mut Tape, phi: &[Var], theta: &[Var]) -> Result<Var>;
    /// `L_real(phi)`.
    fn real_loss(&self, tape: &mut Tape, phi: &[Var]) -> Result<Var>;
}

/// `phi - eta * g`.
pub fn sgd_step(phi: &ParamSet, grad: &[Grid], eta: f64) -> Result<ParamSet> {
    phi.axpy(-eta, grad)
}

#[derive(Debug, Clone)]
pub struct SyntheticPass {
    pub loss: f64,
    pub grad_phi: Vec<Grid>,
    pub phi_star: ParamSet,
}

/// One inner SGD step on `L_synth`; `theta` enters as constants.
pub fn synthetic_pass<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamSet,
    theta: &ParamSet,
    eta: f64,
) -> Result<SyntheticPass> {
    let mut tape = Tape::new();
    let pv = phi.leaves(&mut tape);
    let tv = theta.constants(&mut tape);
    let loss = problem.synth_loss(&mut tape, &pv, &tv)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let grad_phi = tape.gradients(loss, &pv)?.values;
    let phi_star = sgd_step(phi, &grad_phi, eta)?;
    Ok(SyntheticPass {
        loss: value,
        grad_phi,
        phi_star,
    })
}

/// `(L_real(phi*), dL_real/dphi*)`.
pub fn real_gradient<P: BilevelProblem + ?Sized>(problem: &P, phi_star: &ParamSet) -> Result<(f64, Vec<Grid>)> {
    let mut tape = Tape::new();
    let pv = phi_star.leaves(&mut tape);
    let loss = problem.real_loss(&mut tape, &pv)?;
    let v = tape.gradients(loss, &pv)?.values;
    Ok((tape.value(loss).item(), v))
}

/// `dL_synth/dtheta` at `(phi, theta)`.
pub fn theta_gradient<P: BilevelProblem + ?Sized>(problem: &P, phi: &ParamSet, theta: &ParamSet) -> Result<Vec<Grid>> {
    let mut tape = Tape::new();
    let pv = phi.constants(&mut tape);
    let tv = theta.leaves(&mut tape);
    let loss = problem.synth_loss(&mut tape, &pv, &tv)?;
    Ok(tape.gradients(loss, &tv)?.values)
}

#[derive(Debug, Clone)]
pub struct RealPass {
    pub loss: f64,
    pub g_theta: Vec<Grid>,
    /// `||dL_real/dphi*||`.
    pub v_norm: f64,
    /// Perturbation radius used by the finite-difference path (0 otherwise).
    pub eps_hat: f64,
}

/// Hypergradient by differentiating through the SGD update on a retained
/// graph. Needs second-order support for every op in `synth_loss`.
pub fn real_pass_exact<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamSet,
    theta: &ParamSet,
    eta: f64,
) -> Result<(SyntheticPass, RealPass)> {
    let mut tape = Tape::new();
    let pv = phi.leaves(&mut tape);
    let tv = theta.leaves(&mut tape);
    let ls = problem.synth_loss(&mut tape, &pv, &tv)?;
    let g = tape.gradients_graph(ls, &pv)?.values;
    let mut star = Vec::with_capacity(pv.len());
    for (&p, &gi) in pv.iter().zip(&g) {
        let step = tape.mul_scalar(gi, -eta);
        star.push(tape.add(p, step)?);
    }
    let lr = problem.real_loss(&mut tape, &star)?;
    let g_theta = tape.gradients(lr, &tv)?.values;
    let v = tape.gradients(lr, &star)?.values;
    let grad_phi: Vec<Grid> = g.iter().map(|&gi| tape.value(gi).clone()).collect();
    let phi_star = phi.with_grids(star.iter().map(|&s| tape.value(s).clone()).collect())?;
    Ok((
        SyntheticPass {
            loss: tape.value(ls).item(),
            grad_phi,
            phi_star,
        },
        RealPass {
            loss: tape.value(lr).item(),
            g_theta,
            v_norm: global_norm(&v),
            eps_hat: 0.0,
        },
    ))
}

/// Hypergradient from a central difference of `dL_synth/dtheta` along
/// `v = dL_real/dphi*`:
/// `g = -eta (d_theta L(phi + e v) - d_theta L(phi - e v)) / (2 e)` with
/// `e = delta / ||v||`. `phi` is the point before the inner update.
pub fn real_pass_fdhvp<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamSet,
    phi_star: &ParamSet,
    theta: &ParamSet,
    eta: f64,
    delta: f64,
) -> Result<RealPass> {
    let (loss, v) = real_gradient(problem, phi_star)?;
    let v_norm = global_norm(&v);
    if v_norm == 0.0 {
        let g_theta = theta.grids().iter().map(|g| Grid::zeros(g.shape())).collect();
        return Ok(RealPass {
            loss,
            g_theta,
            v_norm,
            eps_hat: 0.0,
        });
    }
    let eps = delta / v_norm;
    let gp = theta_gradient(problem, &phi.axpy(eps, &v)?, theta)?;
    let gm = theta_gradient(problem, &phi.axpy(-eps, &v)?, theta)?;
    let scale = -eta / (2.0 * eps);
    let g_theta = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| Ok(a.sub(b)?.scale(scale)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RealPass {
        loss,
        g_theta,
        v_norm,
        eps_hat: eps,
    })
}

/// Brute-force oracle: builds every column of the mixed Hessian by central
/// differences over single `phi` coordinates, then multiplies by `-eta v`.
pub fn hypergrad_bruteforce<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamSet,
    theta: &ParamSet,
    eta: f64,
    h: f64,
) -> Result<Vec<Grid>> {
    let pass = synthetic_pass(problem, phi, theta, eta)?;
    let (_, v) = real_gradient(problem, &pass.phi_star)?;
    let v = ParamSet::new(phi.names().to_vec(), v)?.flatten();
    let flat = phi.flatten();
    let mut acc: Vec<Grid> = theta.grids().iter().map(|g| Grid::zeros(g.shape())).collect();
    for j in 0..flat.len() {
        let vj = v.data()[j];
        if vj == 0.0 {
            continue;
        }
        let mut plus = flat.to_vec();
        let mut minus = flat.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let gp = theta_gradient(problem, &phi.unflatten(&Grid::from_vec(plus))?, theta)?;
        let gm = theta_gradient(problem, &phi.unflatten(&Grid::from_vec(minus))?, theta)?;
        let coeff = -eta * vj / (2.0 * h);
        for ((a, p), m) in acc.iter_mut().zip(&gp).zip(&gm) {
            *a = a.axpy(coeff, &p.sub(m)?)?;
        }
    }
    Ok(acc)
}

/// Hypergradients from all strategies on the same point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypergradReport {
    /// `None` when the model has ops without second-order support.
    pub exact: Option<Vec<f64>>,
    pub finite_difference: Vec<f64>,
    pub brute_force: Option<Vec<f64>>,
    pub eps_hat: f64,
    pub rel_exact_fd: Option<f64>,
    pub rel_exact_brute: Option<f64>,
    pub rel_fd_brute: Option<f64>,
}

impl HypergradReport {
    pub fn max_rel_err(&self) -> f64 {
        [self.rel_exact_fd, self.rel_exact_brute, self.rel_fd_brute]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }
}

fn flat(grids: &[Grid]) -> Vec<f64> {
    grids.iter().flat_map(|g| g.data().iter().copied()).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    relative_error(&Grid::from_vec(a.to_vec()), &Grid::from_vec(b.to_vec()))
}

/// Settings for [`compare_hypergrads`].
#[derive(Debug, Clone, Copy)]
pub struct CompareOptions {
    pub eta: f64,
    pub delta: f64,
    /// Coordinate step of the brute-force oracle; `None` skips it.
    pub brute_h: Option<f64>,
}

pub fn compare_hypergrads<P: BilevelProblem + ?Sized>(
    problem: &P,
    phi: &ParamSet,
    theta: &ParamSet,
    opts: CompareOptions,
) -> Result<HypergradReport> {
    let exact = match real_pass_exact(problem, phi, theta, opts.eta) {
        Ok((_, r)) => Some(flat(&r.g_theta)),
        Err(Error::Autodiff(msg)) => {
            log::info!("exact hypergradient unavailable: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let pass = synthetic_pass(problem, phi, theta, opts.eta)?;
    let fd = real_pass_fdhvp(problem, phi, &pass.phi_star, theta, opts.eta, opts.delta)?;
    let finite_difference = flat(&fd.g_theta);
    let brute_force = match opts.brute_h {
        Some(h) => Some(flat(&hypergrad_bruteforce(problem, phi, theta, opts.eta, h)?)),
        None => None,
    };
    Ok(HypergradReport {
        rel_exact_fd: exact.as_ref().map(|e| rel(e, &finite_difference)),
        rel_exact_brute: exact.as_ref().zip(brute_force.as_ref()).map(|(e, b)| rel(e, b)),
        rel_fd_brute: brute_force.as_ref().map(|b| rel(&finite_difference, b)),
        exact,
        finite_difference,
        brute_force,
        eps_hat: fd.eps_hat,
    })
}

/// `L_synth = (phi - theta)^2 / 2`, `L_real = (phi - t)^2 / 2` on scalars.
#[derive(Debug, Clone, Copy)]
pub struct ScalarToy {
    pub target: f64,
}

impl ScalarToy {
    /// `phi* = phi - eta (phi - theta)`; `g_theta = eta (phi* - t)`.
    pub fn closed_form(&self, phi: f64, theta: f64, eta: f64) -> f64 {
        let star = phi - eta * (phi - theta);
        eta * (star - self.target)
    }

    pub fn params(phi: f64, theta: f64) -> (ParamSet, ParamSet) {
        let p = ParamSet::new(vec!["phi".into()], vec![Grid::scalar(phi)]).expect("one name, one grid");
        let t = ParamSet::new(vec!["theta".into()], vec![Grid::scalar(theta)]).expect("one name, one grid");
        (p, t)
    }
}

fn half_square(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum(d2);
    Ok(tape.mul_scalar(s, 0.5))
}

impl BilevelProblem for ScalarToy {
    fn synth_loss(&self, tape: &mut Tape, phi: &[Var], theta: &[Var]) -> Result<Var> {
        half_square(tape, phi[0], theta[0])
    }

    fn real_loss(&self, tape: &mut Tape, phi: &[Var]) -> Result<Var> {
        let t = tape.constant(Grid::scalar(self.target));
        half_square(tape, phi[0], t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_inner_rate_keeps_phi_bitwise() {
        let (p, t) = ScalarToy::params(0.3, -1.2);
        let pass = synthetic_pass(&ScalarToy { target: 0.5 }, &p, &t, 0.0).unwrap();
        assert_eq!(pass.phi_star, p);
    }

    #[test]
    fn quadratic_step_scales_phi() {
        struct Quad;
        impl BilevelProblem for Quad {
            fn synth_loss(&self, t: &mut Tape, phi: &[Var], _: &[Var]) -> Result<Var> {
                let z = t.constant(Grid::zeros(&[3]));
                half_square(t, phi[0], z)
            }
            fn real_loss(&self, t: &mut Tape, phi: &[Var]) -> Result<Var> {
                Ok(t.sum(phi[0]))
            }
        }
        let p = ParamSet::new(vec!["w".into()], vec![Grid::from_vec(vec![1.0, -2.0, 4.0])]).unwrap();
        let th = ParamSet::new(vec!["t".into()], vec![Grid::scalar(0.0)]).unwrap();
        let eta = 0.25;
        let pass = synthetic_pass(&Quad, &p, &th, eta).unwrap();
        let expected = p.grids()[0].scale(1.0 - eta);
        for (a, b) in pass.phi_star.grids()[0].data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        // theta does not reach L_synth: every strategy returns zero
        let (_, r) = real_pass_exact(&Quad, &p, &th, eta).unwrap();
        assert_eq!(r.g_theta[0].item(), 0.0);
        let fd = real_pass_fdhvp(&Quad, &p, &pass.phi_star, &th, eta, 1e-3).unwrap();
        assert_eq!(fd.g_theta[0].item(), 0.0);
    }

    #[test]
    fn dead_real_path_gives_zero() {
        struct Dead;
        impl BilevelProblem for Dead {
            fn synth_loss(&self, t: &mut Tape, phi: &[Var], th: &[Var]) -> Result<Var> {
                half_square(t, phi[0], th[0])
            }
            fn real_loss(&self, t: &mut Tape, phi: &[Var]) -> Result<Var> {
                let c = t.constant(Grid::scalar(0.7));
                let z = t.mul_scalar(phi[0], 0.0);
                t.add(c, z)
            }
        }
        let (p, th) = ScalarToy::params(0.4, 0.9);
        let (_, r) = real_pass_exact(&Dead, &p, &th, 0.1).unwrap();
        assert_eq!(r.g_theta[0].item(), 0.0);
        let pass = synthetic_pass(&Dead, &p, &th, 0.1).unwrap();
        let fd = real_pass_fdhvp(&Dead, &p, &pass.phi_star, &th, 0.1, 1e-3).unwrap();
        assert_eq!(fd.v_norm, 0.0);
        assert_eq!(fd.g_theta[0].item(), 0.0);
    }

    #[test]
    fn scalar_toy_matches_closed_form() {
        let toy = ScalarToy { target: 0.8 };
        for (phi, theta, eta) in [(0.3, -1.0, 0.1), (2.0, 0.5, 0.5), (-1.5, 1.5, 0.01)] {
            let (p, t) = ScalarToy::params(phi, theta);
            let want = toy.closed_form(phi, theta, eta);
            let (_, exact) = real_pass_exact(&toy, &p, &t, eta).unwrap();
            assert!((exact.g_theta[0].item() - want).abs() < 1e-12);
            let pass = synthetic_pass(&toy, &p, &t, eta).unwrap();
            let fd = real_pass_fdhvp(&toy, &p, &pass.phi_star, &t, eta, 1e-3).unwrap();
            assert!((fd.g_theta[0].item() - want).abs() < 1e-6);
            let bf = hypergrad_bruteforce(&toy, &p, &t, eta, 1e-5).unwrap();
            assert!((bf[0].item() - want).abs() < 1e-6);
        }
    }

    #[test]
    fn hypergradient_is_linear_in_eta_to_first_order() {
        // g = eta (phi - eta (phi - theta) - t): doubling eta doubles the
        // leading term; the closed form is checked exactly instead
        let toy = ScalarToy { target: 0.0 };
        let (p, t) = ScalarToy::params(1.0, 1.0);
        let g1 = real_pass_exact(&toy, &p, &t, 0.1).unwrap().1.g_theta[0].item();
        let g2 = real_pass_exact(&toy, &p, &t, 0.2).unwrap().1.g_theta[0].item();
        // phi == theta keeps phi* = phi, so the relation is exact
        assert!((g2 - 2.0 * g1).abs() < 1e-15);
    }
}
