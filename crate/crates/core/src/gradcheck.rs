//! Central-difference checks of every differentiable primitive and of both
//! training losses, at fixed random points.
//!
//! Inputs are kept away from non-differentiable points: relu arguments are
//! bounded away from zero and max-pool windows have well separated values.

use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentDraw, AugmentParams, AugmentSpec, NoiseMode};
use crate::autodiff::{grad_check, Tape, Var};
use crate::error::Result;
use crate::grid::{Distribution, Grid, SeededRng};
use crate::params::ParamSet;
use crate::segnet::{soft_dice_loss, DenseSpec, SegArch, UNetSpec};

/// Required bound on the relative error of every case.
pub const TOLERANCE: f64 = 1e-5;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckCase {
    pub name: String,
    pub max_rel_err: f64,
    /// Largest analytic gradient entry; a vanishing gradient would make the
    /// comparison vacuous.
    pub grad_max_abs: f64,
}

impl CheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE && self.grad_max_abs > 0.0
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// `sum(y * w)` for a fixed weight grid, so every output element matters.
fn weighted(t: &mut Tape, y: Var, w: &Grid) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    Ok(t.sum(p))
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Grid {
    rng.sample(Distribution::Normal, shape).expect("non-empty shape")
}

/// Normal values pushed at least `gap` away from zero.
fn off_zero(rng: &mut SeededRng, shape: &[usize], gap: f64) -> Grid {
    normal(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// A random permutation of well separated values, for max-pool inputs.
fn separated(rng: &mut SeededRng, shape: &[usize]) -> Grid {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    Grid::from_fn(shape, |i| idx[i] as f64 * 0.1 - n as f64 * 0.05)
}

/// Splits a flat var into vars shaped like `like`.
fn unflatten(t: &mut Tape, flat: Var, like: &ParamSet) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(like.len());
    let mut off = 0;
    for g in like.grids() {
        let s = t.slice0(flat, off, g.len())?;
        out.push(t.reshape(s, g.shape())?);
        off += g.len();
    }
    Ok(out)
}

fn run(name: &str, x: &Grid, f: CaseFn) -> Result<CheckCase> {
    let chk = grad_check(|t, v| f(t, v), x, STEP)?;
    Ok(CheckCase {
        name: name.to_string(),
        max_rel_err: chk.max_rel_err,
        grad_max_abs: chk.analytic.max_abs(),
    })
}

/// One case per tape primitive.
pub fn primitive_cases(seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = SeededRng::new(seed);
    let s = [3, 4];
    let a = normal(&mut rng, &s);
    let b = normal(&mut rng, &s);
    let w = normal(&mut rng, &s);
    let pos = rng.sample(Distribution::Uniform { lo: 0.5, hi: 2.0 }, &s)?;
    let mut out = Vec::new();

    macro_rules! unary {
        ($name:expr, $x:expr, $w:expr, |$t:ident, $v:ident| $body:expr) => {{
            let w = $w.clone();
            out.push(run(
                $name,
                &$x,
                Box::new(move |$t: &mut Tape, $v: Var| {
                    let y = $body?;
                    weighted($t, y, &w)
                }),
            )?);
        }};
    }
    macro_rules! binary {
        ($name:expr, $other:expr, |$t:ident, $v:ident, $o:ident| $body:expr) => {{
            let other = $other.clone();
            let w = w.clone();
            out.push(run(
                $name,
                &a,
                Box::new(move |$t: &mut Tape, $v: Var| {
                    let $o = $t.constant(other.clone());
                    let y = $body?;
                    weighted($t, y, &w)
                }),
            )?);
        }};
    }

    binary!("add", b, |t, v, o| t.add(v, o));
    binary!("add (rhs)", b, |t, v, o| t.add(o, v));
    binary!("sub", b, |t, v, o| t.sub(v, o));
    binary!("sub (rhs)", b, |t, v, o| t.sub(o, v));
    binary!("mul", b, |t, v, o| t.mul(v, o));
    binary!("mul (self)", b, |t, v, _o| t.mul(v, v));
    binary!("div (numerator)", pos, |t, v, o| t.div(v, o));
    {
        let num = a.clone();
        let w = w.clone();
        out.push(run(
            "div (denominator)",
            &pos,
            Box::new(move |t: &mut Tape, v: Var| {
                let n = t.constant(num.clone());
                let y = t.div(n, v)?;
                weighted(t, y, &w)
            }),
        )?);
    }
    unary!("neg", a, w, |t, v| Ok::<_, crate::Error>(t.neg(v)));
    unary!("add_scalar", a, w, |t, v| Ok::<_, crate::Error>(t.add_scalar(v, 0.7)));
    unary!("mul_scalar", a, w, |t, v| Ok::<_, crate::Error>(t.mul_scalar(v, -1.3)));
    unary!("powf", pos, w, |t, v| Ok::<_, crate::Error>(t.powf(v, -0.5)));
    unary!("powf (cube)", a, w, |t, v| Ok::<_, crate::Error>(t.powf(v, 3.0)));
    unary!("exp", a, w, |t, v| Ok::<_, crate::Error>(t.exp(v)));
    unary!("ln", pos, w, |t, v| Ok::<_, crate::Error>(t.ln(v)));
    unary!("sigmoid", a, w, |t, v| Ok::<_, crate::Error>(t.sigmoid(v)));
    unary!("softplus", a, w, |t, v| Ok::<_, crate::Error>(t.softplus(v)));
    let kinkless = off_zero(&mut rng, &s, 0.05);
    unary!("relu", kinkless, w, |t, v| Ok::<_, crate::Error>(t.relu(v)));
    {
        let base = a.clone();
        let wf = w.clone();
        out.push(run(
            "scale (factor)",
            &Grid::scalar(0.8),
            Box::new(move |t: &mut Tape, v: Var| {
                let g = t.constant(base.clone());
                let y = t.scale(g, v)?;
                weighted(t, y, &wf)
            }),
        )?);
        unary!("scale (grid)", a, w, |t, v| {
            let k = t.constant(Grid::scalar(-0.6));
            t.scale(v, k)
        });
    }
    {
        let w = w.clone();
        out.push(run(
            "expand",
            &Grid::scalar(0.4),
            Box::new(move |t: &mut Tape, v: Var| {
                let y = t.expand(v, &[3, 4])?;
                weighted(t, y, &w)
            }),
        )?);
    }
    unary!("sum", a, Grid::scalar(1.7), |t, v| Ok::<_, crate::Error>(t.sum(v)));
    unary!("mean", a, Grid::scalar(-2.1), |t, v| Ok::<_, crate::Error>(t.mean(v)));
    let w3 = normal(&mut rng, &[3]);
    unary!("sum_rows", a, w3, |t, v| Ok::<_, crate::Error>(t.sum_rows(v)));
    unary!("broadcast_rows", normal(&mut rng, &[3]), w, |t, v| t.broadcast_rows(v, &[4]));
    let w4 = normal(&mut rng, &[4]);
    unary!("sum_axis0", a, w4, |t, v| Ok::<_, crate::Error>(t.sum_axis0(v)));
    unary!("broadcast_axis0", normal(&mut rng, &[4]), w, |t, v| Ok::<_, crate::Error>(t.broadcast_axis0(v, 3)));
    let m = normal(&mut rng, &[4, 2]);
    let w32 = normal(&mut rng, &[3, 2]);
    {
        let m = m.clone();
        unary!("matmul (lhs)", a, w32, |t, v| {
            let mv = t.constant(m.clone());
            t.matmul(v, mv)
        });
    }
    {
        let lhs = a.clone();
        unary!("matmul (rhs)", m, w32, |t, v| {
            let l = t.constant(lhs.clone());
            t.matmul(l, v)
        });
    }
    let w43 = normal(&mut rng, &[4, 3]);
    unary!("transpose", a, w43, |t, v| t.transpose(v));
    unary!("softmax0", a, w, |t, v| Ok::<_, crate::Error>(t.softmax0(v)));
    {
        let other = b.clone();
        let w64 = normal(&mut rng, &[6, 4]);
        unary!("concat0", a, w64, |t, v| {
            let o = t.constant(other.clone());
            t.concat0(&[o, v])
        });
    }
    let w24 = normal(&mut rng, &[2, 4]);
    unary!("slice0", a, w24, |t, v| t.slice0(v, 1, 2));
    let w54 = normal(&mut rng, &[5, 4]);
    unary!("pad0", a, w54, |t, v| t.pad0(v, 1, 5));
    let w26 = normal(&mut rng, &[2, 6]);
    unary!("reshape", a, w26, |t, v| t.reshape(v, &[2, 6]));

    let img = normal(&mut rng, &[2, 5, 6]);
    let ker = normal(&mut rng, &[3, 2, 3, 3]);
    let wc = normal(&mut rng, &[3, 5, 6]);
    {
        let k = ker.clone();
        unary!("conv2d (input)", img, wc, |t, v| {
            let kv = t.constant(k.clone());
            t.conv2d(v, kv)
        });
    }
    {
        let x = img.clone();
        unary!("conv2d (kernel)", ker, wc, |t, v| {
            let xv = t.constant(x.clone());
            t.conv2d(xv, v)
        });
    }
    {
        let x = normal(&mut rng, &[3, 5, 6]);
        unary!("add_channel_bias", normal(&mut rng, &[3]), wc, |t, v| {
            let xv = t.constant(x.clone());
            t.add_channel_bias(xv, v)
        });
    }
    let pool_in = separated(&mut rng, &[2, 4, 6]);
    let wp = normal(&mut rng, &[2, 2, 3]);
    unary!("maxpool2", pool_in, wp, |t, v| t.maxpool2(v));
    let wu = normal(&mut rng, &[2, 4, 6]);
    unary!("upsample2", normal(&mut rng, &[2, 2, 3]), wu, |t, v| t.upsample2(v));
    let ws = normal(&mut rng, &[1, 4, 4]);
    unary!("standardize", normal(&mut rng, &[1, 4, 4]), ws, |t, v| crate::segnet::standardize(t, v));
    Ok(out)
}

fn one_hot(rng: &mut SeededRng, classes: usize, h: usize, w: usize) -> Grid {
    let n = h * w;
    let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
    Grid::from_fn(&[classes, h, w], |i| if labels[i % n] == i / n { 1.0 } else { 0.0 })
}

fn tiny_unet() -> UNetSpec {
    UNetSpec {
        in_channels: 1,
        out_channels: 3,
        widths: vec![2, 3],
        convs_per_block: 1,
        kernel: 3,
        normalize_input: true,
    }
}

#[derive(Clone)]
struct SynthCase {
    arch: SegArch,
    spec: AugmentSpec,
    draw: AugmentDraw,
    image: Grid,
    y: Grid,
}

impl SynthCase {
    fn loss(&self, t: &mut Tape, phi: &[Var], theta: &[Var]) -> Result<Var> {
        let x = t.constant(self.image.clone());
        let xa = augment(t, &self.spec, theta, x, &self.draw)?;
        let p = self.arch.forward(t, phi, xa)?;
        soft_dice_loss(t, p, &self.y)
    }
}

/// Soft Dice on its own, the synthetic loss with respect to the segmentation
/// weights and to each augmentation mode's parameters, and the real loss.
pub fn loss_cases(seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();

    let y = one_hot(&mut rng, 3, 8, 8);
    let logits = normal(&mut rng, &[3, 8, 8]);
    {
        let y = y.clone();
        out.push(run(
            "soft dice",
            &logits,
            Box::new(move |t: &mut Tape, v: Var| {
                let p = t.softmax0(v);
                soft_dice_loss(t, p, &y)
            }),
        )?);
    }

    let image = rng.sample(Distribution::Uniform { lo: 0.0, hi: 1.0 }, &[1, 8, 8])?;
    // A random head: the default zero head would make every theta gradient vanish.
    let unet = tiny_unet();
    let phi = unet.init(&mut rng, false)?;
    let arch = SegArch::Unet(unet);
    let flat_phi = phi.flatten();

    // Real loss: no augmentation between image and network.
    {
        let (arch, y, image, phi) = (arch.clone(), y.clone(), image.clone(), phi.clone());
        out.push(run(
            "real loss (phi)",
            &flat_phi,
            Box::new(move |t: &mut Tape, v: Var| {
                let vars = unflatten(t, v, &phi)?;
                let x = t.constant(image.clone());
                let p = arch.forward(t, &vars, x)?;
                soft_dice_loss(t, p, &y)
            }),
        )?);
    }

    let specs = [
        ("noise-only", AugmentSpec::noise_only(NoiseMode::Hyper)),
        ("noise-bias", AugmentSpec::noise_bias(NoiseMode::Fixed, vec![2, 4])),
        ("nonparametric", AugmentSpec::nonparametric(vec![2, 2])),
    ];
    for (label, spec) in specs {
        let mut theta = AugmentParams::init(spec.clone(), 0.1, 0.4, &mut rng)?;
        if spec.residual.is_some() {
            // Non-zero residual weights so the head gradient is not trivially exact.
            let grids = theta
                .params
                .grids()
                .iter()
                .enumerate()
                .map(|(i, g)| if i == 0 { g.clone() } else { normal(&mut rng, g.shape()).scale(0.3) })
                .collect();
            theta = theta.with_params(theta.params.with_grids(grids)?);
        }
        let basis = spec.basis(8, 8)?;
        let draw = spec.draw(basis.as_ref(), [8, 8], &mut rng)?;
        let case = SynthCase {
            arch: arch.clone(),
            spec: spec.clone(),
            draw,
            image: image.clone(),
            y: y.clone(),
        };
        {
            let (case, theta, phi) = (case.clone(), theta.clone(), phi.clone());
            let flat = theta.params.flatten();
            out.push(run(
                &format!("synthetic loss (theta, {label})"),
                &flat,
                Box::new(move |t: &mut Tape, v: Var| {
                    let th = unflatten(t, v, &theta.params)?;
                    let ph = phi.constants(t);
                    case.loss(t, &ph, &th)
                }),
            )?);
        }
        if label == "noise-only" {
            let phi = phi.clone();
            out.push(run(
                "synthetic loss (phi)",
                &flat_phi,
                Box::new(move |t: &mut Tape, v: Var| {
                    let ph = unflatten(t, v, &phi)?;
                    let th = theta.params.constants(t);
                    case.loss(t, &ph, &th)
                }),
            )?);
        }
    }

    // The oracle-scale dense model used for exact hypergradients.
    let dense = SegArch::Dense(DenseSpec {
        height: 4,
        width: 4,
        hidden: 3,
        classes: 3,
    });
    let dphi = dense.init(&mut rng)?;
    let dy = one_hot(&mut rng, 3, 4, 4);
    let dimg = rng.sample(Distribution::Uniform { lo: 0.0, hi: 1.0 }, &[1, 4, 4])?;
    {
        let dflat = dphi.flatten();
        out.push(run(
            "real loss (phi, dense)",
            &dflat,
            Box::new(move |t: &mut Tape, v: Var| {
                let vars = unflatten(t, v, &dphi)?;
                let x = t.constant(dimg.clone());
                let p = dense.forward(t, &vars, x)?;
                soft_dice_loss(t, p, &dy)
            }),
        )?);
    }
    Ok(out)
}

/// Every primitive and loss case.
pub fn run_suite(seed: u64) -> Result<Vec<CheckCase>> {
    let mut all = primitive_cases(seed)?;
    all.extend(loss_cases(seed.wrapping_add(1))?);
    Ok(all)
}
