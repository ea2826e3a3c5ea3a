//! The learnable augmentation `A_theta` applied to synthetic images.
//!
//! Three variants share one parameter container:
//!
//! * noise only: `x + sigma * eps` (or hyper-noise `x + sigma * s * eps`);
//! * noise and bias: `x * alpha(c)` followed by the noise step, where
//!   `alpha = prod_k (B_k beta_k)^{c_k}` multiplies smooth random fields;
//! * nonparametric: `x + R([x, xi])` for a small residual UNet `R` fed the
//!   image and a Gaussian noise channel, followed by hyper-noise.
//!
//! All randomness (`beta`, `eps`, `s`, `xi`) lives in an [`AugmentDraw`] so a
//! single draw can be replayed exactly; gradients flow to `theta` only.

mod bias;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, softplus_inv, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Distribution, Grid, SeededRng};
use crate::params::ParamSet;
use crate::segnet::UNetSpec;

pub use bias::{apply_bias, linear_basis_1d, sample_bias_field, BiasBasis, BiasDraw, CONTROL_RANGE};

pub const C_NAME: &str = "bias.c";
pub const SIGMA_NAME: &str = "noise.sigma_raw";
const RESIDUAL_PREFIX: &str = "residual.";

/// Raw value whose softplus underflows to exactly zero.
pub const SIGMA_RAW_OFF: f64 = -1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One `sigma` for every image.
    Fixed,
    /// `sigma * s` with `s ~ N(0, 1)` drawn once per image.
    Hyper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    NoiseOnly,
    NoiseBias,
    Nonparametric,
}

/// Structure of the augmentation (everything except learnable values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub noise_mode: NoiseMode,
    /// Control lattice sizes `M_k` of the bias fields.
    pub lattice: Vec<usize>,
    pub residual: Option<UNetSpec>,
}

impl AugmentSpec {
    pub fn noise_only(noise_mode: NoiseMode) -> Self {
        Self {
            kind: AugmentKind::NoiseOnly,
            noise_mode,
            lattice: vec![],
            residual: None,
        }
    }

    pub fn noise_bias(noise_mode: NoiseMode, lattice: Vec<usize>) -> Self {
        Self {
            kind: AugmentKind::NoiseBias,
            noise_mode,
            lattice,
            residual: None,
        }
    }

    /// Residual UNet on `[image, noise]` followed by hyper-noise.
    pub fn nonparametric(widths: Vec<usize>) -> Self {
        Self {
            kind: AugmentKind::Nonparametric,
            noise_mode: NoiseMode::Hyper,
            lattice: vec![],
            residual: Some(UNetSpec {
                in_channels: 2,
                out_channels: 1,
                widths,
                convs_per_block: 2,
                kernel: 3,
                normalize_input: false,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AugmentKind::NoiseBias if self.lattice.is_empty() => {
                Err(Error::invalid("noise+bias augmentation needs a bias lattice"))
            }
            AugmentKind::Nonparametric => match &self.residual {
                Some(r) if r.in_channels == 2 && r.out_channels == 1 => r.validate(),
                _ => Err(Error::invalid("nonparametric augmentation needs a 2->1 residual UNet")),
            },
            _ => Ok(()),
        }
    }

    pub fn uses_bias(&self) -> bool {
        self.kind == AugmentKind::NoiseBias
    }

    pub fn basis(&self, height: usize, width: usize) -> Result<Option<BiasBasis>> {
        if self.uses_bias() {
            Ok(Some(BiasBasis::new(height, width, &self.lattice)?))
        } else {
            Ok(None)
        }
    }

    /// Fresh randomness for one image.
    pub fn draw(&self, basis: Option<&BiasBasis>, shape: [usize; 2], rng: &mut SeededRng) -> Result<AugmentDraw> {
        let bias = match (self.uses_bias(), basis) {
            (true, Some(b)) => Some(BiasDraw::sample(b, rng)?),
            (true, None) => return Err(Error::invalid("bias augmentation needs a basis")),
            _ => None,
        };
        let s = match self.noise_mode {
            NoiseMode::Fixed => 1.0,
            NoiseMode::Hyper => rng.normal(),
        };
        let plane = [1, shape[0], shape[1]];
        let eps = rng.sample(Distribution::Normal, &plane)?;
        let xi = match self.kind {
            AugmentKind::Nonparametric => Some(rng.sample(Distribution::Normal, &plane)?),
            _ => None,
        };
        Ok(AugmentDraw {
            bias,
            noise: NoiseDraw { eps, s },
            xi,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps: Grid,
    /// Per-image modulation; exactly 1 in fixed mode.
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub bias: Option<BiasDraw>,
    pub noise: NoiseDraw,
    pub xi: Option<Grid>,
}

impl AugmentDraw {
    /// The mirrored draw: same bias fields and modulation, negated noise.
    pub fn antithetic(&self) -> Self {
        Self {
            bias: self.bias.clone(),
            noise: NoiseDraw {
                eps: self.noise.eps.scale(-1.0),
                s: self.noise.s,
            },
            xi: self.xi.as_ref().map(|x| x.scale(-1.0)),
        }
    }
}

/// Learnable augmentation parameters `theta`.
///
/// `sigma` is stored unconstrained and materialized through softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub spec: AugmentSpec,
    pub params: ParamSet,
}

impl AugmentParams {
    /// `sigma0 = 0` selects the exactly-off raw value.
    pub fn init(spec: AugmentSpec, sigma0: f64, c0: f64, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        if sigma0 < 0.0 || !sigma0.is_finite() || !c0.is_finite() {
            return Err(Error::invalid("initial sigma must be >= 0 and c finite"));
        }
        let mut params = ParamSet::empty();
        if spec.uses_bias() {
            params.push(C_NAME, Grid::full(&[spec.lattice.len()], c0));
        }
        let raw = if sigma0 == 0.0 { SIGMA_RAW_OFF } else { softplus_inv(sigma0) };
        params.push(SIGMA_NAME, Grid::scalar(raw));
        if let Some(r) = &spec.residual {
            for (name, g) in r.init(rng, true)?.iter() {
                params.push(format!("{RESIDUAL_PREFIX}{name}"), g.clone());
            }
        }
        Ok(Self { spec, params })
    }

    /// The exact identity map: `c = 0`, `sigma = 0`, zero residual.
    pub fn identity(spec: AugmentSpec) -> Result<Self> {
        let mut p = Self::init(spec, 0.0, 0.0, &mut SeededRng::new(0))?;
        let grids = p.params.grids().iter().map(|g| {
            if g.len() == 1 && g.shape() == [1] {
                g.clone()
            } else {
                Grid::zeros(g.shape())
            }
        });
        p.params = p.params.with_grids(grids.collect())?;
        Ok(p)
    }

    pub fn sigma_raw(&self) -> f64 {
        self.params.get(SIGMA_NAME).map(Grid::item).unwrap_or(SIGMA_RAW_OFF)
    }

    /// Materialized noise scale, `softplus(raw)`.
    pub fn sigma(&self) -> f64 {
        softplus(self.sigma_raw())
    }

    pub fn c(&self) -> Vec<f64> {
        self.params.get(C_NAME).map(Grid::to_vec).unwrap_or_default()
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        Self {
            spec: self.spec.clone(),
            params,
        }
    }
}

/// `x + sigma * s * eps`; `sigma` is the materialized scale (`[1]`).
pub fn apply_noise(tape: &mut Tape, x: Var, sigma: Var, draw: &NoiseDraw) -> Result<Var> {
    let eps = if draw.s == 1.0 { draw.eps.clone() } else { draw.eps.scale(draw.s) };
    let eps = tape.constant(eps);
    let n = tape.scale(eps, sigma)?;
    tape.add(x, n)
}

/// `x + R([x, xi])` followed by hyper-noise.
pub fn apply_nonparametric(
    tape: &mut Tape,
    x: Var,
    net: &UNetSpec,
    net_params: &[Var],
    sigma: Var,
    draw: &AugmentDraw,
) -> Result<Var> {
    let xi = draw
        .xi
        .as_ref()
        .ok_or_else(|| Error::invalid("nonparametric augmentation needs a noise channel"))?;
    let [h, w] = [tape.shape(x)[1], tape.shape(x)[2]];
    let xi = tape.constant(xi.reshape(&[1, h, w])?);
    let input = tape.concat0(&[x, xi])?;
    let residual = net.forward(tape, net_params, input)?;
    let out = tape.add(x, residual)?;
    apply_noise(tape, out, sigma, &draw.noise)
}

/// `A_theta(x)` for `x: [1, H, W]` with the given parameter vars (in
/// `AugmentParams::params` order).
pub fn augment(tape: &mut Tape, spec: &AugmentSpec, theta: &[Var], x: Var, draw: &AugmentDraw) -> Result<Var> {
    let mut it = theta.iter().copied();
    let mut next = || it.next().ok_or_else(|| Error::invalid("too few augmentation parameters"));
    match spec.kind {
        AugmentKind::NoiseOnly => {
            let raw = next()?;
            let sigma = tape.softplus(raw);
            apply_noise(tape, x, sigma, &draw.noise)
        }
        AugmentKind::NoiseBias => {
            let c = next()?;
            let raw = next()?;
            let bias = draw
                .bias
                .as_ref()
                .ok_or_else(|| Error::invalid("draw lacks bias fields"))?;
            let alpha = bias.field_var(tape, c)?;
            let [h, w] = [tape.shape(x)[1], tape.shape(x)[2]];
            let alpha = tape.reshape(alpha, &[1, h, w])?;
            let biased = apply_bias(tape, x, alpha)?;
            let sigma = tape.softplus(raw);
            apply_noise(tape, biased, sigma, &draw.noise)
        }
        AugmentKind::Nonparametric => {
            let raw = next()?;
            let net = spec.residual.as_ref().expect("validated");
            let sigma = tape.softplus(raw);
            apply_nonparametric(tape, x, net, &theta[1..], sigma, draw)
        }
    }
}

/// Applies `A_theta` to a plain `[1, H, W]` or `[H, W]` image without recording gradients.
pub fn augment_image(theta: &AugmentParams, image: &Grid, draw: &AugmentDraw) -> Result<Grid> {
    let x0 = crate::segnet::as_channel_image(image)?;
    let mut tape = Tape::new();
    let vars = theta.params.constants(&mut tape);
    let x = tape.constant(x0);
    let y = augment(&mut tape, &theta.spec, &vars, x, draw)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn img(h: usize, w: usize, seed: u64) -> Grid {
        SeededRng::new(seed)
            .sample(Distribution::Uniform { lo: 0.0, hi: 1.0 }, &[1, h, w])
            .unwrap()
    }

    fn all_specs() -> Vec<AugmentSpec> {
        vec![
            AugmentSpec::noise_only(NoiseMode::Fixed),
            AugmentSpec::noise_only(NoiseMode::Hyper),
            AugmentSpec::noise_bias(NoiseMode::Fixed, vec![2, 4, 8]),
            AugmentSpec::nonparametric(vec![8, 16]),
        ]
    }

    #[test]
    fn identity_configuration_is_exact() {
        let x = img(16, 16, 1);
        for spec in all_specs() {
            let theta = AugmentParams::identity(spec.clone()).unwrap();
            assert_eq!(theta.sigma(), 0.0);
            let basis = spec.basis(16, 16).unwrap();
            let draw = spec.draw(basis.as_ref(), [16, 16], &mut SeededRng::new(2)).unwrap();
            let y = augment_image(&theta, &x, &draw).unwrap();
            assert_eq!(y, x, "{:?}", spec.kind);
        }
    }

    #[test]
    fn zero_sigma_leaves_image_and_scaled_noise_adds() {
        let x = img(8, 8, 3);
        let spec = AugmentSpec::noise_only(NoiseMode::Fixed);
        let draw = spec.draw(None, [8, 8], &mut SeededRng::new(4)).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let zero = t.constant(Grid::scalar(0.0));
        let y = apply_noise(&mut t, xv, zero, &draw.noise).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn fixed_noise_residual_std() {
        let n = 256;
        let spec = AugmentSpec::noise_only(NoiseMode::Fixed);
        let theta = AugmentParams::init(spec.clone(), 0.1, 0.0, &mut SeededRng::new(0)).unwrap();
        assert!((theta.sigma() - 0.1).abs() < 1e-12);
        let x = Grid::full(&[1, n, n], 0.5);
        let draw = spec.draw(None, [n, n], &mut SeededRng::new(5)).unwrap();
        let y = augment_image(&theta, &x, &draw).unwrap();
        let r = y.sub(&x).unwrap();
        let m = r.mean();
        let sd = (r.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() < 0.005, "{sd}");
    }

    #[test]
    fn hyper_noise_residual_matches_recorded_scale() {
        let n = 128;
        let spec = AugmentSpec::noise_only(NoiseMode::Hyper);
        let theta = AugmentParams::init(spec.clone(), 0.08, 0.0, &mut SeededRng::new(0)).unwrap();
        let x = Grid::full(&[1, n, n], 0.3);
        for seed in 0..5 {
            let draw = spec.draw(None, [n, n], &mut SeededRng::new(seed)).unwrap();
            let y = augment_image(&theta, &x, &draw).unwrap();
            let r = y.sub(&x).unwrap();
            // residual is exactly sigma * s * eps
            let expected = draw.noise.eps.scale(theta.sigma() * draw.noise.s);
            for (a, b) in r.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let sd = (r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
            let target = theta.sigma() * draw.noise.s.abs();
            assert!((sd - target).abs() < 0.05 * target + 1e-9, "{sd} vs {target}");
        }
    }

    #[test]
    fn noise_is_unbiased() {
        let spec = AugmentSpec::noise_only(NoiseMode::Fixed);
        let sigma = 0.1;
        let theta = AugmentParams::init(spec.clone(), sigma, 0.0, &mut SeededRng::new(0)).unwrap();
        let x = Grid::full(&[1, 2, 2], 0.5);
        let mut acc = vec![0.0; 4];
        let draws = 10_000;
        let mut rng = SeededRng::new(77);
        for _ in 0..draws {
            let d = spec.draw(None, [2, 2], &mut rng).unwrap();
            let y = augment_image(&theta, &x, &d).unwrap();
            for (a, (v, x0)) in acc.iter_mut().zip(y.data().iter().zip(x.data())) {
                *a += v - x0;
            }
        }
        for a in acc {
            assert!((a / draws as f64).abs() < 3.0 * sigma / 100.0);
        }
    }

    #[test]
    fn bias_field_is_positive_for_any_exponent() {
        let basis = BiasBasis::new(16, 16, &[2, 4, 8]).unwrap();
        let mut rng = SeededRng::new(9);
        for _ in 0..20 {
            let d = BiasDraw::sample(&basis, &mut rng).unwrap();
            let c = [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)];
            assert!(d.field(&c).unwrap().data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn parametric_theta_gradients_pass_check() {
        let spec = AugmentSpec::noise_bias(NoiseMode::Hyper, vec![2, 4]);
        let basis = spec.basis(6, 6).unwrap();
        let draw = spec.draw(basis.as_ref(), [6, 6], &mut SeededRng::new(10)).unwrap();
        let x = img(6, 6, 11);
        let target = img(6, 6, 12);
        let theta0 = Grid::from_vec(vec![0.3, -0.2, -1.5]);
        let chk = grad_check(
            |t, th| {
                let c = t.slice0(th, 0, 2)?;
                let raw = t.slice0(th, 2, 1)?;
                let xv = t.constant(x.clone());
                let y = augment(t, &spec, &[c, raw], xv, &draw)?;
                let tv = t.constant(target.clone());
                let d = t.sub(y, tv)?;
                let d2 = t.mul(d, d)?;
                Ok(t.sum(d2))
            },
            &theta0,
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_err < 1e-5, "{}", chk.max_rel_err);
    }

    #[test]
    fn nonparametric_shape_and_head_gradient() {
        let spec = AugmentSpec::nonparametric(vec![4, 6]);
        let mut rng = SeededRng::new(13);
        let mut theta = AugmentParams::init(spec.clone(), 0.05, 0.0, &mut rng).unwrap();
        // perturb the zero-initialized head so the check is not trivial
        let grids: Vec<Grid> = theta
            .params
            .iter()
            .map(|(n, g)| {
                if n.contains("head") {
                    Grid::from_fn(g.shape(), |_| 0.1 * rng.normal())
                } else {
                    g.clone()
                }
            })
            .collect();
        theta.params = theta.params.with_grids(grids).unwrap();

        for (h, w) in [(8, 8), (12, 16)] {
            let draw = spec.draw(None, [h, w], &mut SeededRng::new(14)).unwrap();
            let y = augment_image(&theta, &img(h, w, 15), &draw).unwrap();
            assert_eq!(y.shape(), &[1, h, w]);
        }

        let (h, w) = (8, 8);
        let draw = spec.draw(None, [h, w], &mut SeededRng::new(16)).unwrap();
        let x = img(h, w, 17);
        let head_pos = theta.params.names().iter().position(|n| n == "residual.head.weight").unwrap();
        let head0 = theta.params.grids()[head_pos].clone();
        let chk = grad_check(
            |t, head| {
                let mut vars = theta.params.constants(t);
                vars[head_pos] = head;
                let xv = t.constant(x.clone());
                let y = augment(t, &spec, &vars, xv, &draw)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            &head0,
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_err < 1e-4, "{}", chk.max_rel_err);
    }
}
