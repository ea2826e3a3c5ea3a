use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, SeededRng};
use crate::params::ParamSet;

/// Architecture descriptor for a compact UNet.
///
/// One block per scale of `convs_per_block` `kernel x kernel` conv+relu
/// layers; 2x2 max-pool on the way down, nearest-neighbour upsampling and
/// skip concatenation on the way up, then a 1x1 head producing
/// `out_channels` maps. The head output is returned un-activated.
///
/// With `normalize_input` the input is first shifted and scaled to zero mean
/// and unit variance over all its voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub widths: Vec<usize>,
    pub convs_per_block: usize,
    pub kernel: usize,
    #[serde(default)]
    pub normalize_input: bool,
}

/// Added to the variance before the inverse square root.
pub const NORM_EPS: f64 = 1e-6;

/// `(x - mean(x)) / sqrt(var(x) + NORM_EPS)` over every element.
pub fn standardize(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let m = tape.mean(x);
    let m = tape.expand(m, &shape)?;
    let xc = tape.sub(x, m)?;
    let sq = tape.mul(xc, xc)?;
    let var = tape.mean(sq);
    let var = tape.add_scalar(var, NORM_EPS);
    let inv = tape.powf(var, -0.5);
    tape.scale(xc, inv)
}

impl UNetSpec {
    /// Two scales with widths {8, 16}.
    pub fn small(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            widths: vec![8, 16],
            convs_per_block: 2,
            kernel: 3,
            normalize_input: true,
        }
    }

    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.scales() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("UNet needs at least one scale of non-zero width"));
        }
        if self.kernel % 2 == 0 || self.convs_per_block == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("UNet kernel must be odd and all counts positive"));
        }
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.downsample_factor();
        match shape {
            [c, h, w] if *c == self.in_channels && h % f == 0 && w % f == 0 => Ok(()),
            _ => Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!(
                    "expected [{}, H, W] with H, W divisible by {f}",
                    self.in_channels
                ),
            }),
        }
    }

    /// `(name, shape)` of every parameter in forward order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let n = self.scales();
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = self.in_channels;
        for s in 0..n {
            for j in 0..self.convs_per_block {
                conv(format!("enc{s}.conv{j}"), cin, self.widths[s], k);
                cin = self.widths[s];
            }
        }
        for s in (0..n - 1).rev() {
            cin += self.widths[s];
            for j in 0..self.convs_per_block {
                conv(format!("dec{s}.conv{j}"), cin, self.widths[s], k);
                cin = self.widths[s];
            }
        }
        conv("head".into(), cin, self.out_channels, 1);
        out
    }

    /// He-normal kernels and zero biases; `zero_head` zeroes the final layer.
    pub fn init(&self, rng: &mut SeededRng, zero_head: bool) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::empty();
        for (name, shape) in self.layout() {
            let is_head = name.starts_with("head");
            let g = if name.ends_with(".bias") || (zero_head && is_head) {
                Grid::zeros(&shape)
            } else {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let std = (2.0 / fan_in).sqrt();
                Grid::from_fn(&shape, |_| std * rng.normal())
            };
            p.push(name, g);
        }
        Ok(p)
    }

    /// Logits `[out_channels, H, W]` for input `x: [in_channels, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let expected = 2 * (self.scales() * self.convs_per_block * 2 - self.convs_per_block) + 2;
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "UNet expects {expected} parameter tensors, got {}",
                params.len()
            )));
        }
        let mut it = params.chunks_exact(2);
        let conv_relu = |tape: &mut Tape, h: Var, it: &mut std::slice::ChunksExact<'_, Var>| -> Result<Var> {
            let wb = it.next().expect("parameter count checked");
            let c = tape.conv2d(h, wb[0])?;
            let c = tape.add_channel_bias(c, wb[1])?;
            Ok(tape.relu(c))
        };

        let n = self.scales();
        let mut skips = Vec::with_capacity(n);
        let mut h = if self.normalize_input { standardize(tape, x)? } else { x };
        for s in 0..n {
            if s > 0 {
                h = tape.maxpool2(h)?;
            }
            for _ in 0..self.convs_per_block {
                h = conv_relu(tape, h, &mut it)?;
            }
            skips.push(h);
        }
        for s in (0..n - 1).rev() {
            let up = tape.upsample2(h)?;
            h = tape.concat0(&[up, skips[s]])?;
            for _ in 0..self.convs_per_block {
                h = conv_relu(tape, h, &mut it)?;
            }
        }
        let wb = it.next().expect("parameter count checked");
        let logits = tape.conv2d(h, wb[0])?;
        tape.add_channel_bias(logits, wb[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts_for_default() {
        let spec = UNetSpec::small(1, 4);
        let p = spec.init(&mut SeededRng::new(0), false).unwrap();
        // enc0: 2 convs, enc1: 2, dec0: 2, head
        assert_eq!(p.len(), 14);
        let expected = (9 * 8 + 8) + (72 * 8 + 8) + (72 * 16 + 16) + (144 * 16 + 16) + (24 * 9 * 8 + 8) + (72 * 8 + 8) + (8 * 4 + 4);
        assert_eq!(p.numel(), expected);
    }

    #[test]
    fn output_shape_and_divisibility() {
        let spec = UNetSpec::small(2, 1);
        let p = spec.init(&mut SeededRng::new(1), false).unwrap();
        let mut t = Tape::new();
        let vars = p.constants(&mut t);
        let x = t.constant(Grid::zeros(&[2, 8, 12]));
        let y = spec.forward(&mut t, &vars, x).unwrap();
        assert_eq!(t.shape(y), &[1, 8, 12]);
        let bad = t.constant(Grid::zeros(&[2, 7, 8]));
        assert!(spec.forward(&mut t, &vars, bad).is_err());
    }

    #[test]
    fn three_scale_forward() {
        let spec = UNetSpec {
            in_channels: 1,
            out_channels: 3,
            widths: vec![4, 6, 8],
            convs_per_block: 1,
            kernel: 3,
            normalize_input: false,
        };
        let p = spec.init(&mut SeededRng::new(2), false).unwrap();
        let mut t = Tape::new();
        let vars = p.constants(&mut t);
        let x = t.constant(Grid::full(&[1, 8, 8], 0.5));
        let y = spec.forward(&mut t, &vars, x).unwrap();
        assert_eq!(t.shape(y), &[3, 8, 8]);
    }

    #[test]
    fn standardized_input_is_affine_invariant() {
        let spec = UNetSpec::small(1, 3);
        let p = spec.init(&mut SeededRng::new(3), false).unwrap();
        let x = SeededRng::new(4).sample(crate::grid::Distribution::Normal, &[1, 8, 8]).unwrap();
        let run = |g: Grid| {
            let mut t = Tape::new();
            let vars = p.constants(&mut t);
            let xv = t.constant(g);
            let y = spec.forward(&mut t, &vars, xv).unwrap();
            t.value(y).clone()
        };
        let a = run(x.clone());
        let b = run(x.map(|v| 3.0 * v + 0.7));
        // NORM_EPS breaks exact invariance by a relative O(eps / var) on the
        // standardized input, which the network carries forward.
        let mean = x.data().iter().sum::<f64>() / x.len() as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        let tol = 10.0 * NORM_EPS / var * (1.0 + a.max_abs());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < tol, "{u} {v}");
        }
        let c = run(x.map(|v| v + 0.7));
        for (u, v) in a.data().iter().zip(c.data()) {
            assert!((u - v).abs() < 1e-12, "{u} {v}");
        }
    }

    #[test]
    fn standardize_gradient() {
        let x = Grid::from_fn(&[1, 3, 3], |i| (i as f64 * 0.37).sin());
        let w = Grid::from_fn(&[1, 3, 3], |i| (i as f64 * 1.1).cos());
        let chk = crate::autodiff::grad_check(
            |t, v| {
                let s = standardize(t, v)?;
                let wv = t.constant(w.clone());
                let y = t.mul(s, wv)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(chk.max_rel_err < 1e-6, "{}", chk.max_rel_err);
    }
}
