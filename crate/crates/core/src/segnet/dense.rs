use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, SeededRng};
use crate::params::ParamSet;

/// Tiny per-pixel network built only from second-order-capable ops.
///
/// Each pixel sees itself and its four neighbours (zero outside the image)
/// plus a constant; a hidden layer with square activation feeds a linear
/// head. Neighbour gathering is a product with constant shift matrices, so
/// the whole forward pass is `matmul`, `mul` and `concat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
}

const OFFSETS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

impl DenseSpec {
    pub fn features(&self) -> usize {
        OFFSETS.len() + 1
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("hidden.weight".into(), vec![self.hidden, self.features()]),
            ("head.weight".into(), vec![self.classes, self.hidden + 1]),
        ]
    }

    pub fn init(&self, rng: &mut SeededRng) -> Result<ParamSet> {
        if self.hidden == 0 || self.classes < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("dense model needs positive sizes and >= 2 classes"));
        }
        let mut p = ParamSet::empty();
        for (name, shape) in self.layout() {
            let std = (1.0 / shape[1] as f64).sqrt();
            p.push(name, Grid::from_fn(&shape, |_| std * rng.normal()));
        }
        Ok(p)
    }

    /// `x [1, P] . S` moves each pixel's `(dy, dx)` neighbour onto it.
    fn shift_matrix(&self, dy: isize, dx: isize) -> Grid {
        let (h, w) = (self.height, self.width);
        let p = h * w;
        let mut m = vec![0.0; p * p];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    continue;
                }
                let src = sy as usize * w + sx as usize;
                m[src * p + y * w + x] = 1.0;
            }
        }
        Grid::from_parts(vec![p, p], m)
    }

    /// Logits `[C, H, W]` for `x: [1, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let (h, w) = (self.height, self.width);
        if tape.shape(x) != [1, h, w] {
            return Err(Error::InvalidShape {
                shape: tape.shape(x).to_vec(),
                reason: format!("dense model expects [1, {h}, {w}]"),
            });
        }
        let [w_hidden, w_head] = params else {
            return Err(Error::invalid("dense model expects 2 parameter tensors"));
        };
        let p = h * w;
        let row = tape.reshape(x, &[1, p])?;
        let mut feats = Vec::with_capacity(self.features());
        for (dy, dx) in OFFSETS {
            let s = tape.constant(self.shift_matrix(dy, dx));
            feats.push(tape.matmul(row, s)?);
        }
        let ones = tape.constant(Grid::ones(&[1, p]));
        feats.push(ones);
        let f = tape.concat0(&feats)?;
        let hid = tape.matmul(*w_hidden, f)?;
        let act = tape.mul(hid, hid)?;
        let act = tape.concat0(&[act, ones])?;
        let logits = tape.matmul(*w_head, act)?;
        tape.reshape(logits, &[self.classes, h, w])
    }
}
