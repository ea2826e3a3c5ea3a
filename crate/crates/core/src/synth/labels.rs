use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, SeededRng};

/// Procedural label maps made of non-overlapping ellipses on a jittered lattice.
///
/// The image is tiled into `cell x cell` cells; each cell holds at most one
/// object whose centre is jittered inside the cell. Pixels take the class of
/// the object whose normalized ellipse distance is smallest and below one,
/// so neighbouring objects meet along Voronoi-like borders instead of
/// overwriting each other. Background is class 0.
///
/// Foreground classes differ in size and elongation, so a network can tell
/// them apart from shape alone when intensities are randomized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMapSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub cell: usize,
    /// Probability that a cell stays empty.
    pub empty_fraction: f64,
}

impl BlobMapSpec {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            cell: 16,
            empty_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("label maps must be non-empty"));
        }
        if !(2..=256).contains(&self.classes) {
            return Err(Error::invalid(format!("class count {} outside 2..=256", self.classes)));
        }
        if self.cell < 4 {
            return Err(Error::invalid("blob cells must be at least 4 pixels"));
        }
        if !(0.0..1.0).contains(&self.empty_fraction) {
            return Err(Error::invalid("empty fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Nominal semi-axes `(a, b)` of class `k >= 1`, before jitter.
    pub fn class_axes(&self, k: usize) -> (f64, f64) {
        let fg = self.classes - 1;
        let half = self.cell as f64 / 2.0;
        let t = if fg == 1 { 0.5 } else { (k - 1) as f64 / (fg - 1) as f64 };
        let r = 0.125 * self.cell as f64 + t * (half - 0.125 * self.cell as f64);
        if k % 3 == 2 {
            ((1.6 * r).min(half), r / 1.6)
        } else {
            (r, r)
        }
    }

    pub fn generate(&self, rng: &mut SeededRng) -> Result<LabelMap> {
        self.validate()?;
        let (h, w, cell) = (self.height, self.width, self.cell);
        let rows = h.div_ceil(cell);
        let cols = w.div_ceil(cell);
        let mut objects = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let present = rng.uniform(0.0, 1.0) >= self.empty_fraction;
                let class = 1 + rng.below(self.classes - 1);
                let (a, b) = self.class_axes(class);
                let jitter = rng.uniform(0.8, 1.2);
                let angle = rng.uniform(0.0, std::f64::consts::PI);
                let cy = (r * cell) as f64 + rng.uniform(0.25, 0.75) * cell as f64;
                let cx = (c * cell) as f64 + rng.uniform(0.25, 0.75) * cell as f64;
                if present {
                    objects.push(Blob {
                        class: class as u8,
                        cy,
                        cx,
                        a: a * jitter,
                        b: b * jitter,
                        cos: angle.cos(),
                        sin: angle.sin(),
                    });
                }
            }
        }
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut best = 1.0;
                for o in &objects {
                    let d = o.distance(py, px);
                    if d <= best {
                        best = d;
                        labels[y * w + x] = o.class;
                    }
                }
            }
        }
        LabelMap::new(h, w, self.classes, labels)
    }
}

struct Blob {
    class: u8,
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}
