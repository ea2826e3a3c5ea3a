//! Central-difference verification of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Grid,
    pub numeric: Grid,
    /// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`.
    pub max_rel_err: f64,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn grad_check<F>(f: F, x: &Grid, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Grid| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        let value = t.value(out);
        if value.len() != 1 {
            return Err(Error::Autodiff("grad_check needs a scalar function".into()));
        }
        Ok(value.item())
    };

    let mut t = Tape::new();
    let v = t.leaf(x.clone());
    let out = f(&mut t, v)?;
    let analytic = t.gradients(out, &[v])?.values.remove(0);

    let base = x.to_vec();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval(Grid::new(x.shape().to_vec(), plus)?)?;
        let fm = eval(Grid::new(x.shape().to_vec(), minus)?)?;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    let numeric = Grid::new(x.shape().to_vec(), numeric)?;
    Ok(GradCheck {
        max_rel_err: relative_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

/// Max-norm relative error between two same-shaped grids (0 when both vanish).
pub fn relative_error(a: &Grid, b: &Grid) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
