use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap};

/// Additive smoothing in the soft Dice ratio; keeps classes absent from both
/// prediction and target well defined (ratio 1).
pub const DICE_SMOOTH: f64 = 1.0;

fn check_one_hot(y: &Grid) -> Result<()> {
    let lead = y.shape()[0];
    let inner = y.len() / lead;
    for i in 0..inner {
        let mut total = 0.0;
        for c in 0..lead {
            let v = y.data()[c * inner + i];
            if v != 0.0 && v != 1.0 {
                return Err(Error::invalid(format!("target is not one-hot (value {v})")));
            }
            total += v;
        }
        if total != 1.0 {
            return Err(Error::invalid(format!("target is not one-hot at voxel {i}")));
        }
    }
    Ok(())
}

/// Soft Dice loss
/// `1 - (1/C) sum_c (2 sum_i p_ci y_ci + s) / (sum_i p_ci + sum_i y_ci + s)`
/// for probabilities `p` and one-hot `y`, both `[C, H, W]`, with
/// `s = DICE_SMOOTH`.
pub fn soft_dice_loss(tape: &mut Tape, p: Var, y: &Grid) -> Result<Var> {
    soft_dice_loss_smoothed(tape, p, y, DICE_SMOOTH)
}

/// [`soft_dice_loss`] with smoothing `s`.
pub fn soft_dice_loss_smoothed(tape: &mut Tape, p: Var, y: &Grid, smooth: f64) -> Result<Var> {
    if !(smooth > 0.0) {
        return Err(Error::invalid("Dice smoothing must be > 0"));
    }
    if tape.shape(p) != y.shape() {
        return Err(Error::shape("soft_dice_loss", tape.shape(p), y.shape()));
    }
    check_one_hot(y)?;
    let classes = y.shape()[0];
    let yv = tape.constant(y.clone());
    let py = tape.mul(p, yv)?;
    let inter = tape.sum_rows(py);
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, smooth);
    let psum = tape.sum_rows(p);
    let ysum = y.sum_rows().map(|v| v + smooth);
    let ysum = tape.constant(ysum);
    let den = tape.add(psum, ysum)?;
    let ratio = tape.div(num, den)?;
    let total = tape.sum(ratio);
    let mean = tape.mul_scalar(total, -1.0 / classes as f64);
    Ok(tape.add_scalar(mean, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceScores {
    /// Per-class Dice; `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in either map.
    pub mean: f64,
}

impl DiceScores {
    /// Per-class score with empty-in-both classes counted as 1.
    pub fn class_score(&self, c: usize) -> f64 {
        self.per_class[c].unwrap_or(1.0)
    }
}

/// Hard Dice `2|P_c & Y_c| / (|P_c| + |Y_c|)` per class.
pub fn hard_dice(pred: &LabelMap, truth: &LabelMap) -> Result<DiceScores> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("hard_dice", &pred.shape(), &truth.shape()));
    }
    let classes = pred.classes().max(truth.classes());
    let mut inter = vec![0usize; classes];
    let mut psize = vec![0usize; classes];
    let mut tsize = vec![0usize; classes];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        psize[p as usize] += 1;
        tsize[t as usize] += 1;
        if p == t {
            inter[p as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let den = psize[c] + tsize[c];
            (den > 0).then(|| 2.0 * inter[c] as f64 / den as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(DiceScores { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn loss_value(p: &Grid, y: &Grid) -> f64 {
        let mut t = Tape::new();
        let pv = t.constant(p.clone());
        let l = soft_dice_loss(&mut t, pv, y).unwrap();
        t.value(l).item()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let y = LabelMap::new(2, 3, 4, vec![0, 1, 1, 3, 3, 0]).unwrap().one_hot();
        // class 2 is empty in both; smoothing makes its ratio exactly 1
        assert!(loss_value(&y, &y).abs() < 1e-15);
    }

    #[test]
    fn half_probability_binary_matches_formula() {
        let n = 10;
        let m = 3;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < m)).collect();
        let y = LabelMap::new(1, n, 2, labels).unwrap().one_hot();
        let p = Grid::full(&[2, 1, n], 0.5);
        let (nf, mf) = (n as f64, m as f64);
        let r1 = (mf + 1.0) / (nf / 2.0 + mf + 1.0);
        let r0 = (nf - mf + 1.0) / (nf / 2.0 + nf - mf + 1.0);
        let expected = 1.0 - (r0 + r1) / 2.0;
        assert!((loss_value(&p, &y) - expected).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_one_hot() {
        let p = Grid::full(&[2, 1, 2], 0.5);
        let y = Grid::full(&[2, 1, 2], 0.5);
        let mut t = Tape::new();
        let pv = t.constant(p);
        assert!(soft_dice_loss(&mut t, pv, &y).is_err());
        let bad = Grid::zeros(&[2, 1, 3]);
        assert!(soft_dice_loss(&mut t, pv, &bad).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let y = LabelMap::new(3, 3, 3, vec![0, 1, 2, 2, 1, 0, 0, 0, 1]).unwrap().one_hot();
        let x = Grid::from_fn(&[3, 3, 3], |i| 0.1 + 0.8 * ((i * 37 % 11) as f64 / 11.0));
        let chk = grad_check(|t, v| soft_dice_loss(t, v, &y), &x, 1e-5).unwrap();
        assert!(chk.max_rel_err < 1e-6, "{}", chk.max_rel_err);
    }

    #[test]
    fn decreases_towards_truth() {
        let labels = vec![0, 1, 2, 1, 1, 0, 2, 2, 0, 1, 0, 2];
        let y = LabelMap::new(3, 4, 3, labels).unwrap().one_hot();
        let uniform = Grid::full(&[3, 3, 4], 1.0 / 3.0);
        let mut prev = f64::INFINITY;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let p = uniform.scale(1.0 - t).axpy(t, &y).unwrap();
            let l = loss_value(&p, &y);
            assert!(l < prev, "step {k}: {l} >= {prev}");
            prev = l;
        }
    }

    #[test]
    fn hard_dice_examples() {
        let a = LabelMap::new(2, 2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(hard_dice(&a, &a).unwrap().mean, 1.0);

        let b = LabelMap::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(hard_dice(&a, &b).unwrap().per_class[1], Some(0.0));

        // class-1 masks of size 2, overlapping in one voxel
        let c = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(hard_dice(&a, &c).unwrap().per_class[1], Some(0.5));

        // class 2 absent from both: excluded from the mean, scored 1
        let d = LabelMap::new(1, 2, 3, vec![0, 1]).unwrap();
        let s = hard_dice(&d, &d).unwrap();
        assert_eq!(s.per_class[2], None);
        assert_eq!(s.class_score(2), 1.0);
        assert_eq!(s.mean, 1.0);

        let e = LabelMap::new(1, 3, 3, vec![0, 1, 2]).unwrap();
        assert!(hard_dice(&d, &e).is_err());
    }
}
