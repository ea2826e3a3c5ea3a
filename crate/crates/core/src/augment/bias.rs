use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Distribution, Grid, SeededRng};

/// Range of the random control values of each field.
pub const CONTROL_RANGE: (f64, f64) = (0.5, 2.0);

/// `[n, m]` first-order B-spline (linear interpolation) matrix whose `m`
/// nodes sit at `j * (n - 1) / (m - 1)`, so the end nodes land on the first
/// and last samples. Every row is non-negative and sums to one.
pub fn linear_basis_1d(n: usize, m: usize) -> Result<Grid> {
    if n == 0 || m < 2 {
        return Err(Error::invalid(format!("basis needs n >= 1 and m >= 2, got n={n}, m={m}")));
    }
    let mut data = vec![0.0; n * m];
    for i in 0..n {
        let u = if n == 1 {
            0.0
        } else {
            i as f64 * (m - 1) as f64 / (n - 1) as f64
        };
        let j = (u.floor() as usize).min(m - 2);
        let t = u - j as f64;
        data[i * m + j] = 1.0 - t;
        data[i * m + j + 1] += t;
    }
    Ok(Grid::from_parts(vec![n, m], data))
}

/// Separable bilinear interpolation operators from `M_k x M_k` control
/// lattices to an `H x W` image, one per entry of `lattice`.
#[derive(Debug, Clone)]
pub struct BiasBasis {
    height: usize,
    width: usize,
    lattice: Vec<usize>,
    rows: Vec<Grid>,
    cols_t: Vec<Grid>,
}

impl BiasBasis {
    pub fn new(height: usize, width: usize, lattice: &[usize]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut cols_t = Vec::new();
        for &m in lattice {
            rows.push(linear_basis_1d(height, m)?);
            cols_t.push(linear_basis_1d(width, m)?.transpose()?);
        }
        Ok(Self {
            height,
            width,
            lattice: lattice.to_vec(),
            rows,
            cols_t,
        })
    }

    pub fn fields(&self) -> usize {
        self.lattice.len()
    }

    pub fn lattice(&self) -> &[usize] {
        &self.lattice
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    /// `B_k beta`, for `beta: [M_k, M_k]`.
    pub fn interpolate(&self, k: usize, beta: &Grid) -> Result<Grid> {
        let m = self.lattice[k];
        if beta.shape() != [m, m] {
            return Err(Error::shape("interpolate", beta.shape(), &[m, m]));
        }
        self.rows[k].matmul(beta)?.matmul(&self.cols_t[k])
    }
}

/// One frozen draw of the random control lattices.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasDraw {
    pub controls: Vec<Grid>,
    /// `ln(B_k beta_k)` for each field, `[H, W]`.
    pub log_fields: Vec<Grid>,
}

impl BiasDraw {
    pub fn sample(basis: &BiasBasis, rng: &mut SeededRng) -> Result<Self> {
        let (lo, hi) = CONTROL_RANGE;
        let controls = basis
            .lattice()
            .iter()
            .map(|&m| rng.sample(Distribution::Uniform { lo, hi }, &[m, m]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_controls(basis, controls)
    }

    pub fn from_controls(basis: &BiasBasis, controls: Vec<Grid>) -> Result<Self> {
        if controls.len() != basis.fields() {
            return Err(Error::invalid("one control lattice per field required"));
        }
        let log_fields = controls
            .iter()
            .enumerate()
            .map(|(k, b)| Ok(basis.interpolate(k, b)?.map(f64::ln)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { controls, log_fields })
    }

    /// `alpha = prod_k (B_k beta_k)^{c_k}` evaluated directly.
    pub fn field(&self, c: &[f64]) -> Result<Grid> {
        if c.len() != self.log_fields.len() {
            return Err(Error::invalid("one exponent per field required"));
        }
        let mut log_alpha = Grid::zeros(self.log_fields[0].shape());
        for (l, &ck) in self.log_fields.iter().zip(c) {
            log_alpha = log_alpha.axpy(ck, l)?;
        }
        Ok(log_alpha.map(f64::exp))
    }

    /// The same field on the tape, differentiable in `c: [K]` only.
    pub fn field_var(&self, tape: &mut Tape, c: Var) -> Result<Var> {
        let k = self.log_fields.len();
        if tape.shape(c) != [k] {
            return Err(Error::shape("bias field exponents", tape.shape(c), &[k]));
        }
        let mut log_alpha: Option<Var> = None;
        for (i, l) in self.log_fields.iter().enumerate() {
            let lv = tape.constant(l.clone());
            let ck = tape.slice0(c, i, 1)?;
            let term = tape.scale(lv, ck)?;
            log_alpha = Some(match log_alpha {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let log_alpha = log_alpha.ok_or_else(|| Error::invalid("bias field with zero components"))?;
        Ok(tape.exp(log_alpha))
    }
}

/// Draws fresh control lattices and returns the field for exponents `c`.
pub fn sample_bias_field(tape: &mut Tape, basis: &BiasBasis, c: Var, rng: &mut SeededRng) -> Result<(Var, BiasDraw)> {
    let draw = BiasDraw::sample(basis, rng)?;
    let alpha = draw.field_var(tape, c)?;
    Ok((alpha, draw))
}

/// `x * alpha`.
pub fn apply_bias(tape: &mut Tape, x: Var, alpha: Var) -> Result<Var> {
    tape.mul(x, alpha)
}
