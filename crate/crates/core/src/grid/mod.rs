//! Dense row-major arrays and the kernels the rest of the crate is built on.
//!
//! A [`Grid`] is immutable once built; its payload lives behind an `Arc`, so
//! cloning is cheap and grids can be moved freely between threads.

pub mod conv;
pub mod io;
pub mod rng;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use conv::{conv2d, maxpool2, upsample2};
pub use rng::{Distribution, SeededRng};

/// Binary elementwise operator tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
            BinaryOp::Pow => a.powf(b),
        }
    }
}

/// Right-hand side of an elementwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Grid(&'a Grid),
    Scalar(f64),
}

impl<'a> From<&'a Grid> for Operand<'a> {
    fn from(g: &'a Grid) -> Self {
        Operand::Grid(g)
    }
}

impl From<f64> for Operand<'_> {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Grid")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be a non-empty list of positive integers".into(),
        });
    }
    Ok(())
}

impl Grid {
    /// Builds a grid from external data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        if data.len() != numel(&shape) {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data length {} does not match extents", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    /// Internal constructor for kernel outputs; the shape is trusted.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape), "shape {shape:?}");
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        if data.is_empty() {
            return Self::zeros(&[1]);
        }
        Self::from_parts(vec![n], data)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element grid.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn flat_index(&self, coord: &[usize]) -> Result<usize> {
        flat_index(&self.shape, coord)
    }

    pub fn coord(&self, index: usize) -> Result<Vec<usize>> {
        coord_of(&self.shape, index)
    }

    pub fn get(&self, coord: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(coord)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn elementwise<'a>(&self, op: BinaryOp, rhs: impl Into<Operand<'a>>) -> Result<Self> {
        match rhs.into() {
            Operand::Scalar(s) => Ok(self.map(|a| op.apply(a, s))),
            Operand::Grid(g) => {
                if g.shape != self.shape {
                    return Err(Error::shape("elementwise", &self.shape, &g.shape));
                }
                self.zip_map(g, |a, b| op.apply(a, b))
            }
        }
    }

    pub fn add(&self, other: &Grid) -> Result<Self> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Grid) -> Result<Self> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Grid) -> Result<Self> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|a| a * s)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Grid) -> Result<Self> {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Grid) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum over everything but the leading axis: `[R, ...] -> [R]`.
    pub fn sum_rows(&self) -> Self {
        let rows = self.shape[0];
        let inner = self.len() / rows;
        let data = self.data.chunks_exact(inner).map(|c| c.iter().sum()).collect();
        Self::from_parts(vec![rows], data)
    }

    /// Sum over the leading axis: `[C, ...] -> [...]`.
    pub fn sum_axis0(&self) -> Self {
        let lead = self.shape[0];
        let inner = self.len() / lead;
        let mut out = vec![0.0; inner];
        for chunk in self.data.chunks_exact(inner) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Self::from_parts(shape, out)
    }

    /// `[R] -> [R, trailing...]`, repeating each row value.
    pub fn broadcast_rows(&self, trailing: &[usize]) -> Self {
        let inner = numel(trailing);
        let mut data = Vec::with_capacity(self.len() * inner);
        for &v in self.data.iter() {
            data.extend(std::iter::repeat_n(v, inner));
        }
        let mut shape = vec![self.len()];
        shape.extend_from_slice(trailing);
        Self::from_parts(shape, data)
    }

    /// `[...] -> [lead, ...]`, stacking `lead` copies.
    pub fn broadcast_axis0(&self, lead: usize) -> Self {
        let mut data = Vec::with_capacity(self.len() * lead);
        for _ in 0..lead {
            data.extend_from_slice(&self.data);
        }
        let mut shape = vec![lead];
        if !(self.shape.len() == 1 && self.shape[0] == 1) {
            shape.extend_from_slice(&self.shape);
        }
        Self::from_parts(shape, data)
    }

    pub fn matmul(&self, other: &Grid) -> Result<Self> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = as_matrix(other, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = as_matrix(self, "transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Softmax over the leading axis, independently at every trailing position.
    pub fn softmax_axis0(&self) -> Self {
        let lead = self.shape[0];
        let inner = self.len() / lead;
        let mut out = vec![0.0; self.len()];
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for c in 0..lead {
                max = max.max(self.data[c * inner + i]);
            }
            let mut total = 0.0;
            for c in 0..lead {
                let e = (self.data[c * inner + i] - max).exp();
                out[c * inner + i] = e;
                total += e;
            }
            for c in 0..lead {
                out[c * inner + i] /= total;
            }
        }
        Self::from_parts(self.shape.clone(), out)
    }

    /// Concatenate along the leading axis; trailing extents must agree.
    pub fn concat0(parts: &[&Grid]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero grids"))?;
        let trailing = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != trailing {
                return Err(Error::shape("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(trailing);
        Ok(Self::from_parts(shape, data))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice0(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape[0] {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let inner = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(
            shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        ))
    }

    /// Index of the maximum along the leading axis; ties go to the lowest index.
    pub fn argmax_axis0(&self) -> Vec<usize> {
        let lead = self.shape[0];
        let inner = self.len() / lead;
        (0..inner)
            .map(|i| {
                let mut best = 0;
                let mut best_v = self.data[i];
                for c in 1..lead {
                    let v = self.data[c * inner + i];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best
            })
            .collect()
    }
}

fn as_matrix(g: &Grid, op: &'static str) -> Result<(usize, usize)> {
    match g.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::InvalidShape {
            shape: other.to_vec(),
            reason: format!("{op} needs a 2-D grid"),
        }),
    }
}

pub fn flat_index(shape: &[usize], coord: &[usize]) -> Result<usize> {
    if coord.len() != shape.len() {
        return Err(Error::shape("flat_index", shape, coord));
    }
    let mut idx = 0;
    for (&c, &d) in coord.iter().zip(shape) {
        if c >= d {
            return Err(Error::invalid(format!("coordinate {coord:?} outside {shape:?}")));
        }
        idx = idx * d + c;
    }
    Ok(idx)
}

pub fn coord_of(shape: &[usize], mut index: usize) -> Result<Vec<usize>> {
    if index >= numel(shape) {
        return Err(Error::invalid(format!("index {index} outside {shape:?}")));
    }
    let mut coord = vec![0; shape.len()];
    for (c, &d) in coord.iter_mut().zip(shape).rev() {
        *c = index % d;
        index /= d;
    }
    Ok(coord)
}

/// Integer label image with `classes` possible values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: "label map must be non-empty".into(),
            });
        }
        if classes < 2 || classes > 256 {
            return Err(Error::invalid(format!("class count {classes} not in [2, 256]")));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("{} labels supplied", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!("label {bad} >= class count {classes}")));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    /// `[C, H, W]` indicator encoding.
    pub fn one_hot(&self) -> Grid {
        let n = self.labels.len();
        let mut data = vec![0.0; self.classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Grid::from_parts(vec![self.classes, self.height, self.width], data)
    }

    /// Hard labels from `[C, H, W]` scores (argmax, ties to the lowest class).
    pub fn from_scores(scores: &Grid) -> Result<Self> {
        let [c, h, w] = scores.shape() else {
            return Err(Error::InvalidShape {
                shape: scores.shape().to_vec(),
                reason: "expected [C, H, W] scores".into(),
            });
        };
        let labels = scores.argmax_axis0().into_iter().map(|l| l as u8).collect();
        Self::new(*h, *w, *c, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(shape: &[usize], v: &[f64]) -> Grid {
        Grid::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let a = g(&[2], &[1.0, 2.0]);
        let b = g(&[2], &[3.0, 4.0]);
        assert_eq!(a.elementwise(BinaryOp::Mul, &b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(a.elementwise(BinaryOp::Add, 0.0).unwrap().data(), &[1.0, 2.0]);
        let p = g(&[2], &[2.0, 4.0]).elementwise(BinaryOp::Pow, 0.5).unwrap();
        assert!((p.data()[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!((p.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Grid::zeros(&[2]);
        let b = Grid::zeros(&[3]);
        assert!(matches!(
            a.elementwise(BinaryOp::Add, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Grid::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(Grid::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
        assert!(Grid::new(vec![3], vec![1.0]).is_err());
        assert!(Grid::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_and_transpose() {
        let a = g(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = g(&[3, 1], &[1.0, 0.0, -1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn softmax_sums_to_one_and_argmax_ties_low() {
        let x = g(&[3, 2], &[1.0, 5.0, 1.0, 5.0, 0.0, -1.0]);
        let p = x.softmax_axis0();
        let s = p.sum_axis0();
        for v in s.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(x.argmax_axis0(), vec![0, 0]);
    }

    #[test]
    fn label_map_validation() {
        assert!(LabelMap::new(2, 2, 2, vec![0, 1, 2, 0]).is_err());
        assert!(LabelMap::new(2, 2, 1, vec![0; 4]).is_err());
        assert!(LabelMap::new(0, 2, 2, vec![]).is_err());
        let m = LabelMap::new(1, 3, 3, vec![0, 2, 1]).unwrap();
        let oh = m.one_hot();
        assert_eq!(oh.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn flat_index_roundtrip(shape in prop::collection::vec(1usize..6, 1..5), seed in 0usize..10_000) {
            let n = numel(&shape);
            let idx = seed % n;
            let coord = coord_of(&shape, idx).unwrap();
            prop_assert_eq!(flat_index(&shape, &coord).unwrap(), idx);
        }
    }
}
