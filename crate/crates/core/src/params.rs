//! Named parameter collections with a flat-vector view.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{numel, Grid};

/// Ordered, named parameter grids.
///
/// `flatten` concatenates every grid in order; `unflatten` inverts it exactly,
/// which is what the `phi +/- eps * v` perturbations rely on.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    grids: Vec<Grid>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, grids: Vec<Grid>) -> Result<Self> {
        if names.len() != grids.len() {
            return Err(Error::invalid("parameter names and grids differ in count"));
        }
        Ok(Self { names, grids })
    }

    pub fn empty() -> Self {
        Self {
            names: vec![],
            grids: vec![],
        }
    }

    pub fn push(&mut self, name: impl Into<String>, grid: Grid) {
        self.names.push(name.into());
        self.grids.push(grid);
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn get(&self, name: &str) -> Option<&Grid> {
        self.names.iter().position(|n| n == name).map(|i| &self.grids[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid)> {
        self.names.iter().map(String::as_str).zip(self.grids.iter())
    }

    pub fn layout(&self) -> Vec<ParamLayout> {
        self.iter()
            .map(|(n, g)| ParamLayout {
                name: n.to_string(),
                shape: g.shape().to_vec(),
            })
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.grids.iter().map(Grid::len).sum()
    }

    pub fn flatten(&self) -> Grid {
        let mut data = Vec::with_capacity(self.numel());
        for g in &self.grids {
            data.extend_from_slice(g.data());
        }
        Grid::from_vec(data)
    }

    /// A parameter set with this layout and values taken from `flat`.
    pub fn unflatten(&self, flat: &Grid) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::shape("unflatten", &[self.numel()], flat.shape()));
        }
        let mut grids = Vec::with_capacity(self.grids.len());
        let mut off = 0;
        for g in &self.grids {
            let n = numel(g.shape());
            grids.push(Grid::new(g.shape().to_vec(), flat.data()[off..off + n].to_vec())?);
            off += n;
        }
        Ok(Self {
            names: self.names.clone(),
            grids,
        })
    }

    /// Same layout, values replaced one grid at a time.
    pub fn with_grids(&self, grids: Vec<Grid>) -> Result<Self> {
        if grids.len() != self.grids.len()
            || grids.iter().zip(&self.grids).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("replacement grids do not match parameter layout"));
        }
        Ok(Self {
            names: self.names.clone(),
            grids,
        })
    }

    /// `self + s * other`, grid by grid.
    pub fn axpy(&self, s: f64, other: &[Grid]) -> Result<Self> {
        if other.len() != self.grids.len() {
            return Err(Error::invalid("axpy over mismatched parameter sets"));
        }
        let grids = self
            .grids
            .iter()
            .zip(other)
            .map(|(a, b)| a.axpy(s, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names: self.names.clone(),
            grids,
        })
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.grids.iter().map(|g| tape.leaf(g.clone())).collect()
    }

    pub fn constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.grids.iter().map(|g| tape.constant(g.clone())).collect()
    }
}

/// Euclidean norm over a list of grids.
pub fn global_norm(grids: &[Grid]) -> f64 {
    grids.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_roundtrip(vals in prop::collection::vec(-10.0f64..10.0, 17)) {
            let mut p = ParamSet::empty();
            p.push("a", Grid::zeros(&[2, 3]));
            p.push("b", Grid::zeros(&[11]));
            let flat = Grid::from_vec(vals);
            let q = p.unflatten(&flat).unwrap();
            prop_assert_eq!(q.flatten(), flat);
            prop_assert_eq!(q.layout(), p.layout());
        }
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let mut p = ParamSet::empty();
        p.push("a", Grid::zeros(&[3]));
        assert!(p.unflatten(&Grid::zeros(&[4])).is_err());
    }
}
