//! JSON checkpoints with one L2SG sidecar file per parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, AugmentSpec, NoiseMode, C_NAME, SIGMA_NAME};
use crate::error::{Error, Result};
use crate::grid::io::{read_grid, write_grid, Dtype};
use crate::params::ParamSet;
use crate::segnet::{SegArch, SegWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegCheckpoint {
    pub arch: SegArch,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentCheckpoint {
    pub spec: AugmentSpec,
    pub noise_mode: NoiseMode,
    pub raw_c: Vec<f64>,
    pub raw_sigma: f64,
    /// Residual-network tensors; empty for the parametric modes.
    pub layers: Vec<LayerEntry>,
}

fn sidecar(stem: &str, name: &str) -> String {
    format!("{stem}.{name}.l2sg")
}

fn write_layers<'a>(
    dir: &Path,
    stem: &str,
    layers: impl Iterator<Item = (&'a str, &'a crate::grid::Grid)>,
) -> Result<Vec<LayerEntry>> {
    layers
        .map(|(name, g)| {
            let file = sidecar(stem, name);
            write_grid(dir.join(&file), g, Dtype::F64)?;
            Ok(LayerEntry {
                name: name.to_string(),
                shape: g.shape().to_vec(),
                file,
            })
        })
        .collect()
}

fn read_layers(dir: &Path, layers: &[LayerEntry]) -> Result<ParamSet> {
    let mut p = ParamSet::empty();
    for l in layers {
        let g = read_grid(dir.join(&l.file))?;
        if g.shape() != l.shape.as_slice() {
            return Err(Error::Format {
                path: l.file.clone().into(),
                reason: format!("shape {:?} does not match manifest {:?}", g.shape(), l.shape),
            });
        }
        p.push(l.name.clone(), g);
    }
    Ok(p)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `<dir>/<stem>.json` plus sidecars.
pub fn save_seg(w: &SegWeights, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let layers = write_layers(dir, stem, w.params.iter())?;
    let ck = SegCheckpoint {
        arch: w.arch.clone(),
        layers,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&ck)?)?;
    Ok(())
}

pub fn load_seg(dir: impl AsRef<Path>, stem: &str) -> Result<SegWeights> {
    let dir = dir.as_ref();
    let ck: SegCheckpoint = read_json(&dir.join(format!("{stem}.json")))?;
    let params = read_layers(dir, &ck.layers)?;
    let expected = ck.arch.init(&mut crate::grid::SeededRng::new(0))?.layout();
    if params.layout() != expected {
        return Err(Error::Format {
            path: dir.join(stem),
            reason: "layers do not match the architecture".into(),
        });
    }
    Ok(SegWeights { arch: ck.arch, params })
}

pub fn save_augment(theta: &AugmentParams, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let residual = theta
        .params
        .iter()
        .filter(|(n, _)| *n != C_NAME && *n != SIGMA_NAME);
    let layers = write_layers(dir, stem, residual)?;
    let ck = AugmentCheckpoint {
        spec: theta.spec.clone(),
        noise_mode: theta.spec.noise_mode,
        raw_c: theta.c(),
        raw_sigma: theta.sigma_raw(),
        layers,
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&ck)?)?;
    Ok(())
}

pub fn load_augment(dir: impl AsRef<Path>, stem: &str) -> Result<AugmentParams> {
    let dir = dir.as_ref();
    let ck: AugmentCheckpoint = read_json(&dir.join(format!("{stem}.json")))?;
    let residual = read_layers(dir, &ck.layers)?;
    let mut params = ParamSet::empty();
    if ck.spec.uses_bias() {
        params.push(C_NAME, crate::grid::Grid::from_vec(ck.raw_c.clone()));
    }
    params.push(SIGMA_NAME, crate::grid::Grid::scalar(ck.raw_sigma));
    for (n, g) in residual.iter() {
        params.push(n, g.clone());
    }
    let template = AugmentParams::init(ck.spec.clone(), 0.0, 0.0, &mut crate::grid::SeededRng::new(0))?;
    if template.params.layout() != params.layout() {
        return Err(Error::Format {
            path: dir.join(stem),
            reason: "parameters do not match the augmentation spec".into(),
        });
    }
    Ok(AugmentParams { spec: ck.spec, params })
}
