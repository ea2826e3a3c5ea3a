use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{BiasBasis, BiasDraw};
use crate::error::{Error, Result};
use crate::grid::io::{read_grid, read_labels, write_grid, write_labels, Dtype};
use crate::grid::rng::derive_seed;
use crate::grid::{Distribution, Grid, LabelMap, SeededRng};
use crate::synth::{synth_image, BlobMapSpec};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaPreset {
    Fixed(f64),
    Range([f64; 2]),
}

impl SigmaPreset {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaPreset::Fixed(s) if s >= 0.0 && s.is_finite() => Ok(()),
            SigmaPreset::Range([lo, hi]) if lo >= 0.0 && lo < hi && hi.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("invalid sigma preset {other:?}"))),
        }
    }

    fn draw(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            SigmaPreset::Fixed(s) => s,
            SigmaPreset::Range([lo, hi]) => rng.uniform(lo, hi),
        }
    }

    /// Nominal value: the fixed sigma or the range midpoint.
    pub fn nominal(&self) -> f64 {
        match *self {
            SigmaPreset::Fixed(s) => s,
            SigmaPreset::Range([lo, hi]) => 0.5 * (lo + hi),
        }
    }
}

/// Corruption applied to noise-free images to make a "real" dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDatasetSpec {
    pub sigma: SigmaPreset,
    /// Bias exponents, one per lattice entry; empty disables the bias field.
    pub bias_c: Vec<f64>,
    pub lattice: Vec<usize>,
    pub count: usize,
    pub seed: u64,
}

impl RealDatasetSpec {
    pub fn noise_only(sigma: SigmaPreset, count: usize, seed: u64) -> Self {
        Self {
            sigma,
            bias_c: vec![],
            lattice: vec![],
            count,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        if self.bias_c.len() != self.lattice.len() {
            return Err(Error::invalid("bias_c needs one exponent per lattice entry"));
        }
        if self.bias_c.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::invalid("bias exponents must be finite and >= 0"));
        }
        if self.count == 0 {
            return Err(Error::invalid("dataset needs at least one sample"));
        }
        Ok(())
    }
}

/// Every draw applied to one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub sigma: f64,
    pub class_means: Vec<f64>,
    /// Row-major control lattices, one per bias field.
    pub bias_controls: Vec<Vec<f64>>,
    pub image: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: RealDatasetSpec,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<SampleRecord>,
}

/// Images, labels and their manifest held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// `[1, H, W]` each.
    pub images: Vec<Grid>,
    pub labels: Vec<LabelMap>,
    pub one_hot: Vec<Grid>,
}

impl Dataset {
    /// Builds the corrupted samples in memory. Sample `i` draws from its own
    /// stream `derive_seed(seed, i)` and uses map `i mod maps.len()`.
    pub fn generate(maps: &[LabelMap], spec: &RealDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let first = maps.first().ok_or_else(|| Error::invalid("no label maps given"))?;
        let [h, w] = first.shape();
        if maps.iter().any(|m| m.shape() != [h, w] || m.classes() != first.classes()) {
            return Err(Error::invalid("label maps differ in shape or class count"));
        }
        let basis = if spec.lattice.is_empty() {
            None
        } else {
            Some(BiasBasis::new(h, w, &spec.lattice)?)
        };
        let mut samples = Vec::with_capacity(spec.count);
        let mut images = Vec::with_capacity(spec.count);
        let mut labels = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let seed = derive_seed(spec.seed, i as u64);
            let mut rng = SeededRng::new(seed);
            let map = &maps[i % maps.len()];
            let clean = synth_image(map, &mut rng)?;
            let mut image = clean.image.clone();
            let mut bias_controls = vec![];
            if let Some(basis) = &basis {
                let draw = BiasDraw::sample(basis, &mut rng)?;
                image = image.mul(&draw.field(&spec.bias_c)?.reshape(&[1, h, w])?)?;
                bias_controls = draw.controls.iter().map(Grid::to_vec).collect();
            }
            let sigma = spec.sigma.draw(&mut rng);
            let eps = rng.sample(Distribution::Normal, &[1, h, w])?;
            image = image.axpy(sigma, &eps)?;
            samples.push(SampleRecord {
                index: i,
                seed,
                sigma,
                class_means: clean.means,
                bias_controls,
                image: format!("image_{i:04}.l2sg"),
                labels: format!("labels_{i:04}.l2sg"),
            });
            images.push(image);
            labels.push(map.clone());
        }
        let one_hot = labels.iter().map(LabelMap::one_hot).collect();
        Ok(Self {
            manifest: Manifest {
                spec: spec.clone(),
                height: h,
                width: w,
                classes: first.classes(),
                samples,
            },
            images,
            labels,
            one_hot,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for ((rec, image), labels) in self.manifest.samples.iter().zip(&self.images).zip(&self.labels) {
            write_grid(dir.join(&rec.image), image, Dtype::F64)?;
            write_labels(dir.join(&rec.labels), labels)?;
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(path)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?)?;
        let mut images = Vec::with_capacity(manifest.samples.len());
        let mut labels = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let img = read_grid(dir.join(&rec.image))?;
            if img.shape() != [1, manifest.height, manifest.width] {
                return Err(Error::Format {
                    path: dir.join(&rec.image),
                    reason: format!("unexpected shape {:?}", img.shape()),
                });
            }
            images.push(img);
            labels.push(read_labels(dir.join(&rec.labels), manifest.classes)?);
        }
        let one_hot = labels.iter().map(LabelMap::one_hot).collect();
        Ok(Self {
            manifest,
            images,
            labels,
            one_hot,
        })
    }
}

/// Generates `count` blob label maps from a single seed.
pub fn blob_maps(spec: &BlobMapSpec, count: usize, seed: u64) -> Result<Vec<LabelMap>> {
    (0..count)
        .map(|i| spec.generate(&mut SeededRng::new(derive_seed(seed, i as u64))))
        .collect()
}

/// Builds the dataset and writes it under `dir`.
pub fn make_real_dataset(maps: &[LabelMap], spec: &RealDatasetSpec, dir: impl AsRef<Path>) -> Result<Dataset> {
    let ds = Dataset::generate(maps, spec)?;
    ds.write(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_image;

    fn maps(n: usize) -> Vec<LabelMap> {
        blob_maps(&BlobMapSpec::new(32, 32, 4), n, 11).unwrap()
    }

    fn clean(ds: &Dataset, i: usize) -> Grid {
        let rec = &ds.manifest.samples[i];
        synth_image(&ds.labels[i], &mut SeededRng::new(rec.seed)).unwrap().image
    }

    #[test]
    fn zero_corruption_is_identity() {
        let mut spec = RealDatasetSpec::noise_only(SigmaPreset::Fixed(0.0), 4, 1);
        spec.lattice = vec![2, 4, 8];
        spec.bias_c = vec![0.0; 3];
        let ds = Dataset::generate(&maps(2), &spec).unwrap();
        for i in 0..4 {
            assert_eq!(ds.images[i], clean(&ds, i));
        }
    }

    #[test]
    fn fixed_sigma_residual_std() {
        let spec = RealDatasetSpec::noise_only(SigmaPreset::Fixed(0.1), 20, 2);
        let ds = Dataset::generate(&maps(5), &spec).unwrap();
        let mut total = 0.0;
        for i in 0..ds.len() {
            assert_eq!(ds.manifest.samples[i].sigma, 0.1);
            let r = ds.images[i].sub(&clean(&ds, i)).unwrap();
            let m = r.mean();
            total += (r.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r.len() - 1) as f64).sqrt();
        }
        let mean_std = total / ds.len() as f64;
        assert!((mean_std - 0.1).abs() < 0.005, "{mean_std}");
    }

    #[test]
    fn range_sigma_stays_in_interval() {
        let spec = RealDatasetSpec::noise_only(SigmaPreset::Range([0.025, 0.2]), 50, 3);
        let ds = Dataset::generate(&maps(3), &spec).unwrap();
        let sig: Vec<f64> = ds.manifest.samples.iter().map(|s| s.sigma).collect();
        assert!(sig.iter().all(|s| (0.025..=0.2).contains(s)));
        assert!(sig.iter().any(|&s| s != sig[0]));
    }

    #[test]
    fn manifest_replays_bias_and_noise() {
        let spec = RealDatasetSpec {
            sigma: SigmaPreset::Fixed(0.05),
            bias_c: vec![0.5; 3],
            lattice: vec![2, 4, 8],
            count: 3,
            seed: 4,
        };
        let ds = Dataset::generate(&maps(3), &spec).unwrap();
        let basis = BiasBasis::new(32, 32, &spec.lattice).unwrap();
        for i in 0..3 {
            let rec = &ds.manifest.samples[i];
            let controls = rec
                .bias_controls
                .iter()
                .zip(&spec.lattice)
                .map(|(v, &m)| Grid::new(vec![m, m], v.clone()).unwrap())
                .collect();
            let draw = BiasDraw::from_controls(&basis, controls).unwrap();
            let alpha = draw.field(&spec.bias_c).unwrap().reshape(&[1, 32, 32]).unwrap();
            let biased = clean(&ds, i).mul(&alpha).unwrap();
            let r = ds.images[i].sub(&biased).unwrap();
            let sd = (r.data().iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
            assert!((sd - 0.05).abs() < 0.006, "{sd}");
        }
    }

    #[test]
    fn disk_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let spec = RealDatasetSpec::noise_only(SigmaPreset::Fixed(0.1), 3, 5);
        let ds = make_real_dataset(&maps(3), &spec, dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(SigmaPreset::Fixed(-0.1).validate().is_err());
        assert!(SigmaPreset::Range([0.2, 0.1]).validate().is_err());
        let mut spec = RealDatasetSpec::noise_only(SigmaPreset::Fixed(0.1), 3, 0);
        spec.bias_c = vec![-1.0];
        spec.lattice = vec![2];
        assert!(spec.validate().is_err());
    }
}
