//! Noise-free randomized-contrast images and the corrupted "real" datasets
//! used as ground truth for recovery experiments.

mod dataset;
mod labels;

use crate::error::{Error, Result};
use crate::grid::{Grid, LabelMap, SeededRng};

pub use dataset::{blob_maps, make_real_dataset, Dataset, Manifest, RealDatasetSpec, SampleRecord, SigmaPreset};
pub use labels::BlobMapSpec;

/// A noise-free image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[1, H, W]`, constant within each class, values in `[0, 1)`.
    pub image: Grid,
    pub labels: LabelMap,
    /// `[C, H, W]`.
    pub one_hot: Grid,
    /// Per-class intensity means `mu_c`.
    pub means: Vec<f64>,
}

/// Paints every class with its own `mu_c ~ U(0, 1)`.
pub fn synth_image(labels: &LabelMap, rng: &mut SeededRng) -> Result<SynthSample> {
    if labels.labels().is_empty() {
        return Err(Error::invalid("empty label map"));
    }
    let means: Vec<f64> = (0..labels.classes()).map(|_| rng.uniform(0.0, 1.0)).collect();
    let [h, w] = labels.shape();
    let data = labels.labels().iter().map(|&l| means[l as usize]).collect();
    Ok(SynthSample {
        image: Grid::new(vec![1, h, w], data)?,
        labels: labels.clone(),
        one_hot: labels.one_hot(),
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> LabelMap {
        BlobMapSpec::new(32, 32, 4).generate(&mut SeededRng::new(0)).unwrap()
    }

    #[test]
    fn two_class_map_has_two_intensities() {
        let lm = LabelMap::new(2, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let s = synth_image(&lm, &mut SeededRng::new(5)).unwrap();
        let mut vals = s.image.to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert_eq!(vals.len(), 2);
    }

    #[test]
    fn seeds_change_contrast_not_boundaries() {
        let lm = map();
        let a = synth_image(&lm, &mut SeededRng::new(1)).unwrap();
        let b = synth_image(&lm, &mut SeededRng::new(2)).unwrap();
        assert_ne!(a.image, b.image);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn constant_within_class_and_one_hot() {
        let s = synth_image(&map(), &mut SeededRng::new(3)).unwrap();
        for (v, &l) in s.image.data().iter().zip(s.labels.labels()) {
            assert_eq!(*v, s.means[l as usize]);
        }
        for total in s.one_hot.sum_axis0().data() {
            assert_eq!(*total, 1.0);
        }
    }

    #[test]
    fn class_means_are_uniform() {
        // Kolmogorov-Smirnov distance against U(0, 1)
        let lm = LabelMap::new(1, 2, 2, vec![0, 1]).unwrap();
        let mut rng = SeededRng::new(4);
        let mut draws: Vec<f64> = (0..10_000)
            .flat_map(|_| synth_image(&lm, &mut rng).unwrap().means)
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "{ks}");
    }

    #[test]
    fn rejects_empty_map() {
        // LabelMap refuses empty maps at construction already
        assert!(LabelMap::new(0, 0, 2, vec![]).is_err());
    }
}
