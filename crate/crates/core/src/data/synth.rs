use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::Dataset;
use crate::nn::Tensor;
use crate::seed;

/// Noise level of [`synth_dataset`].
pub const SYNTH_NOISE: f64 = 0.1;

/// Per-class template images plus Gaussian noise (σ = 0.1), clipped to `[0, 1]`.
pub fn synth_dataset(n: usize, n_classes: usize, image_side: usize, seed: u64) -> Dataset {
    synth_dataset_with_noise(n, n_classes, image_side, seed, SYNTH_NOISE)
}

/// Classes are balanced (sample `i` before shuffling has class `i mod n_classes`).
pub fn synth_dataset_with_noise(n: usize, n_classes: usize, image_side: usize, seed: u64, sigma: f64) -> Dataset {
    let pixels = image_side * image_side;
    let mut trng = seed::rng(seed::mix_str(seed, "synth-templates"));
    let templates: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..pixels).map(|_| trng.random::<f64>()).collect())
        .collect();

    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes.max(1)).collect();
    labels.shuffle(&mut seed::rng(seed::mix_str(seed, "synth-labels")));

    let mut nrng = seed::rng(seed::mix_str(seed, "synth-noise"));
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(n * pixels);
    for &l in &labels {
        for &t in &templates[l] {
            let v = if sigma > 0.0 { t + noise.sample(&mut nrng) } else { t };
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(vec![n, image_side, image_side, 1], data).expect("consistent shape");
    Dataset::new(images, labels, n_classes).expect("labels in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(100, 2, 5, 9), synth_dataset(100, 2, 5, 9));
        assert_ne!(synth_dataset(100, 2, 5, 9), synth_dataset(100, 2, 5, 10));
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let ds = synth_dataset_with_noise(40, 4, 3, 1, 0.0);
        for c in 0..4 {
            let rows: Vec<&[f64]> = (0..40).filter(|&i| ds.labels[i] == c).map(|i| ds.images.row(i)).collect();
            assert_eq!(rows.len(), 10);
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn pixels_in_unit_interval() {
        let ds = synth_dataset(50, 5, 4, 3);
        assert!(ds.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.class_counts(), vec![10; 5]);
    }
}
