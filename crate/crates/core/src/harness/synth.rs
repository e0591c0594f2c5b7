//! Small class-structured image sets for desk-scale experiments.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::ImageBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// One Gaussian bump per image, centred at a class-specific location.
    GaussianBlobs,
    /// Sinusoidal stripes with a class-specific orientation.
    Stripes,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::GaussianBlobs => "gaussian_blobs",
            SynthKind::Stripes => "stripes",
        }
    }
}

/// `n` images with labels `i mod classes`; deterministic in `seed`.
pub fn synth_dataset(
    kind: SynthKind,
    n: usize,
    classes: usize,
    (channels, height, width): (usize, usize, usize),
    seed: u64,
) -> ImageBatch {
    assert!(classes > 0, "need at least one class");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut pixels = Vec::with_capacity(n * channels * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let (hf, wf) = (height as f64, width as f64);

    for &label in &labels {
        let angle = 2.0 * PI * label as f64 / classes as f64;
        let image: Vec<f64> = match kind {
            SynthKind::GaussianBlobs => {
                let radius = hf.min(wf) / 4.0;
                let cy = (hf - 1.0) / 2.0 + radius * angle.sin() + rng.gen_range(-0.5..0.5);
                let cx = (wf - 1.0) / 2.0 + radius * angle.cos() + rng.gen_range(-0.5..0.5);
                let sigma = hf.min(wf) / 5.0 * rng.gen_range(0.8..1.2);
                let amp = rng.gen_range(0.75..1.0);
                (0..plane)
                    .map(|p| {
                        let (y, x) = ((p / width) as f64, (p % width) as f64);
                        let r2 = (y - cy).powi(2) + (x - cx).powi(2);
                        amp * (-r2 / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
            SynthKind::Stripes => {
                let theta = PI * label as f64 / classes as f64;
                let freq = 2.0 * PI / 4.0;
                let phase = rng.gen_range(0.0..2.0 * PI);
                (0..plane)
                    .map(|p| {
                        let (y, x) = ((p / width) as f64, (p % width) as f64);
                        0.5 + 0.4 * (freq * (x * theta.cos() + y * theta.sin()) + phase).sin()
                    })
                    .collect()
            }
        };
        for c in 0..channels {
            let tint = 1.0 - 0.1 * c as f64;
            pixels.extend(image.iter().map(|&v| (v * tint + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0)));
        }
    }
    ImageBatch::new((channels, height, width), pixels, labels).expect("sizes agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for kind in [SynthKind::GaussianBlobs, SynthKind::Stripes] {
            let a = synth_dataset(kind, 12, 4, (2, 8, 8), 5);
            assert_eq!(a, synth_dataset(kind, 12, 4, (2, 8, 8), 5));
            assert_ne!(a, synth_dataset(kind, 12, 4, (2, 8, 8), 6));
            assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(a.len(), 12);
        }
    }

    #[test]
    fn labels_cover_classes() {
        let a = synth_dataset(SynthKind::Stripes, 10, 4, (1, 8, 8), 1);
        for k in 0..4 {
            assert!(a.labels.contains(&k));
        }
    }

    #[test]
    fn class_means_are_distinct() {
        let classes = 4;
        let a = synth_dataset(SynthKind::GaussianBlobs, 40, classes, (1, 8, 8), 9);
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                let members: Vec<usize> = (0..a.len()).filter(|&i| a.labels[i] == k).collect();
                (0..64)
                    .map(|p| members.iter().map(|&i| a.image(i)[p]).sum::<f64>() / members.len() as f64)
                    .collect()
            })
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..classes {
            for j in i + 1..classes {
                let d = means[i].iter().zip(&means[j]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.5, "closest class means only {min} apart");
    }
}
