use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("batch of {images} images of {channels}x{height}x{width} needs {expected} pixels, got {actual}")]
    PixelCount {
        images: usize,
        channels: usize,
        height: usize,
        width: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{pixels} images' worth of pixels but {labels} labels")]
    LabelCount { pixels: usize, labels: usize },
}

/// `B×C×H×W` images stored flat, one contiguous `C·H·W` block per image,
/// paired with one integer label per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self, ImageError> {
        let per = channels * height * width;
        let images = labels.len();
        if pixels.len() != per * images {
            if per > 0 && pixels.len().is_multiple_of(per) {
                return Err(ImageError::LabelCount { pixels: pixels.len() / per, labels: images });
            }
            return Err(ImageError::PixelCount {
                images,
                channels,
                height,
                width,
                expected: per * images,
                actual: pixels.len(),
            });
        }
        Ok(ImageBatch { channels, height, width, pixels, labels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Number of images.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per image.
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// New batch made of the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch { channels: self.channels, height: self.height, width: self.width, pixels, labels }
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> ImageBatch {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}
