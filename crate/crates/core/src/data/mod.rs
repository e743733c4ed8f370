//! Samples, on-disk datasets, augmentation, synthetic scenes and tiled
//! inference.

mod augment;
mod dataset;
mod palette;
mod sliding;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, resize_bilinear, resize_nearest, AugmentConfig};
pub use dataset::{load_dataset, save_sample, Dataset};
pub use palette::{colorize, Palette};
pub use sliding::sliding_window_infer;
pub use synth::{synth_scene, SynthConfig, ROAD, SKY, TERRAIN};

use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;
use crate::substrate::Tensor4;

/// One image with its label map. `image` is `H·W·3`, row-major and
/// channel-last; `labels` is `H·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, image: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if image.len() != height * width * 3 || labels.len() != height * width {
            return Err(Error::Data(format!(
                "sample `{id}`: {}x{} needs {} image values and {} labels, got {} and {}",
                height,
                width,
                height * width * 3,
                height * width,
                image.len(),
                labels.len()
            )));
        }
        Ok(Self { id, height, width, image, labels })
    }

    /// Every label is a class below `num_classes` or the ignore value.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l != IGNORE_INDEX && l as usize >= num_classes) {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "sample `{}`: label {} at ({}, {}) is outside [0, {num_classes})",
                self.id,
                self.labels[i],
                i / self.width,
                i % self.width
            ))),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }
}

/// Per-channel `(v - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.5; 3], std: [0.25; 3] }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("normalization needs finite mean and positive std: {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, image: &mut [f64]) {
        for px in image.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Stacks equally sized samples into an NCHW tensor and a flat label buffer.
pub fn to_batch(samples: &[&SegSample]) -> Result<(Tensor4, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Data("cannot batch zero samples".into()))?;
    let (h, w) = (first.height, first.width);
    let mut t = Tensor4::zeros([samples.len(), 3, h, w]);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for (b, s) in samples.iter().enumerate() {
        if (s.height, s.width) != (h, w) {
            return Err(Error::Data(format!(
                "sample `{}` is {}x{}, batch expects {h}x{w}",
                s.id, s.height, s.width
            )));
        }
        for c in 0..3 {
            let base = t.offset(b, c, 0, 0);
            let plane = &mut t.data_mut()[base..base + h * w];
            for (i, v) in plane.iter_mut().enumerate() {
                *v = s.image[i * 3 + c];
            }
        }
        labels.extend_from_slice(&s.labels);
    }
    Ok((t, labels))
}

/// Independent RNG for item `index` of stream `stream`, so results do not
/// depend on processing order.
pub fn item_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn batch_layout_is_nchw() {
        let img: Vec<f64> = (0..2 * 3 * 3).map(f64::from).collect();
        let s = SegSample::new("a", 2, 3, img, vec![0, 1, 2, 3, 4, 255]).unwrap();
        let (t, l) = to_batch(&[&s, &s]).unwrap();
        assert_eq!(t.shape(), [2, 3, 2, 3]);
        assert_eq!(t.at(1, 2, 1, 0), s.pixel(1, 0)[2]);
        assert_eq!(l.len(), 12);
        let other = SegSample::new("b", 1, 1, vec![0.0; 3], vec![0]).unwrap();
        assert!(to_batch(&[&s, &other]).is_err());
        assert!(to_batch(&[]).is_err());
    }

    #[test]
    fn sample_shape_and_labels_checked() {
        assert!(SegSample::new("x", 2, 2, vec![0.0; 11], vec![0; 4]).is_err());
        let s = SegSample::new("x", 1, 3, vec![0.0; 9], vec![0, 255, 4]).unwrap();
        let err = s.validate_labels(4).unwrap_err().to_string();
        assert!(err.contains("(0, 2)"), "{err}");
        assert!(s.validate_labels(5).is_ok());
    }

    #[test]
    fn normalization_applies_per_channel() {
        let n = Normalization { mean: [0.1, 0.2, 0.3], std: [0.5, 1.0, 2.0] };
        let mut px = vec![0.6, 0.2, 0.7];
        n.apply(&mut px);
        assert!((px[0] - 1.0).abs() < 1e-15 && px[1] == 0.0 && (px[2] - 0.2).abs() < 1e-15);
        assert!(Normalization { std: [1.0, 0.0, 1.0], ..n }.validate().is_err());
    }

    #[test]
    fn item_rng_depends_only_on_coordinates() {
        let a: u64 = item_rng(1, 2, 3).random();
        assert_eq!(a, item_rng(1, 2, 3).random::<u64>());
        assert_ne!(a, item_rng(1, 2, 4).random::<u64>());
        assert_ne!(a, item_rng(1, 3, 3).random::<u64>());
    }
}
