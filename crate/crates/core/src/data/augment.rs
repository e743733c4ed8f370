use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SegSample;
use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random resize ratio bounds, inclusive.
    pub scale_range: (f64, f64),
    /// Output `(height, width)`.
    pub crop: (usize, usize),
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_range: (0.5, 2.0), crop: (64, 64), hflip_prob: 0.5, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < min <= max, got ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob must lie in [0, 1], got {}", self.hflip_prob)));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear resize of an `H·W·3` image with half-pixel centers.
pub fn resize_bilinear(image: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let cols: Vec<_> = (0..nw).map(|x| src(x, w, nw)).collect();
    let mut out = vec![0.0; nh * nw * 3];
    for y in 0..nh {
        let (y0, y1, fy) = src(y, h, nh);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| image[(yy * w + xx) * 3 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * nw + x) * 3 + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Nearest-neighbor label resize: destination `d` reads source `floor(d·in/out)`.
pub fn resize_nearest(labels: &[u8], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u8> {
    let cols: Vec<usize> = (0..nw).map(|x| x * w / nw).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let row = &labels[(y * h / nh) * w..(y * h / nh + 1) * w];
        out.extend(cols.iter().map(|&x| row[x]));
    }
    out
}

/// Mirrors image and labels left-right.
pub fn hflip(sample: &SegSample) -> SegSample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    for y in 0..h {
        for x in 0..w {
            let (d, s) = (y * w + x, y * w + (w - 1 - x));
            out.labels[d] = sample.labels[s];
            out.image[d * 3..d * 3 + 3].copy_from_slice(&sample.image[s * 3..s * 3 + 3]);
        }
    }
    out
}

fn resize(sample: &SegSample, nh: usize, nw: usize) -> SegSample {
    if (nh, nw) == (sample.height, sample.width) {
        return sample.clone();
    }
    SegSample {
        id: sample.id.clone(),
        height: nh,
        width: nw,
        image: resize_bilinear(&sample.image, sample.height, sample.width, nh, nw),
        labels: resize_nearest(&sample.labels, sample.height, sample.width, nh, nw),
    }
}

/// Zero pixels and ignore labels on the bottom/right up to `(mh, mw)`.
fn pad_to(sample: SegSample, mh: usize, mw: usize) -> SegSample {
    let (h, w) = (sample.height, sample.width);
    if h >= mh && w >= mw {
        return sample;
    }
    let (ph, pw) = (h.max(mh), w.max(mw));
    let mut image = vec![0.0; ph * pw * 3];
    let mut labels = vec![IGNORE_INDEX; ph * pw];
    for y in 0..h {
        image[y * pw * 3..(y * pw + w) * 3].copy_from_slice(&sample.image[y * w * 3..(y + 1) * w * 3]);
        labels[y * pw..y * pw + w].copy_from_slice(&sample.labels[y * w..(y + 1) * w]);
    }
    SegSample { id: sample.id, height: ph, width: pw, image, labels }
}

fn crop(sample: &SegSample, top: usize, left: usize, ch: usize, cw: usize) -> SegSample {
    let w = sample.width;
    let mut image = Vec::with_capacity(ch * cw * 3);
    let mut labels = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        image.extend_from_slice(&sample.image[(y * w + left) * 3..(y * w + left + cw) * 3]);
        labels.extend_from_slice(&sample.labels[y * w + left..y * w + left + cw]);
    }
    SegSample { id: sample.id.clone(), height: ch, width: cw, image, labels }
}

/// Random resize, pad-if-needed, uniform crop and horizontal flip, applied
/// identically to image and labels.
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, cfg: &AugmentConfig, rng: &mut R) -> SegSample {
    let (lo, hi) = cfg.scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let nh = ((sample.height as f64 * scale).round() as usize).max(1);
    let nw = ((sample.width as f64 * scale).round() as usize).max(1);
    let (ch, cw) = cfg.crop;
    let padded = pad_to(resize(sample, nh, nw), ch, cw);
    let top = rng.random_range(0..=padded.height - ch);
    let left = rng.random_range(0..=padded.width - cw);
    let out = crop(&padded, top, left, ch, cw);
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        hflip(&out)
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sample(h: usize, w: usize, classes: u8, seed: u64) -> SegSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = (0..h * w * 3).map(|_| rng.random()).collect();
        let labels = (0..h * w).map(|_| rng.random_range(0..classes)).collect();
        SegSample::new("s", h, w, image, labels).unwrap()
    }

    #[test]
    fn unit_scale_full_crop_no_flip_is_identity() {
        let s = random_sample(6, 8, 4, 1);
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), crop: (6, 8), hflip_prob: 0.0, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = random_sample(5, 7, 4, 2);
        assert_ne!(hflip(&s), s);
        assert_eq!(hflip(&hflip(&s)), s);
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), crop: (5, 7), hflip_prob: 1.0, seed: 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &cfg, &mut rng), hflip(&s));
    }

    #[test]
    fn doubling_block_map_quadruples_counts() {
        // 4x4 map of 2x2 constant blocks
        let labels: Vec<u8> = (0..16).map(|i| ((i / 4) / 2 * 2 + (i % 4) / 2) as u8).collect();
        let up = resize_nearest(&labels, 4, 4, 8, 8);
        for c in 0..4u8 {
            let before = labels.iter().filter(|&&l| l == c).count();
            let after = up.iter().filter(|&&l| l == c).count();
            assert_eq!(after, 4 * before);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let img = vec![0.25; 3 * 4 * 3];
        assert!(resize_bilinear(&img, 3, 4, 7, 5).iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = random_sample(3, 5, 2, 3);
        assert_eq!(resize_bilinear(&s.image, 3, 5, 3, 5), s.image);
    }

    #[test]
    fn small_inputs_are_padded_with_ignore() {
        let s = random_sample(3, 3, 2, 4);
        let cfg = AugmentConfig { scale_range: (1.0, 1.0), crop: (5, 6), hflip_prob: 0.0, seed: 0 };
        let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((out.height, out.width), (5, 6));
        assert_eq!(out.labels.iter().filter(|&&l| l == IGNORE_INDEX).count(), 30 - 9);
        assert!(cfg.validate().is_ok());
        assert!(AugmentConfig { hflip_prob: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(AugmentConfig { scale_range: (2.0, 1.0), ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn label_alphabet_never_grows(seed in any::<u64>(), h in 4usize..20, w in 4usize..20) {
            let s = random_sample(h, w, 3, seed);
            let cfg = AugmentConfig { crop: (8, 8), ..AugmentConfig::default() };
            let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed ^ 7));
            prop_assert!(out.labels.iter().all(|&l| l < 3 || l == IGNORE_INDEX));
        }

        #[test]
        fn image_and_labels_move_together(seed in any::<u64>(), scale in prop_oneof![Just(1.0), Just(2.0)]) {
            // Labels are encoded in the red channel. At these scales an
            // integral red value can only come from the nearest source pixel.
            let (h, w) = (12, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<u8> = (0..h * w).map(|i| ((i / w) / 4 + (i % w) / 5) as u8 % 3).collect();
            let image: Vec<f64> = labels.iter().flat_map(|&l| [f64::from(l), rng.random(), 0.0]).collect();
            let s = SegSample::new("t", h, w, image, labels).unwrap();
            let cfg = AugmentConfig { scale_range: (scale, scale), crop: (14, 8), ..AugmentConfig::default() };
            let out = augment(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for (i, &l) in out.labels.iter().enumerate() {
                let red = out.image[i * 3];
                if l == IGNORE_INDEX {
                    prop_assert_eq!(red, 0.0);
                } else if red.fract() == 0.0 {
                    prop_assert_eq!(red as u8, l);
                }
            }
        }
    }
}
