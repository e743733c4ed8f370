use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Palette, SegSample};
use crate::error::{Error, Result};

pub const ROAD: u8 = 0;
pub const SKY: u8 = 1;
/// Middle band between sky and road; only used when `num_classes > 2`.
pub const TERRAIN: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(height, width)`.
    pub size: (usize, usize),
    pub num_classes: usize,
    /// Standard deviation of per-pixel color noise, in `[0, 1]` intensity units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: (64, 64), num_classes: 8, noise: 0.08 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!("synthetic scenes need 2..=255 classes, got {}", self.num_classes)));
        }
        if self.size.0 < 8 || self.size.1 < 8 {
            return Err(Error::Config(format!("synthetic scenes must be at least 8x8, got {:?}", self.size)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| match k as u8 {
                ROAD => "road".to_owned(),
                SKY => "sky".to_owned(),
                TERRAIN => "terrain".to_owned(),
                _ => format!("object{k}"),
            })
            .collect()
    }
}

/// Classes used for foreground shapes.
fn object_classes(c: usize) -> std::ops::Range<usize> {
    if c > 3 {
        3..c
    } else {
        2.min(c)..c
    }
}

/// Sky band on top, road band at the bottom, an optional terrain band in
/// between, then 2 to 5 rectangles or ellipses. Shapes never touch the first
/// or last row, so sky and road are always present. Labels are exact; the
/// image is the palette color of each label plus Gaussian noise, clamped to
/// `[0, 1]`.
pub fn synth_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SynthConfig, id: &str) -> Result<SegSample> {
    cfg.validate()?;
    let (h, w) = cfg.size;
    let c = cfg.num_classes;
    let mut labels = vec![ROAD; h * w];

    let horizon = rng.random_range(h / 5..=h * 2 / 5).max(1);
    let road_top = rng.random_range(h * 3 / 5..=h * 4 / 5).min(h - 1);
    for y in 0..h {
        let l = if y < horizon {
            SKY
        } else if y < road_top && c > 2 {
            TERRAIN
        } else {
            ROAD
        };
        labels[y * w..(y + 1) * w].fill(l);
    }

    let objects = object_classes(c);
    if !objects.is_empty() {
        for _ in 0..rng.random_range(2..=5) {
            let class = rng.random_range(objects.clone()) as u8;
            let sh = rng.random_range(h / 8..=h * 3 / 8).max(2);
            let sw = rng.random_range(w / 8..=w * 3 / 8).max(2);
            let top = rng.random_range(1..=h - 1 - sh);
            let left = rng.random_range(0..=w - sw);
            let ellipse = rng.random_bool(0.5);
            let (cy, cx) = (top as f64 + sh as f64 / 2.0, left as f64 + sw as f64 / 2.0);
            for y in top..top + sh {
                for x in left..left + sw {
                    let inside = !ellipse || {
                        let dy = (y as f64 + 0.5 - cy) / (sh as f64 / 2.0);
                        let dx = (x as f64 + 0.5 - cx) / (sw as f64 / 2.0);
                        dy * dy + dx * dx <= 1.0
                    };
                    if inside {
                        labels[y * w + x] = class;
                    }
                }
            }
        }
    }

    let palette = Palette::default();
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut image = Vec::with_capacity(h * w * 3);
    for &l in &labels {
        for v in palette.color(l as usize) {
            let n = if cfg.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            image.push((f64::from(v) / 255.0 + n).clamp(0.0, 1.0));
        }
    }
    SegSample::new(id, h, w, image, labels)
}
