use std::path::Path;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::losses::IGNORE_INDEX;

const BUILTIN: &str = include_str!("../../data/palette.txt");

/// Class-id → RGB table used for rendering synthetic scenes and colorized
/// predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self::parse(BUILTIN).expect("bundled palette parses")
    }
}

impl Palette {
    /// One `r g b` triple per non-empty line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let vals: Vec<u8> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("palette line {}: {e}", no + 1)))?;
            match vals[..] {
                [r, g, b] => colors.push([r, g, b]),
                _ => return Err(Error::Config(format!("palette line {}: expected 3 values", no + 1))),
            }
        }
        Ok(Self { colors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// Classes past the end of the table get a fixed hashed color.
    pub fn color(&self, class: usize) -> [u8; 3] {
        if let Some(&c) = self.colors.get(class) {
            return c;
        }
        let h = (class as u32).wrapping_mul(2_654_435_761);
        [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
    }
}

/// Label map to an RGB image; ignored pixels are black.
pub fn colorize(labels: &[u8], height: usize, width: usize, palette: &Palette) -> RgbImage {
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let l = labels[y as usize * width + x as usize];
        image::Rgb(if l == IGNORE_INDEX { [0, 0, 0] } else { palette.color(l as usize) })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_palette_has_nineteen_distinct_colors() {
        let p = Palette::default();
        assert_eq!(p.len(), 19);
        assert_eq!(p.color(0), [128, 64, 128]);
        let mut seen = std::collections::HashSet::new();
        assert!((0..40).all(|k| seen.insert(p.color(k))));
    }

    #[test]
    fn parse_errors_name_line() {
        let err = Palette::parse("1 2 3\n4 5\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(Palette::parse("1 2 300").is_err());
    }

    #[test]
    fn colorize_marks_ignore_black() {
        let p = Palette::default();
        let img = colorize(&[0, 255], 1, 2, &p);
        assert_eq!(img.get_pixel(0, 0).0, [128, 64, 128]);
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
    }
}
