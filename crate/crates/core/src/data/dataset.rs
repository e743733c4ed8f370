use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::{Normalization, SegSample};
use crate::error::{Error, Result};

/// Lazily decoded `root/<split>/{images,labels}/<id>.png` pairs in
/// lexicographic id order.
#[derive(Debug)]
pub struct Dataset {
    pairs: std::vec::IntoIter<(String, PathBuf, PathBuf)>,
    norm: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.len() == 0
    }
}

fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned(), path);
            }
        }
    }
    Ok(out)
}

/// Pairs every image with its label map. Pairing problems are reported up
/// front; decoding happens during iteration.
pub fn load_dataset(root: &Path, split: &str, norm: &Normalization) -> Result<Dataset> {
    norm.validate()?;
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Data(format!("split directory {} does not exist", dir.display())));
    }
    let images = list_pngs(&dir.join("images"))?;
    let mut labels = list_pngs(&dir.join("labels"))?;
    let mut pairs = Vec::with_capacity(images.len());
    for (id, img) in images {
        let lbl = labels
            .remove(&id)
            .ok_or_else(|| Error::Data(format!("image `{id}` in {} has no label map", dir.display())))?;
        pairs.push((id, img, lbl));
    }
    if let Some(orphan) = labels.keys().next() {
        return Err(Error::Data(format!("label map `{orphan}` in {} has no image", dir.display())));
    }
    Ok(Dataset { pairs: pairs.into_iter(), norm: norm.clone() })
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_owned(), source })
}

fn read_pair(id: &str, img_path: &Path, lbl_path: &Path, norm: &Normalization) -> Result<SegSample> {
    let rgb = decode(img_path)?.to_rgb8();
    let lbl = match decode(lbl_path)? {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Data(format!(
                "label map `{id}` must be 8-bit single-channel, found {:?}",
                other.color()
            )))
        }
    };
    if rgb.dimensions() != lbl.dimensions() {
        let (a, b) = (rgb.dimensions(), lbl.dimensions());
        return Err(Error::Data(format!(
            "`{id}`: image is {}x{} but label map is {}x{}",
            a.1, a.0, b.1, b.0
        )));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut image: Vec<f64> = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    norm.apply(&mut image);
    SegSample::new(id, h, w, image, lbl.into_raw())
}

impl Iterator for Dataset {
    type Item = Result<SegSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let (id, img, lbl) = self.pairs.next()?;
        Some(read_pair(&id, &img, &lbl, &self.norm))
    }
}

/// Writes a sample in the on-disk layout. The image must hold values in
/// `[0, 1]` (un-normalized); they are rounded to 8 bits.
pub fn save_sample(root: &Path, split: &str, sample: &SegSample) -> Result<()> {
    let (h, w) = (sample.height as u32, sample.width as u32);
    let bytes: Vec<u8> = sample.image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w, h, bytes).expect("sample dimensions checked at construction");
    let lbl = GrayImage::from_raw(w, h, sample.labels.clone()).expect("sample dimensions checked at construction");
    let path_for = |sub: &str| -> Result<PathBuf> {
        let dir = root.join(split).join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir.join(format!("{}.png", sample.id)))
    };
    let path = path_for("images")?;
    img.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
    let path = path_for("labels")?;
    lbl.save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
    Ok(())
}
