use crate::error::{Error, Result};
use crate::substrate::Tensor4;

/// Window origins along one axis: `0, s, 2s, …` plus a final window flush
/// with the far edge.
fn starts(len: usize, win: usize, stride: usize) -> Vec<usize> {
    if len <= win {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..=len - win).step_by(stride).collect();
    if *out.last().expect("non-empty range") != len - win {
        out.push(len - win);
    }
    out
}

fn copy_window(src: &Tensor4, top: usize, left: usize, wh: usize, ww: usize) -> Tensor4 {
    let [b, c, h, w] = src.shape();
    let mut out = Tensor4::zeros([b, c, wh, ww]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..wh.min(h - top) {
                let s = src.offset(bi, ci, top + y, left);
                let d = out.offset(bi, ci, y, 0);
                let n = ww.min(w - left);
                out.data_mut()[d..d + n].copy_from_slice(&src.data()[s..s + n]);
            }
        }
    }
    out
}

/// Tiles `image` (NCHW) into `window` crops at `stride`, runs `forward` on
/// each and averages overlapping logits by per-pixel coverage. Images smaller
/// than the window are zero-padded on the bottom/right and the output is
/// cropped back.
pub fn sliding_window_infer<F>(image: &Tensor4, window: (usize, usize), stride: (usize, usize), mut forward: F) -> Result<Tensor4>
where
    F: FnMut(&Tensor4) -> Result<Tensor4>,
{
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::Config(format!("window {wh}x{ww} and stride {sh}x{sw} must be positive")));
    }
    if sh > wh || sw > ww {
        return Err(Error::Config(format!("stride {sh}x{sw} exceeds window {wh}x{ww}; pixels would be skipped")));
    }
    let [b, _, h, w] = image.shape();
    let mut acc: Option<Tensor4> = None;
    let mut coverage = vec![0u32; h * w];
    for &top in &starts(h, wh, sh) {
        for &left in &starts(w, ww, sw) {
            let logits = forward(&copy_window(image, top, left, wh, ww))?;
            let [lb, c, lh, lw] = logits.shape();
            if (lb, lh, lw) != (b, wh, ww) {
                return Err(Error::Numerical(format!(
                    "window forward returned {:?}, expected batch {b} and {wh}x{ww}",
                    logits.shape()
                )));
            }
            let acc = acc.get_or_insert_with(|| Tensor4::zeros([b, c, h, w]));
            let (vh, vw) = (wh.min(h - top), ww.min(w - left));
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..vh {
                        let s = logits.offset(bi, ci, y, 0);
                        let d = acc.offset(bi, ci, top + y, left);
                        let src = &logits.data()[s..s + vw];
                        acc.data_mut()[d..d + vw].iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                }
            }
            for y in top..top + vh {
                coverage[y * w + left..y * w + left + vw].iter_mut().for_each(|n| *n += 1);
            }
        }
    }
    let mut acc = acc.expect("at least one window");
    let plane = h * w;
    for chunk in acc.data_mut().chunks_exact_mut(plane) {
        for (v, &n) in chunk.iter_mut().zip(&coverage) {
            *v /= f64::from(n);
        }
    }
    Ok(acc)
}
