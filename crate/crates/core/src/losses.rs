//! Pixel-wise cross-entropy with an ignore label, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::QuantizationResult;
use crate::substrate::{CustomOp, Graph, Tensor4, Var};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub vq: f64,
    pub total: f64,
}

/// `vq = codebook + beta * commitment`, `total = ce + vq`. Without a
/// quantizer the VQ term is exactly zero.
pub fn total_loss(ce: f64, qr: Option<&QuantizationResult>, beta: f64) -> LossTerms {
    let vq = qr.map_or(0.0, |r| r.codebook_loss + beta * r.commitment_loss);
    LossTerms { ce, vq, total: ce + vq }
}

fn check_labels(logits: &Tensor4, labels: &[u8], ignore: u8) -> Result<()> {
    let [b, c, h, w] = logits.shape();
    if labels.len() != b * h * w {
        return Err(Error::Data(format!(
            "label buffer has {} entries, logits {:?} need {}",
            labels.len(),
            logits.shape(),
            b * h * w
        )));
    }
    if let Some(i) = labels.iter().position(|&l| l != ignore && l as usize >= c) {
        let (bi, rem) = (i / (h * w), i % (h * w));
        return Err(Error::Data(format!(
            "label {} at batch {bi}, pixel ({}, {}) is outside [0, {c})",
            labels[i],
            rem / w,
            rem % w
        )));
    }
    Ok(())
}

/// Mean `-log softmax(logits)[label]` over non-ignored pixels, and its
/// gradient with respect to the logits. Labels are `B·H·W`, row-major.
pub fn cross_entropy_with_grad(logits: &Tensor4, labels: &[u8], ignore: u8) -> Result<(f64, Vec<f64>)> {
    check_labels(logits, labels, ignore)?;
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    let data = logits.data();
    let mut grad = vec![0.0; data.len()];
    let count = labels.iter().filter(|&&l| l != ignore).count();
    if count == 0 {
        log::warn!("cross-entropy: every pixel carries the ignore label; loss defined as 0");
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for bi in 0..b {
        let base = bi * c * hw;
        for pix in 0..hw {
            let label = labels[bi * hw + pix];
            if label == ignore {
                continue;
            }
            let max = (0..c).map(|ci| data[base + ci * hw + pix]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ci, p) in probs.iter_mut().enumerate() {
                *p = (data[base + ci * hw + pix] - max).exp();
                z += *p;
            }
            let t = label as usize;
            loss -= (data[base + t * hw + pix] - max) - z.ln();
            for (ci, p) in probs.iter().enumerate() {
                let target = if ci == t { 1.0 } else { 0.0 };
                grad[base + ci * hw + pix] = (p / z - target) * inv;
            }
        }
    }
    Ok((loss * inv, grad))
}

pub fn cross_entropy(logits: &Tensor4, labels: &[u8], ignore: u8) -> Result<f64> {
    cross_entropy_with_grad(logits, labels, ignore).map(|(l, _)| l)
}

struct CrossEntropy {
    grad: Vec<f64>,
}

impl CustomOp for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[&Tensor4], _: &Tensor4, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let s = grad_out[0];
        Ok(vec![Some(self.grad.iter().map(|g| g * s).collect())])
    }
}

/// Scalar cross-entropy node over `(B, C, H, W)` logits.
pub fn cross_entropy_node(g: &mut Graph, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
    let (loss, grad) = cross_entropy_with_grad(g.value(logits), labels, ignore)?;
    Ok(g.custom(&[logits], Tensor4::scalar(loss), Box::new(CrossEntropy { grad })))
}
