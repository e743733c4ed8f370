//! Vector-quantization bottleneck.
//!
//! Each `d`-dimensional feature is replaced by its nearest codebook row
//! (squared Euclidean distance, lowest index wins ties). The auxiliary loss is
//! `mean ||sg[x] - e||² + beta * mean ||x - sg[e]||²`, both means taken over
//! positions *and* channels. In the backward pass the task gradient at the
//! quantized output is copied straight through to the encoder features; the
//! codebook only learns from the codebook term and the encoder only from the
//! commitment term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::substrate::{CustomOp, Graph, Tensor4, Var};

pub const DEFAULT_BETA: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Commitment weight.
    pub beta: f64,
    pub num_codes: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, num_codes: 19, dim: 16, seed: 0 }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_codes == 0 || self.dim == 0 {
            return Err(config_err!(
                "codebook needs K >= 1 and d >= 1 (got K={}, d={})",
                self.num_codes,
                self.dim
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config_err!("commitment weight beta must be positive, got {}", self.beta));
        }
        Ok(())
    }
}

/// `K × d` table of code vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    num_codes: usize,
    dim: usize,
    vectors: Vec<f64>,
}

impl Codebook {
    pub fn from_rows(num_codes: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if num_codes == 0 || dim == 0 || vectors.len() != num_codes * dim {
            return Err(config_err!(
                "codebook {num_codes}x{dim} cannot hold {} values",
                vectors.len()
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("codebook contains non-finite entries".into()));
        }
        Ok(Self { num_codes, dim, vectors })
    }

    /// Reads a `(1, 1, K, d)` tensor.
    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        let [a, b, k, d] = t.shape();
        if a != 1 || b != 1 {
            return Err(config_err!("codebook tensor must be (1, 1, K, d), got {:?}", t.shape()));
        }
        Self::from_rows(k, d, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec([1, 1, self.num_codes, self.dim], self.vectors.clone()).expect("consistent size")
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }
    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }
}

/// Channel-last feature field: `batch × height × width` positions of `dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentField {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentField {
    pub fn new(batch: usize, height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != batch * height * width * dim {
            return Err(config_err!(
                "field {batch}x{height}x{width}x{dim} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self { batch, height, width, dim, data })
    }

    pub fn zeros_like(other: &LatentField) -> Self {
        Self { data: vec![0.0; other.data.len()], ..other.clone() }
    }

    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.data[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn from_nchw(t: &Tensor4) -> Self {
        let [n, c, h, w] = t.shape();
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..h * w {
                    data[(b * h * w + p) * c + ch] = src[(b * c + ch) * h * w + p];
                }
            }
        }
        Self { batch: n, height: h, width: w, dim: c, data }
    }

    pub fn to_nchw(&self) -> Tensor4 {
        let (n, c, hw) = (self.batch, self.dim, self.height * self.width);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] = self.data[(b * hw + p) * c + ch];
                }
            }
        }
        Tensor4::from_vec([n, c, self.height, self.width], out).expect("consistent size")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    /// One code index per position, in `batch, height, width` order.
    pub indices: Vec<usize>,
    pub quantized: LatentField,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
}

impl QuantizationResult {
    /// `codebook_loss + beta * commitment_loss`.
    pub fn vq_loss(&self, beta: f64) -> f64 {
        self.codebook_loss + beta * self.commitment_loss
    }
}

/// i.i.d. uniform entries in `[-1/K, 1/K]`, reproducible from `cfg.seed`.
pub fn init_codebook(cfg: &VqConfig) -> Result<Codebook> {
    cfg.validate()?;
    let bound = 1.0 / cfg.num_codes as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vectors = (0..cfg.num_codes * cfg.dim).map(|_| rng.random_range(-bound..=bound)).collect();
    Codebook::from_rows(cfg.num_codes, cfg.dim, vectors)
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest codebook row; the lowest index wins ties.
pub fn nearest_code(x: &[f64], cb: &Codebook) -> Result<usize> {
    if x.len() != cb.dim {
        return Err(config_err!("feature of length {} against codebook dim {}", x.len(), cb.dim));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature passed to nearest_code".into()));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..cb.num_codes {
        let d = squared_distance(x, cb.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok(best)
}

/// Assigns every position of `x` to its nearest code and evaluates both VQ loss terms.
pub fn quantize_field(x: &LatentField, cb: &Codebook) -> Result<QuantizationResult> {
    if x.dim != cb.dim {
        return Err(config_err!("field channel dim {} does not match codebook dim {}", x.dim, cb.dim));
    }
    let indices = (0..x.positions()).map(|p| nearest_code(x.vector(p), cb)).collect::<Result<Vec<_>>>()?;
    quantize_with_assignment(x, cb, indices)
}

/// Quantizes with a fixed assignment (used to hold the argmin frozen in gradient checks).
pub fn quantize_with_assignment(x: &LatentField, cb: &Codebook, indices: Vec<usize>) -> Result<QuantizationResult> {
    if x.dim != cb.dim {
        return Err(config_err!("field channel dim {} does not match codebook dim {}", x.dim, cb.dim));
    }
    if indices.len() != x.positions() {
        return Err(config_err!("{} indices for {} positions", indices.len(), x.positions()));
    }
    let mut data = Vec::with_capacity(x.data.len());
    let mut sq = 0.0;
    for (p, &k) in indices.iter().enumerate() {
        if k >= cb.num_codes {
            return Err(config_err!("code index {k} out of range for K={}", cb.num_codes));
        }
        let e = cb.row(k);
        sq += squared_distance(x.vector(p), e);
        data.extend_from_slice(e);
    }
    let loss = sq / normalizer(x);
    Ok(QuantizationResult {
        indices,
        quantized: LatentField { data, ..x.clone() },
        codebook_loss: loss,
        commitment_loss: loss,
    })
}

fn normalizer(x: &LatentField) -> f64 {
    (x.positions() * x.dim) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqGradients {
    pub grad_x: LatentField,
    /// `K × d`, row-major.
    pub grad_codebook: Vec<f64>,
}

/// Gradient of `beta * commitment_loss` w.r.t. the encoder features: `beta * 2 (x - z_q) / (P d)`.
pub fn commitment_grad(x: &LatentField, result: &QuantizationResult, beta: f64) -> LatentField {
    let scale = 2.0 * beta / normalizer(x);
    let data = x.data.iter().zip(&result.quantized.data).map(|(a, q)| scale * (a - q)).collect();
    LatentField { data, ..x.clone() }
}

/// Gradient of `codebook_loss` w.r.t. the codebook: `2 (e_k - x) / (P d)` summed into selected rows.
pub fn codebook_grad(x: &LatentField, result: &QuantizationResult, cb: &Codebook) -> Vec<f64> {
    let scale = 2.0 / normalizer(x);
    let d = cb.dim;
    let mut g = vec![0.0; cb.vectors.len()];
    for (p, &k) in result.indices.iter().enumerate() {
        assert!(k < cb.num_codes, "code index {k} out of range for K={}", cb.num_codes);
        let xv = x.vector(p);
        let e = cb.row(k);
        for j in 0..d {
            g[k * d + j] += scale * (e[j] - xv[j]);
        }
    }
    g
}

/// Full routing for `downstream(z_q) + L_VQ`: the downstream gradient is copied
/// to the encoder side, the commitment term adds to it, and the codebook term
/// is the only contribution to the codebook.
pub fn vq_backward(
    grad_zq: &LatentField,
    x: &LatentField,
    result: &QuantizationResult,
    cb: &Codebook,
    cfg: &VqConfig,
) -> Result<VqGradients> {
    if grad_zq.data.len() != x.data.len() || result.quantized.data.len() != x.data.len() {
        return Err(config_err!("vq_backward: gradient, feature and quantized fields differ in size"));
    }
    let commit = commitment_grad(x, result, cfg.beta);
    let data = grad_zq.data.iter().zip(&commit.data).map(|(g, c)| g + c).collect();
    Ok(VqGradients { grad_x: LatentField { data, ..x.clone() }, grad_codebook: codebook_grad(x, result, cb) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeUsageStats {
    pub histogram: Vec<u64>,
    pub usage_fraction: f64,
    pub perplexity: f64,
}

/// Streaming code histogram for an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageCounter {
    counts: Vec<u64>,
}

impl UsageCounter {
    pub fn new(num_codes: usize) -> Self {
        Self { counts: vec![0; num_codes] }
    }

    pub fn add(&mut self, indices: &[usize]) {
        for &k in indices {
            assert!(k < self.counts.len(), "code index {k} out of range for K={}", self.counts.len());
            self.counts[k] += 1;
        }
    }

    pub fn merge(&mut self, other: &UsageCounter) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn stats(&self) -> CodeUsageStats {
        let total: u64 = self.counts.iter().sum();
        let k = self.counts.len().max(1) as f64;
        let used = self.counts.iter().filter(|&&c| c > 0).count() as f64;
        let entropy: f64 = if total == 0 {
            0.0
        } else {
            self.counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        };
        let mut nonzero = self.counts.iter().filter(|&&c| c > 0);
        let first = nonzero.next().copied();
        // A flat histogram has perplexity equal to its support, without exp/ln rounding.
        let flat = first.is_none_or(|f| nonzero.all(|&c| c == f));
        let perplexity = if flat { used.max(1.0) } else { entropy.exp() };
        CodeUsageStats { histogram: self.counts.clone(), usage_fraction: used / k, perplexity }
    }
}

pub fn usage_stats(indices: &[usize], num_codes: usize) -> CodeUsageStats {
    let mut c = UsageCounter::new(num_codes);
    c.add(indices);
    c.stats()
}

/// Graph nodes produced by [`quantize_node`].
pub struct VqNodes {
    /// Quantized features in NCHW layout (straight-through to the input).
    pub quantized: Var,
    /// Scalar `codebook_loss + beta * commitment_loss`.
    pub loss: Var,
    /// The codebook leaf the nodes were built from.
    pub codebook: Var,
    pub result: QuantizationResult,
}

struct StraightThrough;

impl CustomOp for StraightThrough {
    fn name(&self) -> &'static str {
        "straight_through"
    }

    fn backward(&self, _inputs: &[&Tensor4], _output: &Tensor4, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        // The codebook gets nothing from the task loss.
        Ok(vec![Some(grad_out.to_vec()), None])
    }
}

struct VqLoss {
    result: QuantizationResult,
    beta: f64,
}

impl CustomOp for VqLoss {
    fn name(&self) -> &'static str {
        "vq_loss"
    }

    fn backward(&self, inputs: &[&Tensor4], _output: &Tensor4, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let upstream = grad_out[0];
        let x = LatentField::from_nchw(inputs[0]);
        let cb = Codebook::from_tensor(inputs[1])?;
        let mut gx = commitment_grad(&x, &self.result, self.beta);
        gx.data.iter_mut().for_each(|v| *v *= upstream);
        let mut gc = codebook_grad(&x, &self.result, &cb);
        gc.iter_mut().for_each(|v| *v *= upstream);
        Ok(vec![Some(gx.to_nchw().into_data()), Some(gc)])
    }
}

/// Quantizes an NCHW feature node against a `(1, 1, K, d)` codebook node.
///
/// `frozen` pins the assignment instead of recomputing the argmin.
pub fn quantize_node(
    g: &mut Graph,
    x: Var,
    codebook: Var,
    beta: f64,
    frozen: Option<&[usize]>,
) -> Result<VqNodes> {
    let field = LatentField::from_nchw(g.value(x));
    let cb = Codebook::from_tensor(g.value(codebook))?;
    let result = match frozen {
        Some(idx) => quantize_with_assignment(&field, &cb, idx.to_vec())?,
        None => quantize_field(&field, &cb)?,
    };
    let zq = result.quantized.to_nchw();
    let quantized = g.custom(&[x, codebook], zq, Box::new(StraightThrough));
    let loss_value = Tensor4::scalar(result.vq_loss(beta));
    let loss = g.custom(&[x, codebook], loss_value, Box::new(VqLoss { result: result.clone(), beta }));
    Ok(VqNodes { quantized, loss, codebook, result })
}
