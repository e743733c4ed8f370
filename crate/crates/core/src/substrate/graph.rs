//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. Node indices are
//! a topological order, so `backward` just walks the tape in reverse.

use super::conv::{self, ConvGeometry};
use super::tensor::{numel, Shape4, Tensor4};
use crate::error::{config_err, Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside the substrate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, each with the input's element count.
    fn backward(
        &self,
        inputs: &[&Tensor4],
        output: &Tensor4,
        grad_out: &[f64],
    ) -> Result<Vec<Option<Vec<f64>>>>;
}

/// Statistics source for batch normalization.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalize with the current batch statistics and record them under `name`.
    Batch { name: &'a str },
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStatsRecord {
    pub name: String,
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { x: Var, k: Var, geo: ConvGeometry },
    ConvTranspose2d { x: Var, k: Var, stride: usize },
    ChannelBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu { x: Var, sig: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var, transpose_b: bool },
    Softmax(Var),
    Concat(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Permute { x: Var, perm: [usize; 4] },
    Sum(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// A single forward/backward tape.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    batch_stats: Vec<BatchStatsRecord>,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, batch_stats: Vec::new() }
    }

    pub fn training() -> Self {
        Self::new(true)
    }

    pub fn eval() -> Self {
        Self::new(false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor4) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor4, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Trainable leaf tagged with a parameter name.
    pub fn param(&mut self, name: &str, t: &Tensor4) -> Var {
        let v = self.push(t.clone().with_requires_grad(true), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_owned());
        v
    }

    /// Gradients of every named parameter leaf. `None` when nothing reached it.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.param.as_deref().map(|name| (name, n.value.grad())))
    }

    pub fn batch_stats(&self) -> &[BatchStatsRecord] {
        &self.batch_stats
    }

    pub fn conv2d(&mut self, x: Var, k: Var, geo: ConvGeometry) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(k), geo)?;
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(out, Op::Conv2d { x, k, geo }, ng))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let out = conv::conv2d_transpose_forward(self.value(x), self.value(k), stride)?;
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(out, Op::ConvTranspose2d { x, k, stride }, ng))
    }

    /// Adds a `(1, C, 1, 1)` bias to every spatial position.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(b) != [1, c, 1, 1] {
            return Err(config_err!("channel_bias: bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        let hw = h * w;
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(out.numel(), n * c * hw);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out.with_requires_grad(false), Op::ChannelBias { x, b }, ng))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!("{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor4::from_vec(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let sig: Vec<f64> = xt.data().iter().map(|&v| sigmoid(v)).collect();
        let data = xt.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let out = Tensor4::from_vec(xt.shape(), data).expect("same shape");
        let ng = self.needs(x);
        let sig = if ng { sig } else { Vec::new() };
        self.push(out, Op::Silu { x, sig }, ng)
    }

    /// Per-channel normalization over `(batch, height, width)`; gamma/beta are `(1, C, 1, 1)`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != [1, c, 1, 1] {
                return Err(config_err!("batch_norm: affine {:?} for input {:?}", self.shape(p), self.shape(x)));
            }
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var, record) = match stats {
            BnStats::Batch { name } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * hw;
                        mean[ch] += xv[s..s + hw].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * hw;
                        let m = mean[ch];
                        var[ch] += xv[s..s + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                }
                let unbiased: Vec<f64> =
                    var.iter().map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 }).collect();
                var.iter_mut().for_each(|v| *v /= count);
                let rec = BatchStatsRecord { name: name.to_owned(), mean: mean.clone(), var: unbiased };
                (mean, var, Some(rec))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(config_err!("batch_norm: running stats of length {} for {c} channels", mean.len()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * hw;
                for i in s..s + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let batch_stats = record.is_some();
        if let Some(r) = record {
            self.batch_stats.push(r);
        }
        let out = Tensor4::from_vec([n, c, h, w], out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats }, ng))
    }

    /// Normalization over the last axis; gamma/beta are `(1, 1, 1, W)`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let d = shape[3];
        for p in [gamma, beta] {
            if self.shape(p) != [1, 1, 1, d] {
                return Err(config_err!("layer_norm: affine {:?} for input {:?}", self.shape(p), shape));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let out = Tensor4::from_vec(shape, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Affine map over the last axis: `x · W + b`, with `W` shaped `(1, 1, d_in, d_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [s0, s1, s2, din] = self.shape(x);
        let [o0, o1, wi, dout] = self.shape(w);
        if o0 != 1 || o1 != 1 || wi != din {
            return Err(config_err!("linear: weight {:?} for input {:?}", self.shape(w), self.shape(x)));
        }
        if let Some(b) = b {
            if self.shape(b) != [1, 1, 1, dout] {
                return Err(config_err!("linear: bias {:?} for output width {dout}", self.shape(b)));
            }
        }
        let rows = s0 * s1 * s2;
        let mut out = vec![0.0; rows * dout];
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, din, dout);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
            }
        }
        let out = Tensor4::from_vec([s0, s1, s2, dout], out)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    /// Batched matrix product over the last two axes; `b` may be used transposed.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let [a0, a1, m, k] = self.shape(a);
        let [b0, b1, br, bc] = self.shape(b);
        let (bk, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if a0 != b0 || a1 != b1 || bk != k {
            return Err(config_err!(
                "matmul: shapes {:?} and {:?} (transpose_b={transpose_b}) do not align",
                self.shape(a),
                self.shape(b)
            ));
        }
        let batches = a0 * a1;
        let mut out = vec![0.0; batches * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batches {
            let am = &av[bi * m * k..(bi + 1) * m * k];
            let bm = &bv[bi * k * n..(bi + 1) * k * n];
            let om = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                matmul_nt_acc(am, bm, om, m, k, n);
            } else {
                matmul_acc(am, bm, om, m, k, n);
            }
        }
        let out = Tensor4::from_vec([a0, a1, m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b, transpose_b }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let d = shape[3];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor4::from_vec(shape, out).expect("shape preserved");
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if n != nb || h != hb || w != wb {
            return Err(config_err!(
                "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            ));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for bi in 0..n {
            out.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let out = Tensor4::from_vec([n, ca + cb, h, w], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    /// Nearest-neighbour 2× spatial enlargement.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor4::from_vec([n, c, 2 * h, 2 * w], out).expect("shape");
        let ng = self.needs(x);
        self.push(out, Op::Upsample2x(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape4) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(config_err!("reshape: {:?} cannot become {:?}", self.shape(x), shape));
        }
        let out = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Result<Var> {
        let mut seen = [false; 4];
        for &p in &perm {
            if p > 3 || seen[p] {
                return Err(config_err!("permute: {perm:?} is not a permutation"));
            }
            seen[p] = true;
        }
        let out = permute_tensor(self.value(x), perm);
        let ng = self.needs(x);
        Ok(self.push(out, Op::Permute { x, perm }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor4::scalar(s), Op::Sum(x), ng)
    }

    /// Stop-gradient: same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone().with_requires_grad(false);
        self.push(out, Op::Leaf, false)
    }

    /// Row lookup: `table` is `(1, 1, K, d)`; output `(1, 1, len(indices), d)`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let [_, _, k, d] = self.shape(table);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(config_err!("gather_rows: index {i} out of range for {k} rows"));
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor4::from_vec([1, 1, indices.len(), d], out)?;
        let ng = self.needs(table);
        Ok(self.push(out, Op::GatherRows { table, indices: indices.to_vec() }, ng))
    }

    /// Registers an externally computed node with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor4, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(value.with_requires_grad(false), Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Accumulates gradients of `root` (seeded with ones) into every node that needs one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        let seed = vec![1.0; self.nodes[root.0].value.numel()];
        self.nodes[root.0].value.set_grad(Some(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].value.grad_mut().take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            self.nodes[i].value.set_grad(Some(g));
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                let slot = self.nodes[parent.0].value.grad_mut();
                match slot {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => *slot = Some(pg),
                }
            }
        }
        for node in &self.nodes {
            if let Some(g) = node.value.grad() {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    let what = node.param.as_deref().unwrap_or("intermediate");
                    return Err(Error::Numerical(format!("non-finite gradient at element {bad} of {what}")));
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geo } => {
                let (gx, gk) =
                    conv::conv2d_backward(self.value(*x), self.value(*k), *geo, g, self.needs(*x), self.needs(*k));
                res.extend(gx.map(|v| (*x, v)));
                res.extend(gk.map(|v| (*k, v)));
            }
            Op::ConvTranspose2d { x, k, stride } => {
                let (gx, gk) = conv::conv2d_transpose_backward(
                    self.value(*x),
                    self.value(*k),
                    *stride,
                    g,
                    self.needs(*x),
                    self.needs(*k),
                );
                res.extend(gx.map(|v| (*x, v)));
                res.extend(gk.map(|v| (*k, v)));
            }
            Op::ChannelBias { x, b } => {
                let [_, c, h, w] = out.shape();
                res.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let mut gb = vec![0.0; c];
                    for (p, chunk) in g.chunks(h * w).enumerate() {
                        gb[p % c] += chunk.iter().sum::<f64>();
                    }
                    res.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    res.push((*a, g.iter().zip(bv).map(|(gg, y)| gg * y).collect()));
                }
                if self.needs(*b) {
                    res.push((*b, g.iter().zip(av).map(|(gg, x)| gg * x).collect()));
                }
            }
            Op::Scale(x, f) => res.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Silu { x, sig } => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .zip(sig)
                    .map(|((gg, &v), &s)| gg * s * (1.0 + v * (1.0 - s)))
                    .collect();
                res.push((*x, gx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = out.shape();
                let hw = h * w;
                let count = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * hw;
                        for i in s..s + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let s = (b * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mg = sum_g[ch] / count;
                                let mgx = sum_gx[ch] / count;
                                for i in s..s + hw {
                                    gx[i] = scale * (g[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in s..s + hw {
                                    gx[i] = scale * g[i];
                                }
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res.push((*gamma, sum_gx));
                res.push((*beta, sum_g));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = out.shape()[3];
                let gam = self.value(*gamma).data();
                let mut ggam = vec![0.0; d];
                let mut gbet = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = 0.0;
                    let mut mean_dxx = 0.0;
                    for j in 0..d {
                        ggam[j] += gr[j] * xr[j];
                        gbet[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dx += dxh;
                        mean_dxx += dxh * xr[j];
                    }
                    mean_dx /= d as f64;
                    mean_dxx /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] * gam[j] - mean_dx - xr[j] * mean_dxx);
                    }
                }
                res.push((*x, gx));
                res.push((*gamma, ggam));
                res.push((*beta, gbet));
            }
            Op::Linear { x, w, b } => {
                let [_, _, din, dout] = self.shape(*w);
                let rows = g.len() / dout;
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * din];
                    matmul_nt_acc(g, self.value(*w).data(), &mut gx, rows, dout, din);
                    res.push((*x, gx));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; din * dout];
                    matmul_tn_acc(self.value(*x).data(), g, &mut gw, rows, din, dout);
                    res.push((*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    res.push((*b, gb));
                }
            }
            Op::Matmul { a, b, transpose_b } => {
                let [a0, a1, m, k] = self.shape(*a);
                let n = out.shape()[3];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let batches = a0 * a1;
                let mut ga = self.needs(*a).then(|| vec![0.0; av.len()]);
                let mut gb = self.needs(*b).then(|| vec![0.0; bv.len()]);
                for bi in 0..batches {
                    let gm = &g[bi * m * n..(bi + 1) * m * n];
                    let am = &av[bi * m * k..(bi + 1) * m * k];
                    let bm = &bv[bi * k * n..(bi + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // C = A Bᵀ, B is n×k: dA = dC B
                            matmul_acc(gm, bm, dst, m, n, k);
                        } else {
                            matmul_nt_acc(gm, bm, dst, m, n, k);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // dB = dCᵀ A  (n×k)
                            matmul_tn_acc(gm, am, dst, m, n, k);
                        } else {
                            matmul_tn_acc(am, gm, dst, m, k, n);
                        }
                    }
                }
                res.extend(ga.map(|v| (*a, v)));
                res.extend(gb.map(|v| (*b, v)));
            }
            Op::Softmax(x) => {
                let d = out.shape()[3];
                let y = out.data();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*x, gx));
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.shape(*a);
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for bi in 0..n {
                    let base = bi * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            gx[p * h * w + (y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Permute { x, perm } => {
                let mut inv = [0usize; 4];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor4::from_vec(out.shape(), g.to_vec())?;
                res.push((*x, permute_tensor(&gt, inv).into_data()));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::GatherRows { table, indices } => {
                let d = self.shape(*table)[3];
                let mut gt = vec![0.0; self.value(*table).numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += g[r * d + j];
                    }
                }
                res.push((*table, gt));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor4> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(config_err!("custom op {} returned {} grads for {} inputs", op.name(), grads.len(), inputs.len()));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        if gv.len() != self.value(*v).numel() {
                            return Err(config_err!("custom op {} returned a gradient of the wrong size", op.name()));
                        }
                        res.push((*v, gv));
                    }
                }
            }
        }
        Ok(res)
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn permute_tensor(x: &Tensor4, perm: [usize; 4]) -> Tensor4 {
    let s = x.shape();
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]], in_strides[perm[3]]];
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..out_shape[3] {
                    out.push(xd[base + d * st[3]]);
                }
            }
        }
    }
    Tensor4::from_vec(out_shape, out).expect("permutation preserves size")
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}
