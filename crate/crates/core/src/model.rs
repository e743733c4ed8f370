//! The full segmentation network.
//!
//! Encoder: a stride-2 stem followed by stages that each open with a
//! downsampling inverted residual and continue with either another inverted
//! residual or a MobileViT block. The deepest features go through a pointwise
//! projection to the codebook width and are quantized. The decoder mirrors the
//! encoder: each stage upsamples, concatenates the matching (continuous) skip
//! and refines; a last transposed conv restores full resolution, followed by a
//! depthwise 3×3 and the pointwise class head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    BufferStore, Builder, Conv, ConvNormAct, Ctx, InvertedResidual, InvertedResidualParams, MobileVitBlock,
    MobileVitParams, UpsampleConcat,
};
use crate::error::{config_err, Error, Result};
use crate::quantizer::{init_codebook, QuantizationResult, VqConfig, VqNodes};
use crate::substrate::{Graph, ParamStore, Tensor4, Var};

pub const CODEBOOK_PARAM: &str = "vq.codebook";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of each encoder stage.
    pub widths: Vec<usize>,
    /// Downsampling of each encoder stage (1 or 2).
    pub strides: Vec<usize>,
    /// Whether a stage uses a MobileViT block (otherwise a second inverted residual).
    pub transformer: Vec<bool>,
    pub expansion: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    /// Patch `(h, w)` for interpatch attention.
    pub patch: (usize, usize),
    /// Width `d` of the quantized bottleneck; must equal `vq.dim`.
    pub bottleneck_dim: usize,
    pub vq: VqConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(8)
    }
}

impl ModelConfig {
    /// Small profile sized for single-core training on 64×64 crops.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            num_classes,
            in_channels: 3,
            stem_channels: 8,
            widths: vec![12, 16, 24],
            strides: vec![2, 2, 1],
            transformer: vec![false, true, true],
            expansion: 2,
            heads: 2,
            depth: 1,
            ffn_mult: 2,
            patch: (2, 2),
            bottleneck_dim: 16,
            vq: VqConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(config_err!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        let n = self.widths.len();
        if n == 0 {
            return Err(config_err!("at least one encoder stage is required"));
        }
        if self.strides.len() != n || self.transformer.len() != n {
            return Err(config_err!(
                "inconsistent stage lists: {} widths, {} strides, {} transformer flags",
                n,
                self.strides.len(),
                self.transformer.len()
            ));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(config_err!("stage strides must be 1 or 2, got {s}"));
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.widths.contains(&0) {
            return Err(config_err!("channel widths must be positive: stem {} stages {:?}", self.stem_channels, self.widths));
        }
        if self.expansion == 0 || self.depth == 0 || self.ffn_mult == 0 || self.patch.0 == 0 || self.patch.1 == 0 {
            return Err(config_err!("expansion, depth, ffn_mult and patch size must be positive"));
        }
        for (i, (&w, &t)) in self.widths.iter().zip(&self.transformer).enumerate() {
            if t && (self.heads == 0 || w % self.heads != 0) {
                return Err(config_err!("stage {i} width {w} is not divisible by {} heads", self.heads));
            }
        }
        if self.bottleneck_dim != self.vq.dim {
            return Err(config_err!(
                "bottleneck dim {} does not match codebook dim {}",
                self.bottleneck_dim,
                self.vq.dim
            ));
        }
        self.vq.validate()
    }

    /// Downsampling factor after the stem and after each stage.
    fn factors(&self) -> Vec<usize> {
        let mut f = vec![2];
        for &s in &self.strides {
            f.push(f[f.len() - 1] * s);
        }
        f
    }

    pub fn total_stride(&self) -> usize {
        self.factors()[self.widths.len()]
    }

    /// Input height/width must be multiples of these values.
    pub fn required_multiple(&self) -> (usize, usize) {
        let f = self.factors();
        let mut mh = f[self.widths.len()];
        let mut mw = mh;
        for (i, &t) in self.transformer.iter().enumerate() {
            if t {
                mh = lcm(mh, f[i + 1] * self.patch.0);
                mw = lcm(mw, f[i + 1] * self.patch.1);
            }
        }
        (mh, mw)
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.in_channels {
            return Err(config_err!("expected {} input channels, got {c}", self.in_channels));
        }
        let (mh, mw) = self.required_multiple();
        if h == 0 || w == 0 || h % mh != 0 || w % mw != 0 {
            return Err(config_err!(
                "input {h}x{w} is not divisible by the required multiple {mh}x{mw}; pad or crop to a multiple of {mh}x{mw}"
            ));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub codebook: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Refine {
    Residual(InvertedResidual),
    Vit(MobileVitBlock),
}

impl Refine {
    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Refine::Residual(b) => b.forward(cx, x),
            Refine::Vit(b) => b.forward(cx, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderStage {
    down: InvertedResidual,
    block: Refine,
}

#[derive(Clone, Debug, PartialEq)]
enum Merge {
    /// Stage that downsampled: transposed conv back up, then concatenate.
    Up(UpsampleConcat),
    /// Stride-1 stage: concatenate and fuse at the same resolution.
    Same(ConvNormAct),
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    merge: Merge,
    refine: Refine,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Skip quantization entirely (baseline without a codebook).
    pub bypass_vq: bool,
    /// Pin code assignments instead of recomputing the argmin.
    pub frozen_codes: Option<&'a [usize]>,
    /// Feed the decoder `bottleneck + offset` instead of the quantized
    /// output. With `offset = quantized - bottleneck` taken at a base point
    /// the value is unchanged, and the result is a differentiable function
    /// whose true derivative is the straight-through one, which makes the
    /// whole network checkable by finite differences.
    pub linearized_offset: Option<&'a Tensor4>,
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Encoder output before quantization.
    pub bottleneck: Var,
    /// What the decoder actually consumes (quantized unless bypassed).
    pub decoder_input: Var,
    pub vq: Option<VqNodes>,
}

impl ForwardOutput {
    pub fn quantization(&self) -> Option<&QuantizationResult> {
        self.vq.as_ref().map(|v| &v.result)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub buffers: BufferStore,
    stem: ConvNormAct,
    encoder: Vec<EncoderStage>,
    proj: Conv,
    decoder: Vec<DecoderStage>,
    final_up: (String, usize),
    final_refine: ConvNormAct,
    head: Conv,
}

fn vit_params(cfg: &ModelConfig, channels: usize) -> MobileVitParams {
    MobileVitParams {
        channels,
        attn_dim: channels,
        heads: cfg.heads,
        depth: cfg.depth,
        ffn_dim: channels * cfg.ffn_mult,
        patch_h: cfg.patch.0,
        patch_w: cfg.patch.1,
    }
}

fn refine_block(b: &mut Builder<'_>, name: &str, cfg: &ModelConfig, channels: usize, vit: bool) -> Result<Refine> {
    Ok(if vit {
        Refine::Vit(MobileVitBlock::new(b, name, vit_params(cfg, channels))?)
    } else {
        Refine::Residual(InvertedResidual::new(
            b,
            name,
            InvertedResidualParams::auto(channels, channels, 1, cfg.expansion),
        )?)
    })
}

/// Builds a model with every parameter drawn from `seed`; the codebook comes
/// from [`init_codebook`] seeded by `vq.seed` mixed with `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<SegModel> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    let mut buffers = BufferStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder { params: &mut params, buffers: &mut buffers, rng: &mut rng };

    let stem = ConvNormAct::new(&mut b, "enc.stem", cfg.in_channels, cfg.stem_channels, 3, 2, 1, true)?;
    let mut chans = vec![cfg.stem_channels];
    let mut encoder = Vec::with_capacity(cfg.widths.len());
    for (i, &w) in cfg.widths.iter().enumerate() {
        let prev = chans[i];
        let down = InvertedResidual::new(
            &mut b,
            &format!("enc.stage{i}.down"),
            InvertedResidualParams::auto(prev, w, cfg.strides[i], cfg.expansion),
        )?;
        let block = refine_block(&mut b, &format!("enc.stage{i}.block"), cfg, w, cfg.transformer[i])?;
        encoder.push(EncoderStage { down, block });
        chans.push(w);
    }
    let deepest = chans[cfg.widths.len()];
    let proj = Conv::new(&mut b, "enc.proj", deepest, cfg.bottleneck_dim, 1, 1, 1, true)?;

    let mut vq = cfg.vq.clone();
    vq.seed = vq.seed.wrapping_add(seed);
    let codebook = init_codebook(&vq)?;
    b.params.insert(CODEBOOK_PARAM, codebook.to_tensor())?;

    let n = cfg.widths.len();
    let mut decoder = Vec::with_capacity(n);
    let mut cur = cfg.bottleneck_dim;
    for j in 0..n {
        let s = n - 1 - j;
        let skip = chans[s];
        let name = format!("dec.stage{j}");
        let merge = if cfg.strides[s] == 2 {
            Merge::Up(UpsampleConcat::new(&mut b, &format!("{name}.merge"), cur, skip, skip, skip)?)
        } else {
            Merge::Same(ConvNormAct::new(&mut b, &format!("{name}.merge"), cur + skip, skip, 1, 1, 1, true)?)
        };
        let refine = refine_block(&mut b, &format!("{name}.refine"), cfg, skip, cfg.transformer[s])?;
        decoder.push(DecoderStage { merge, refine });
        cur = skip;
    }
    let c0 = cfg.stem_channels;
    b.he("dec.final.up.weight", [c0, c0, 2, 2], c0)?;
    b.constant("dec.final.up.bias", [1, c0, 1, 1], 0.0)?;
    let final_refine = ConvNormAct::new(&mut b, "dec.final.refine", c0, c0, 3, 1, c0, true)?;
    let head = Conv::new(&mut b, "dec.head", c0, cfg.num_classes, 1, 1, 1, true)?;

    Ok(SegModel {
        config: cfg.clone(),
        params,
        buffers,
        stem,
        encoder,
        proj,
        decoder,
        final_up: ("dec.final.up".to_owned(), c0),
        final_refine,
        head,
    })
}

impl SegModel {
    pub fn param_counts(&self) -> ParamCounts {
        let encoder = self.params.num_elements_with_prefix("enc.");
        let decoder = self.params.num_elements_with_prefix("dec.");
        let codebook = self.params.num_elements_with_prefix("vq.");
        ParamCounts { encoder, decoder, codebook, total: self.params.num_elements() }
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor4, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.config.check_input(image.shape())?;
        let mut cx = Ctx::new(g, &self.params, &self.buffers);
        let x = cx.g.input(image.clone());

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = self.stem.forward(&mut cx, x)?;
        for stage in &self.encoder {
            skips.push(h);
            h = stage.down.forward(&mut cx, h)?;
            h = stage.block.forward(&mut cx, h)?;
        }
        let bottleneck = self.proj.forward(&mut cx, h)?;

        let (decoder_input, vq) = if opts.bypass_vq {
            (bottleneck, None)
        } else {
            let cb = cx.param(CODEBOOK_PARAM)?;
            let nodes = crate::quantizer::quantize_node(cx.g, bottleneck, cb, self.config.vq.beta, opts.frozen_codes)?;
            let input = match opts.linearized_offset {
                Some(off) => {
                    let c = cx.g.input(off.clone());
                    cx.g.add(bottleneck, c)?
                }
                None => nodes.quantized,
            };
            (input, Some(nodes))
        };

        let mut y = decoder_input;
        for (stage, &skip) in self.decoder.iter().zip(skips.iter().rev()) {
            y = match &stage.merge {
                Merge::Up(up) => up.forward(&mut cx, y, skip)?,
                Merge::Same(fuse) => {
                    let cat = cx.g.concat_channels(y, skip)?;
                    fuse.forward(&mut cx, cat)?
                }
            };
            y = stage.refine.forward(&mut cx, y)?;
        }
        let w = cx.param(&format!("{}.weight", self.final_up.0))?;
        let bias = cx.param(&format!("{}.bias", self.final_up.0))?;
        y = cx.g.conv2d_transpose(y, w, 2)?;
        y = cx.g.channel_bias(y, bias)?;
        y = self.final_refine.forward(&mut cx, y)?;
        let logits = self.head.forward(&mut cx, y)?;
        Ok(ForwardOutput { logits, bottleneck, decoder_input, vq })
    }

    /// Eval-mode logits and the bottleneck quantization, if any.
    pub fn infer(&self, image: &Tensor4, bypass_vq: bool) -> Result<(Tensor4, Option<QuantizationResult>)> {
        let mut g = Graph::eval();
        let out = self.forward(&mut g, image, ForwardOptions { bypass_vq, ..Default::default() })?;
        let qr = out.vq.map(|v| v.result);
        Ok((g.value(out.logits).clone(), qr))
    }

    /// Per-pixel label maps, one `H·W` vector per batch item.
    pub fn predict(&self, image: &Tensor4, bypass_vq: bool) -> Result<Vec<Vec<u8>>> {
        let (logits, _) = self.infer(image, bypass_vq)?;
        Ok(argmax_labels(&logits))
    }
}

/// Central-difference check of the training loss (cross-entropy plus VQ
/// loss) with respect to individual parameter elements.
///
/// Backprop through the quantizer follows the straight-through estimator and
/// the stop-gradients of the VQ loss, which finite differences cannot see.
/// The probed function therefore freezes code assignments at the base point,
/// linearizes the quantizer (see [`ForwardOptions::linearized_offset`]) and
/// evaluates every stop-gradient operand as a base-point constant:
/// `‖x₀ − e‖² + β‖x − e₀‖²`. Its exact derivative is what training should
/// backpropagate, and the analytic side is the unmodified training graph. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` over `probes`.
pub fn finite_difference_check(
    model: &SegModel,
    image: &Tensor4,
    labels: &[u8],
    probes: &[(String, usize)],
    epsilon: f64,
    floor: f64,
) -> Result<f64> {
    let mut base = Graph::training();
    let out = model.forward(&mut base, image, ForwardOptions::default())?;
    let frozen = out.quantization().map(|q| {
        let x0 = base.value(out.bottleneck).clone();
        let e0 = base.value(out.decoder_input).clone();
        let mut offset = e0.clone();
        offset.data_mut().iter_mut().zip(x0.data()).for_each(|(z, x)| *z -= x);
        let x0_rows = crate::quantizer::LatentField::from_nchw(&x0).data;
        (q.indices.clone(), offset, e0, x0_rows)
    });
    let beta = model.config.vq.beta;
    let loss = |m: &SegModel, g: &mut Graph| -> Result<Var> {
        let opts = ForwardOptions {
            bypass_vq: false,
            frozen_codes: frozen.as_ref().map(|f| f.0.as_slice()),
            linearized_offset: frozen.as_ref().map(|f| &f.1),
        };
        let out = m.forward(g, image, opts)?;
        let ce = crate::losses::cross_entropy_node(g, out.logits, labels, crate::losses::IGNORE_INDEX)?;
        let (Some(vq), Some((codes, _, e0, x0_rows))) = (out.vq, frozen.as_ref()) else {
            return Ok(ce);
        };
        let n = e0.numel() as f64;
        let e0 = g.input(e0.clone());
        let diff = g.sub(out.bottleneck, e0)?;
        let sq = g.mul(diff, diff)?;
        let commit = g.sum(sq);
        let rows = g.gather_rows(vq.codebook, codes)?;
        let x0 = g.input(Tensor4::from_vec(g.shape(rows), x0_rows.clone())?);
        let diff = g.sub(rows, x0)?;
        let sq = g.mul(diff, diff)?;
        let cb = g.sum(sq);
        let commit = g.scale(commit, beta / n);
        let cb = g.scale(cb, 1.0 / n);
        let vq_loss = g.add(cb, commit)?;
        g.add(ce, vq_loss)
    };

    // Analytic side: the real training graph.
    let mut g = Graph::training();
    let out = model.forward(&mut g, image, ForwardOptions::default())?;
    let ce = crate::losses::cross_entropy_node(&mut g, out.logits, labels, crate::losses::IGNORE_INDEX)?;
    let root = match &out.vq {
        Some(v) => g.add(ce, v.loss)?,
        None => ce,
    };
    let mut check = Graph::training();
    let surrogate = loss(model, &mut check)?;
    if (g.scalar(root) - check.scalar(surrogate)).abs() > 1e-9 * g.scalar(root).abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "surrogate loss {} differs from training loss {} at the base point",
            check.scalar(surrogate),
            g.scalar(root)
        )));
    }
    g.backward(root)?;
    let grads: std::collections::HashMap<&str, &[f64]> = g.param_grads().filter_map(|(n, v)| v.map(|v| (n, v))).collect();

    let mut probe_model = model.clone();
    let mut worst = 0.0f64;
    for (name, idx) in probes {
        let original = model.params.require(name)?.data().get(*idx).copied().ok_or_else(|| {
            config_err!("probe index {idx} out of range for parameter `{name}`")
        })?;
        let mut eval_at = |v: f64| -> Result<f64> {
            probe_model.params.get_mut(name).expect("checked above").data_mut()[*idx] = v;
            let mut g = Graph::training();
            let root = loss(&probe_model, &mut g)?;
            Ok(g.scalar(root))
        };
        let numeric = (eval_at(original + epsilon)? - eval_at(original - epsilon)?) / (2.0 * epsilon);
        eval_at(original)?;
        let analytic = grads.get(name.as_str()).map_or(0.0, |g| g[*idx]);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        log::debug!("probe {name}[{idx}]: analytic {analytic:e} numeric {numeric:e} rel {err:e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Channel argmax per pixel; the lowest class index wins ties.
pub fn argmax_labels(logits: &Tensor4) -> Vec<Vec<u8>> {
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    (0..b)
        .map(|bi| {
            let mut best = vec![0u8; hw];
            let mut best_v = logits.plane(bi, 0).to_vec();
            for ci in 1..c {
                for (i, &v) in logits.plane(bi, ci).iter().enumerate() {
                    if v > best_v[i] {
                        best_v[i] = v;
                        best[i] = ci as u8;
                    }
                }
            }
            best
        })
        .collect()
}
