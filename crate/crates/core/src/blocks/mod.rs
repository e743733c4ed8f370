//! Encoder/decoder building blocks: inverted residual, patch
//! unfold/fold, interpatch attention, the local-global MobileViT block and the
//! decoder's upsample-and-concatenate stage.

pub mod attention;
pub mod layers;
pub mod patches;

use serde::{Deserialize, Serialize};

pub use attention::{interpatch_attention, AttentionWeights, InterpatchAttention, TransformerLayer};
pub use layers::{BufferStore, Builder, Conv, ConvNormAct, Ctx};
pub use patches::{fold, fold_node, unfold, unfold_node, PatchGrid};

use crate::error::{config_err, Result};
use crate::substrate::{ConvGeometry, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertedResidualParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub expansion: usize,
    /// Add the input back onto the output. Only valid when shape-preserving.
    pub residual: bool,
}

impl InvertedResidualParams {
    /// Residual enabled exactly when the block preserves shape.
    pub fn auto(in_ch: usize, out_ch: usize, stride: usize, expansion: usize) -> Self {
        Self { in_ch, out_ch, stride, expansion, residual: stride == 1 && in_ch == out_ch }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride != 1 && self.stride != 2 {
            return Err(config_err!("inverted residual stride must be 1 or 2, got {}", self.stride));
        }
        if self.expansion == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return Err(config_err!("inverted residual needs positive channels and expansion: {self:?}"));
        }
        if self.residual && (self.stride != 1 || self.in_ch != self.out_ch) {
            return Err(config_err!(
                "residual requested on a shape-changing block (stride {}, {} -> {} channels)",
                self.stride,
                self.in_ch,
                self.out_ch
            ));
        }
        Ok(())
    }
}

/// Pointwise expand → depthwise 3×3 → pointwise project, with an optional skip.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub params: InvertedResidualParams,
    pub expand: Option<ConvNormAct>,
    pub depthwise: ConvNormAct,
    pub project: ConvNormAct,
}

impl InvertedResidual {
    pub fn new(b: &mut Builder<'_>, name: &str, params: InvertedResidualParams) -> Result<Self> {
        params.validate()?;
        let hidden = params.in_ch * params.expansion;
        let expand = if params.expansion == 1 {
            None
        } else {
            Some(ConvNormAct::new(b, &format!("{name}.expand"), params.in_ch, hidden, 1, 1, 1, true)?)
        };
        let depthwise = ConvNormAct::new(b, &format!("{name}.dw"), hidden, hidden, 3, params.stride, hidden, true)?;
        let project = ConvNormAct::new(b, &format!("{name}.project"), hidden, params.out_ch, 1, 1, 1, false)?;
        Ok(Self { params, expand, depthwise, project })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = cx.g.shape(x)[1];
        if c != self.params.in_ch {
            return Err(config_err!("inverted residual expects {} channels, got {c}", self.params.in_ch));
        }
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(cx, y)?;
        }
        y = self.depthwise.forward(cx, y)?;
        y = self.project.forward(cx, y)?;
        if self.params.residual {
            y = cx.g.add(y, x)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobileVitParams {
    pub channels: usize,
    /// Token width inside the transformer.
    pub attn_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_dim: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

/// Local 3×3 conv, global interpatch transformer, and conv fusion with the input.
#[derive(Clone, Debug, PartialEq)]
pub struct MobileVitBlock {
    pub params: MobileVitParams,
    pub local: ConvNormAct,
    pub proj_in: Conv,
    pub layers: Vec<TransformerLayer>,
    pub proj_out: ConvNormAct,
    pub fusion: ConvNormAct,
}

impl MobileVitBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, params: MobileVitParams) -> Result<Self> {
        let c = params.channels;
        let d = params.attn_dim;
        if c == 0 || d == 0 || params.depth == 0 || params.patch_h == 0 || params.patch_w == 0 {
            return Err(config_err!("{name}: invalid MobileViT parameters {params:?}"));
        }
        let local = ConvNormAct::new(b, &format!("{name}.local"), c, c, 3, 1, 1, true)?;
        let proj_in = Conv::new(b, &format!("{name}.proj_in"), c, d, 1, 1, 1, false)?;
        let layers = (0..params.depth)
            .map(|i| TransformerLayer::new(b, &format!("{name}.layer{i}"), d, params.heads, params.ffn_dim))
            .collect::<Result<Vec<_>>>()?;
        let proj_out = ConvNormAct::new(b, &format!("{name}.proj_out"), d, c, 1, 1, 1, true)?;
        let fusion = ConvNormAct::new(b, &format!("{name}.fusion"), 2 * c, c, 3, 1, 1, true)?;
        Ok(Self { params, local, proj_in, layers, proj_out, fusion })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let [_, c, h, w] = cx.g.shape(x);
        if c != self.params.channels {
            return Err(config_err!("MobileViT block expects {} channels, got {c}", self.params.channels));
        }
        let (ph, pw) = (self.params.patch_h, self.params.patch_w);
        let y = self.local.forward(cx, x)?;
        let y = self.proj_in.forward(cx, y)?;
        let mut p = unfold_node(cx.g, y, ph, pw)?;
        for layer in &self.layers {
            p = layer.forward(cx, p)?;
        }
        let y = fold_node(cx.g, p, ph, pw, h, w)?;
        let y = self.proj_out.forward(cx, y)?;
        let y = cx.g.concat_channels(x, y)?;
        self.fusion.forward(cx, y)
    }
}

/// 2× transposed-conv upsampling of the decoder path, channel concatenation
/// with the encoder skip, and a pointwise fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct UpsampleConcat {
    pub name: String,
    pub dec_ch: usize,
    pub up_ch: usize,
    pub skip_ch: usize,
    pub out_ch: usize,
    pub fuse: ConvNormAct,
}

impl UpsampleConcat {
    pub fn new(b: &mut Builder<'_>, name: &str, dec_ch: usize, up_ch: usize, skip_ch: usize, out_ch: usize) -> Result<Self> {
        b.he(&format!("{name}.up.weight"), [dec_ch, up_ch, 2, 2], dec_ch)?;
        b.constant(&format!("{name}.up.bias"), [1, up_ch, 1, 1], 0.0)?;
        let fuse = ConvNormAct::new(b, &format!("{name}.fuse"), up_ch + skip_ch, out_ch, 1, 1, 1, true)?;
        Ok(Self { name: name.to_owned(), dec_ch, up_ch, skip_ch, out_ch, fuse })
    }

    pub fn upsample(&self, cx: &mut Ctx<'_>, x_dec: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.up.weight", self.name))?;
        let b = cx.param(&format!("{}.up.bias", self.name))?;
        let up = cx.g.conv2d_transpose(x_dec, w, 2)?;
        cx.g.channel_bias(up, b)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x_dec: Var, x_skip: Var) -> Result<Var> {
        let up = self.upsample(cx, x_dec)?;
        let (us, ss) = (cx.g.shape(up), cx.g.shape(x_skip));
        if us[0] != ss[0] || us[2] != ss[2] || us[3] != ss[3] || ss[1] != self.skip_ch {
            return Err(config_err!(
                "upsampled decoder features {us:?} do not match skip {ss:?} (expected {} skip channels)",
                self.skip_ch
            ));
        }
        let cat = cx.g.concat_channels(up, x_skip)?;
        self.fuse.forward(cx, cat)
    }
}

/// Geometry helper for pointwise convs outside a [`Conv`] layer.
pub fn pointwise() -> ConvGeometry {
    ConvGeometry::new(1, 0, 1)
}
