//! Parameterized primitives shared by all blocks.
//!
//! Layers only hold parameter *names*; values live in a [`ParamStore`] and are
//! bound onto the graph per forward pass through a [`Ctx`].

use std::collections::HashMap;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::substrate::{BatchStatsRecord, BnStats, ConvGeometry, Graph, ParamStore, Tensor4, Var};

pub const BN_MOMENTUM: f64 = 0.1;

/// Non-trainable state (batch-norm running statistics), insertion-ordered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferStore {
    buffers: IndexMap<String, Vec<f64>>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.buffers.contains_key(&name) {
            return Err(config_err!("duplicate buffer name `{name}`"));
        }
        self.buffers.insert(name, values);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, records: &[BatchStatsRecord]) -> Result<()> {
        for r in records {
            for (suffix, batch) in [("running_mean", &r.mean), ("running_var", &r.var)] {
                let key = format!("{}.{suffix}", r.name);
                let buf = self.buffers.get_mut(&key).ok_or_else(|| config_err!("unknown buffer `{key}`"))?;
                for (run, b) in buf.iter_mut().zip(batch) {
                    *run = (1.0 - BN_MOMENTUM) * *run + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}

/// Registers parameters with seeded initial values.
pub struct Builder<'a> {
    pub params: &'a mut ParamStore,
    pub buffers: &'a mut BufferStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// He-normal initialization over `fan_in`.
    pub fn he(&mut self, name: &str, shape: [usize; 4], fan_in: usize) -> Result<()> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor4::randn(shape, std, self.rng);
        self.params.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: [usize; 4], bound: f64) -> Result<()> {
        let t = Tensor4::uniform(shape, -bound, bound, self.rng);
        self.params.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: [usize; 4], value: f64) -> Result<()> {
        self.params.insert(name, Tensor4::full(shape, value))
    }
}

/// Per-forward binding of parameters onto a graph.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
    buffers: &'a BufferStore,
    bound: HashMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, buffers: &'a BufferStore) -> Self {
        Self { g, params, buffers, bound: HashMap::new() }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.require(name)?;
        let v = self.g.param(name, t);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Leaf for a named parameter, already bound if used before.
    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        if self.g.is_training() {
            self.g.batch_norm(x, gamma, beta, BnStats::Batch { name })
        } else {
            let mean_key = format!("{name}.running_mean");
            let var_key = format!("{name}.running_var");
            let mean = self.buffers.get(&mean_key).ok_or_else(|| config_err!("missing buffer `{mean_key}`"))?;
            let var = self.buffers.get(&var_key).ok_or_else(|| config_err!("missing buffer `{var_key}`"))?;
            self.g.batch_norm(x, gamma, beta, BnStats::Running { mean, var })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub geo: ConvGeometry,
    pub bias: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if groups == 0 || !in_ch.is_multiple_of(groups) || !out_ch.is_multiple_of(groups) {
            return Err(config_err!("{name}: {in_ch}->{out_ch} channels not divisible into {groups} groups"));
        }
        let fan_in = in_ch / groups * kernel * kernel;
        b.he(&format!("{name}.weight"), [out_ch, in_ch / groups, kernel, kernel], fan_in)?;
        if bias {
            b.constant(&format!("{name}.bias"), [1, out_ch, 1, 1], 0.0)?;
        }
        Ok(Self {
            name: name.to_owned(),
            in_ch,
            out_ch,
            kernel,
            geo: ConvGeometry::new(stride, kernel / 2, groups),
            bias,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let y = cx.g.conv2d(x, w, self.geo)?;
        if self.bias {
            let b = cx.param(&format!("{}.bias", self.name))?;
            cx.g.channel_bias(y, b)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, channels: usize) -> Result<Self> {
        b.constant(&format!("{name}.gamma"), [1, channels, 1, 1], 1.0)?;
        b.constant(&format!("{name}.beta"), [1, channels, 1, 1], 0.0)?;
        b.buffers.insert(format!("{name}.running_mean"), vec![0.0; channels])?;
        b.buffers.insert(format!("{name}.running_var"), vec![1.0; channels])?;
        Ok(Self { name: name.to_owned(), channels })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        cx.batch_norm(&self.name, x)
    }
}

/// Convolution, optional batch norm, optional SiLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
    pub act: bool,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        act: bool,
    ) -> Result<Self> {
        let conv = Conv::new(b, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, groups, false)?;
        let norm = Some(BatchNorm::new(b, &format!("{name}.bn"), out_ch)?);
        Ok(Self { conv, norm, act })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(cx, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(cx, y)?;
        }
        if self.act {
            y = cx.g.silu(y);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        b.uniform(&format!("{name}.weight"), [1, 1, din, dout], bound)?;
        b.constant(&format!("{name}.bias"), [1, 1, 1, dout], 0.0)?;
        Ok(Self { name: name.to_owned(), din, dout })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(&format!("{}.weight", self.name))?;
        let b = cx.param(&format!("{}.bias", self.name))?;
        cx.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Result<Self> {
        b.constant(&format!("{name}.gamma"), [1, 1, 1, dim], 1.0)?;
        b.constant(&format!("{name}.beta"), [1, 1, 1, dim], 0.0)?;
        Ok(Self { name: name.to_owned(), dim })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = cx.param(&format!("{}.gamma", self.name))?;
        let beta = cx.param(&format!("{}.beta", self.name))?;
        cx.g.layer_norm(x, gamma, beta)
    }
}
