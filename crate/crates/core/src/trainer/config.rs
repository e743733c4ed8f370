use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, Normalization, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    /// Train and evaluate without the quantizer.
    pub no_vq: bool,
    /// Everything a run writes lands under this directory.
    pub run_dir: PathBuf,
    /// Validation snapshot every N iterations; 0 evaluates only at the end.
    pub eval_interval: u64,
    /// Checkpoint every N iterations; 0 checkpoints only at the end.
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    /// Sliding-window size for evaluation; defaults to the training crop.
    pub eval_window: Option<(usize, usize)>,
    /// Defaults to the window size (non-overlapping tiles).
    pub eval_stride: Option<(usize, usize)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-3,
            max_iters: 2000,
            batch_size: 8,
            poly_power: 1.0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            no_vq: false,
            run_dir: PathBuf::from("runs/default"),
            eval_interval: 0,
            checkpoint_interval: 500,
            log_interval: 100,
            eval_window: None,
            eval_stride: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return bad(format!("poly_power must be positive, got {}", self.poly_power));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Generated road scenes, rebuilt deterministically from `seed`.
    Synthetic,
    /// `root/<split>/{images,labels}/<id>.png`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub val_split: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Scene `(height, width)`.
    pub size: (usize, usize),
    pub noise: f64,
    /// Dataset seed, independent of the training seed so that every run
    /// sees the same scenes.
    pub seed: u64,
    /// Per-class names for reports; empty picks defaults.
    pub class_names: Vec<String>,
    pub normalization: Normalization,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            kind: DataKind::Synthetic,
            root: None,
            train_split: "train".into(),
            val_split: "val".into(),
            train_scenes: 500,
            val_scenes: 100,
            size: synth.size,
            noise: synth.noise,
            seed: 1234,
            class_names: Vec::new(),
            normalization: Normalization::default(),
        }
    }
}

impl DataConfig {
    pub fn synth(&self, num_classes: usize) -> SynthConfig {
        SynthConfig { size: self.size, num_classes, noise: self.noise }
    }
}

/// Everything a run needs, as read from one TOML file with `[model]`,
/// `[train]`, `[augment]` and `[data]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(8),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A relative `run_dir` or data
    /// `root` is taken relative to the working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Toml(t) => Error::Config(format!("{}: {t}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn eval_window(&self) -> (usize, usize) {
        self.train.eval_window.unwrap_or(self.augment.crop)
    }

    pub fn eval_stride(&self) -> (usize, usize) {
        self.train.eval_stride.unwrap_or_else(|| self.eval_window())
    }

    pub fn class_names(&self) -> Vec<String> {
        let c = self.model.num_classes;
        if !self.data.class_names.is_empty() {
            return self.data.class_names.clone();
        }
        match self.data.kind {
            DataKind::Synthetic => self.data.synth(c).class_names(),
            DataKind::Directory => (0..c).map(|k| format!("class{k}")).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.data.normalization.validate()?;
        let (mh, mw) = self.model.required_multiple();
        let (ch, cw) = self.augment.crop;
        if ch % mh != 0 || cw % mw != 0 {
            return Err(Error::Config(format!(
                "augment.crop {ch}x{cw} must be a multiple of the model's required input multiple {mh}x{mw}"
            )));
        }
        let (wh, ww) = self.eval_window();
        if wh % mh != 0 || ww % mw != 0 {
            return Err(Error::Config(format!(
                "eval window {wh}x{ww} must be a multiple of the model's required input multiple {mh}x{mw}"
            )));
        }
        let (sh, sw) = self.eval_stride();
        if sh == 0 || sw == 0 || sh > wh || sw > ww {
            return Err(Error::Config(format!("eval stride {sh}x{sw} must be positive and at most the window {wh}x{ww}")));
        }
        if !self.data.class_names.is_empty() && self.data.class_names.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "data.class_names has {} entries but model.num_classes is {}",
                self.data.class_names.len(),
                self.model.num_classes
            )));
        }
        match self.data.kind {
            DataKind::Synthetic => {
                self.data.synth(self.model.num_classes).validate()?;
                if self.data.train_scenes == 0 {
                    return Err(Error::Config("data.train_scenes must be at least 1".into()));
                }
            }
            DataKind::Directory => {
                if self.data.root.is_none() {
                    return Err(Error::Config("data.root is required when data.kind = \"directory\"".into()));
                }
            }
        }
        Ok(())
    }
}
