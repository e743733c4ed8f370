use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{DataKind, RunConfig};
use super::optim::{adamw_step, poly_lr, AdamState, AdamWConfig};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{
    augment, colorize, item_rng, load_dataset, sliding_window_infer, synth_scene, to_batch, Palette, SegSample,
};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, cross_entropy_node, total_loss, LossTerms, IGNORE_INDEX};
use crate::metrics::{iou_report, CodebookSummary, ConfusionMatrix, MetricsReport};
use crate::model::{argmax_labels, build_model, ForwardOptions, SegModel};
use crate::quantizer::UsageCounter;
use crate::substrate::{Graph, Tensor4};

const STREAM_SCENES_TRAIN: u64 = 1;
const STREAM_SCENES_VAL: u64 = 2;
const STREAM_ORDER: u64 = 3;
const STREAM_AUGMENT: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Loads a whole split into memory, normalized and label-checked.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<SegSample>> {
    let c = cfg.model.num_classes;
    let samples = match cfg.data.kind {
        DataKind::Synthetic => {
            let (n, stream, prefix) = match split {
                Split::Train => (cfg.data.train_scenes, STREAM_SCENES_TRAIN, "train"),
                Split::Val => (cfg.data.val_scenes, STREAM_SCENES_VAL, "val"),
            };
            let synth = cfg.data.synth(c);
            (0..n)
                .map(|i| {
                    let mut s = synth_scene(&mut item_rng(cfg.data.seed, stream, i as u64), &synth, &format!("{prefix}{i:05}"))?;
                    cfg.data.normalization.apply(&mut s.image);
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataKind::Directory => {
            let root = cfg.data.root.as_deref().ok_or_else(|| Error::Config("data.root is not set".into()))?;
            let name = match split {
                Split::Train => &cfg.data.train_split,
                Split::Val => &cfg.data.val_split,
            };
            load_dataset(root, name, &cfg.data.normalization)?.collect::<Result<Vec<_>>>()?
        }
    };
    for s in &samples {
        s.validate_labels(c)?;
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub iter: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub losses: Vec<LossPoint>,
    /// `(iteration, metrics)` for every validation pass, the final one last.
    pub snapshots: Vec<(u64, MetricsReport)>,
    pub checkpoint: PathBuf,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn final_metrics(&self) -> &MetricsReport {
        &self.snapshots.last().expect("a run always ends with an evaluation").1
    }
}

pub fn losses_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("iter,lr,ce,vq,total\n");
    for p in points {
        let _ = writeln!(out, "{},{:e},{},{},{}", p.iter, p.lr, p.terms.ce, p.terms.vq, p.terms.total);
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct EvalOptions<'a> {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub bypass_vq: bool,
    /// Score the ground truth against itself instead of the model output.
    pub gt_as_prediction: bool,
    /// Write a colorized prediction `<id>.png` per image here.
    pub emit_png: Option<&'a Path>,
}

impl<'a> EvalOptions<'a> {
    pub fn from_config(cfg: &RunConfig, bypass_vq: bool) -> Self {
        Self { window: cfg.eval_window(), stride: cfg.eval_stride(), bypass_vq, gt_as_prediction: false, emit_png: None }
    }
}

/// Sliding-window evaluation over `samples` in eval mode.
pub fn evaluate_model(model: &SegModel, samples: &[SegSample], names: &[String], opts: &EvalOptions<'_>) -> Result<MetricsReport> {
    let c = model.config.num_classes;
    let k = model.config.vq.num_codes;
    let beta = model.config.vq.beta;
    let palette = Palette::default();
    let mut cm = ConfusionMatrix::new(c);
    let mut usage = UsageCounter::new(k);
    let (mut ce_sum, mut vq_sum, mut windows) = (0.0, 0.0, 0usize);
    if let Some(dir) = opts.emit_png {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let (x, labels) = to_batch(&[s])?;
        let logits = sliding_window_infer(&x, opts.window, opts.stride, |win: &Tensor4| {
            let mut g = Graph::eval();
            let out = model.forward(&mut g, win, ForwardOptions { bypass_vq: opts.bypass_vq, ..Default::default() })?;
            if let Some(q) = out.quantization() {
                usage.add(&q.indices);
                vq_sum += q.vq_loss(beta);
            }
            windows += 1;
            Ok(g.value(out.logits).clone())
        })?;
        ce_sum += cross_entropy(&logits, &labels, IGNORE_INDEX)?;
        let pred = if opts.gt_as_prediction { labels.clone() } else { argmax_labels(&logits).remove(0) };
        cm.accumulate(&pred, &labels, s.width, IGNORE_INDEX)?;
        if let Some(dir) = opts.emit_png {
            let path = dir.join(format!("{}.png", s.id));
            colorize(&pred, s.height, s.width, &palette)
                .save(&path)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let ce = ce_sum / samples.len() as f64;
    let vq = if opts.bypass_vq { None } else { Some(&usage) };
    let loss = LossTerms { ce, vq: vq.map_or(0.0, |_| vq_sum / windows as f64), total: 0.0 };
    let loss = LossTerms { total: loss.ce + loss.vq, ..loss };
    let codebook = vq.map(|u| CodebookSummary::from(&u.stats()));
    Ok(MetricsReport::new(&iou_report(&cm)?, names, codebook, loss))
}

/// Output locations inside a run directory.
pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn final_checkpoint(run_dir: &Path) -> PathBuf {
    checkpoint_dir(run_dir).join("final.ckpt")
}

/// Trains from scratch as configured, evaluating on the validation split at
/// the configured interval and at the end. Writes `losses.csv`,
/// `metrics.json`, the resolved `config.toml` and checkpoints under
/// `run_dir`.
pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let t = &cfg.train;
    let run_dir = &t.run_dir;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_file(&run_dir.join("config.toml"), &cfg.to_toml()?)?;

    let train_set = load_split(cfg, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let val_set = load_split(cfg, Split::Val)?;
    let names = cfg.class_names();
    let eval_opts = EvalOptions::from_config(cfg, t.no_vq);
    let mut model = build_model(&cfg.model, t.seed)?;
    let counts = model.param_counts();
    log::info!(
        "model: {} parameters (encoder {}, decoder {}, codebook {}); {} train / {} val samples",
        counts.total,
        counts.encoder,
        counts.decoder,
        counts.codebook,
        train_set.len(),
        val_set.len()
    );

    let adam = AdamWConfig { betas: t.betas, eps: t.eps, weight_decay: t.weight_decay };
    let mut state = AdamState::new();
    let mut losses = Vec::with_capacity(t.max_iters as usize);
    let mut snapshots = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut drawn = 0u64;
    let beta = cfg.model.vq.beta;

    for it in 0..t.max_iters {
        let lr = poly_lr(it, t.lr0, t.max_iters, t.poly_power);
        let mut batch = Vec::with_capacity(t.batch_size);
        while batch.len() < t.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut item_rng(t.seed, STREAM_ORDER, epoch));
                epoch += 1;
                cursor = 0;
            }
            let mut rng = item_rng(t.seed ^ cfg.augment.seed, STREAM_AUGMENT, drawn);
            batch.push(augment(&train_set[order[cursor]], &cfg.augment, &mut rng));
            cursor += 1;
            drawn += 1;
        }
        let refs: Vec<&SegSample> = batch.iter().collect();
        let (x, labels) = to_batch(&refs)?;

        let mut g = Graph::training();
        let out = model.forward(&mut g, &x, ForwardOptions { bypass_vq: t.no_vq, ..Default::default() })?;
        let ce = cross_entropy_node(&mut g, out.logits, &labels, IGNORE_INDEX)?;
        let root = match &out.vq {
            Some(v) => g.add(ce, v.loss)?,
            None => ce,
        };
        let terms = total_loss(g.scalar(ce), out.quantization(), beta);
        if !terms.total.is_finite() {
            let kept = last_good.as_ref().map_or("none written yet".to_owned(), |p| p.display().to_string());
            return Err(Error::Numerical(format!(
                "loss became non-finite at iteration {it} (ce {}, vq {}); last good checkpoint: {kept}",
                terms.ce, terms.vq
            )));
        }
        g.backward(root)?;
        let grads: HashMap<String, Vec<f64>> =
            g.param_grads().filter_map(|(n, gr)| gr.map(|gr| (n.to_owned(), gr.to_vec()))).collect();
        adamw_step(&mut model.params, &grads, &mut state, lr, &adam)?;
        model.buffers.apply_batch_stats(g.batch_stats())?;
        losses.push(LossPoint { iter: it, lr, terms });

        let done = it + 1;
        if t.log_interval > 0 && (done % t.log_interval == 0 || done == 1) {
            log::info!("iter {done}/{}: lr {lr:.3e} ce {:.4} vq {:.4} total {:.4}", t.max_iters, terms.ce, terms.vq, terms.total);
        }
        if t.checkpoint_interval > 0 && done % t.checkpoint_interval == 0 && done < t.max_iters {
            let path = checkpoint_dir(run_dir).join(format!("iter_{done:07}.ckpt"));
            save_checkpoint(&path, &model, t.seed, done, t.no_vq)?;
            last_good = Some(path);
        }
        if t.eval_interval > 0 && done % t.eval_interval == 0 && done < t.max_iters && !val_set.is_empty() {
            let m = evaluate_model(&model, &val_set, &names, &eval_opts)?;
            match m.codebook {
                Some(cb) => log::info!(
                    "iter {done}: val mIoU {:.4}, codebook usage {:.3}, perplexity {:.2}",
                    m.miou,
                    cb.usage,
                    cb.perplexity
                ),
                None => log::info!("iter {done}: val mIoU {:.4}", m.miou),
            }
            snapshots.push((done, m));
        }
    }

    let checkpoint = final_checkpoint(run_dir);
    save_checkpoint(&checkpoint, &model, t.seed, t.max_iters, t.no_vq)?;
    write_file(&run_dir.join("losses.csv"), &losses_csv(&losses))?;
    let eval_on = if val_set.is_empty() { &train_set } else { &val_set };
    let metrics = evaluate_model(&model, eval_on, &names, &eval_opts)?;
    write_file(&run_dir.join("metrics.json"), &metrics.to_json()?)?;
    log::info!(
        "finished {} iterations: val mIoU {:.4}, codebook {:?}",
        t.max_iters,
        metrics.miou,
        metrics.codebook
    );
    snapshots.push((t.max_iters, metrics));
    Ok(RunReport { losses, snapshots, checkpoint, wall_clock_secs: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateOptions {
    pub split: Option<Split>,
    pub emit_png: Option<PathBuf>,
    pub gt_as_prediction: bool,
}

/// Evaluates a checkpoint on the validation split (by default) and writes
/// `metrics.json` into the run directory.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, opts: &EvaluateOptions) -> Result<MetricsReport> {
    cfg.validate()?;
    let ck = Checkpoint::read(checkpoint)?;
    let bypass = ck.manifest.bypass_vq;
    let model = ck.into_model(&cfg.model)?;
    let samples = load_split(cfg, opts.split.unwrap_or(Split::Val))?;
    let eval = EvalOptions {
        gt_as_prediction: opts.gt_as_prediction,
        emit_png: opts.emit_png.as_deref(),
        ..EvalOptions::from_config(cfg, bypass)
    };
    let metrics = evaluate_model(&model, &samples, &cfg.class_names(), &eval)?;
    write_file(&cfg.train.run_dir.join("metrics.json"), &metrics.to_json()?)?;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub num_codes: usize,
    pub seed: u64,
    pub miou: f64,
    pub usage: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub num_codes: usize,
    pub mean_miou: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_miou: f64,
    pub min_usage: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("K,seed,mIoU,usage,perplexity\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.num_codes, r.seed, r.miou, r.usage, r.perplexity);
    }
    out
}

/// Per-size mean/std over seeds, in first-seen size order.
pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        if !sizes.contains(&r.num_codes) {
            sizes.push(r.num_codes);
        }
    }
    sizes
        .into_iter()
        .map(|k| {
            let v: Vec<&AblationRow> = rows.iter().filter(|r| r.num_codes == k).collect();
            let n = v.len() as f64;
            let mean = v.iter().map(|r| r.miou).sum::<f64>() / n;
            let var = if v.len() > 1 { v.iter().map(|r| (r.miou - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let min_usage = v.iter().map(|r| r.usage).fold(f64::INFINITY, f64::min);
            AblationSummary { num_codes: k, mean_miou: mean, std_miou: var.sqrt(), min_usage }
        })
        .collect()
}

/// One full train + evaluate per `(size, seed)`, each in
/// `run_dir/ablation/K<k>_seed<s>/`; writes `run_dir/ablation.csv`.
pub fn ablate_codebook(cfg: &RunConfig, sizes: &[usize], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("ablation needs at least one codebook size".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if cfg.train.no_vq {
        return Err(Error::Config("codebook ablation cannot run with no_vq".into()));
    }
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &k in sizes {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.model.vq.num_codes = k;
            c.train.seed = seed;
            c.train.run_dir = cfg.train.run_dir.join("ablation").join(format!("K{k}_seed{seed}"));
            log::info!("ablation: K = {k}, seed {seed}");
            let report = train(&c)?;
            let m = report.final_metrics();
            let cb = m.codebook.ok_or_else(|| Error::Data("ablation run reported no codebook statistics".into()))?;
            rows.push(AblationRow { num_codes: k, seed, miou: m.miou, usage: cb.usage, perplexity: cb.perplexity });
            write_file(&cfg.train.run_dir.join("ablation.csv"), &ablation_csv(&rows))?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::toy(4);
        cfg.data.size = (32, 32);
        cfg.data.train_scenes = 6;
        cfg.data.val_scenes = 2;
        cfg.augment.crop = (32, 32);
        cfg.train.max_iters = 3;
        cfg.train.batch_size = 2;
        cfg.train.checkpoint_interval = 2;
        cfg.train.eval_interval = 2;
        cfg.train.run_dir = dir.to_owned();
        cfg
    }

    #[test]
    fn short_run_writes_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let report = train(&cfg).unwrap();
        assert_eq!(report.losses.len(), 3);
        assert_eq!(report.losses[0].lr, cfg.train.lr0);
        assert_eq!(report.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), [2, 3]);
        for f in ["losses.csv", "metrics.json", "config.toml", "checkpoints/final.ckpt", "checkpoints/iter_0000002.ckpt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(report.final_metrics().codebook.is_some());
    }

    #[test]
    fn gt_injection_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        cfg.train.max_iters = 1;
        let report = train(&cfg).unwrap();
        let opts = EvaluateOptions { gt_as_prediction: true, ..Default::default() };
        let m = evaluate(&cfg, &report.checkpoint, &opts).unwrap();
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn summary_statistics() {
        let row = |k, seed, miou| AblationRow { num_codes: k, seed, miou, usage: 1.0, perplexity: 3.0 };
        let s = summarize_ablation(&[row(19, 0, 0.5), row(19, 1, 0.7), row(95, 0, 0.6)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_miou - 0.6).abs() < 1e-12);
        assert!((s[0].std_miou - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[1].std_miou, 0.0);
        assert!(ablation_csv(&[row(19, 0, 0.5)]).starts_with("K,seed,mIoU,usage,perplexity\n19,0,0.5,1,3"));
    }
}
