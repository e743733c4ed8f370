//! Fast oracle and gradient checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{fold, unfold};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::Result;
use crate::metrics::{iou_report, ConfusionMatrix};
use crate::model::{build_model, finite_difference_check, ModelConfig};
use crate::quantizer::{
    codebook_grad, commitment_grad, nearest_code, quantize_field, quantize_with_assignment, usage_stats, Codebook,
    LatentField,
};
use crate::substrate::Tensor4;
use crate::trainer::{adamw_step, poly_lr, AdamState, AdamWConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

fn random_codebook(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Result<Codebook> {
    Codebook::from_rows(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn nearest_code_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (k, d) = (rng.random_range(1..=64), rng.random_range(1..=16));
        let cb = random_codebook(&mut rng, k, d)?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dist = |j: usize| -> f64 { x.iter().zip(cb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
        let brute = (0..k).fold(0, |best, j| if dist(j) < dist(best) { j } else { best });
        mismatches += usize::from(nearest_code(&x, &cb)? != brute);
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches in 200 instances")))
}

fn vq_gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (k, d) = (6, 3);
    let cb = random_codebook(&mut rng, k, d)?;
    let x = LatentField::new(1, 2, 2, d, (0..4 * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let r = quantize_field(&x, &cb)?;
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let gx = commitment_grad(&x, &r, 1.0);
    for i in 0..x.data.len() {
        let mut p = x.clone();
        p.data[i] += eps;
        let mut m = x.clone();
        m.data[i] -= eps;
        let num = (quantize_with_assignment(&p, &cb, r.indices.clone())?.commitment_loss
            - quantize_with_assignment(&m, &cb, r.indices.clone())?.commitment_loss)
            / (2.0 * eps);
        worst = worst.max((gx.data[i] - num).abs() / num.abs().max(1e-8));
    }
    let gc = codebook_grad(&x, &r, &cb);
    for i in 0..cb.vectors().len() {
        let shift = |delta: f64| -> Result<f64> {
            let mut v = cb.vectors().to_vec();
            v[i] += delta;
            Ok(quantize_with_assignment(&x, &Codebook::from_rows(k, d, v)?, r.indices.clone())?.codebook_loss)
        };
        let num = (shift(eps)? - shift(-eps)?) / (2.0 * eps);
        if !r.indices.contains(&(i / d)) && gc[i] != 0.0 {
            return Ok((false, format!("unselected codebook row {} has gradient {}", i / d, gc[i])));
        }
        worst = worst.max((gc[i] - num).abs() / num.abs().max(1e-8));
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn fold_round_trip() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let (ph, pw) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let shape = [rng.random_range(1..=2), rng.random_range(1..=4), ph * rng.random_range(1..=4), pw * rng.random_range(1..=4)];
        let x = Tensor4::randn(shape, 1.0, &mut rng);
        if fold(&unfold(&x, ph, pw)?)? != x {
            return Ok((false, format!("round trip changed a {shape:?} tensor")));
        }
    }
    Ok((true, "50 shapes bit-exact".into()))
}

fn iou_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(2..6usize);
        let gt: Vec<u8> = (0..48).map(|_| rng.random_range(0..c as u8)).collect();
        let pred: Vec<u8> = (0..48).map(|_| rng.random_range(0..c as u8)).collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &gt, 8, 255)?;
        let r = iou_report(&cm)?;
        let mut defined = Vec::new();
        for k in 0..c as u8 {
            let inter = gt.iter().zip(&pred).filter(|&(&g, &p)| g == k && p == k).count();
            let union = gt.iter().zip(&pred).filter(|&(&g, &p)| g == k || p == k).count();
            if union > 0 {
                let iou = inter as f64 / union as f64;
                worst = worst.max((r.per_class[k as usize].unwrap_or(f64::NAN) - iou).abs());
                defined.push(iou);
            }
        }
        worst = worst.max((r.miou - defined.iter().sum::<f64>() / defined.len() as f64).abs());
    }
    let uniform = usage_stats(&(0..19).collect::<Vec<_>>(), 19).perplexity;
    let collapsed = usage_stats(&[3; 40], 19).perplexity;
    let ok = worst < 1e-12 && uniform == 19.0 && collapsed == 1.0;
    Ok((ok, format!("max deviation {worst:.1e}; perplexity uniform {uniform}, collapsed {collapsed}")))
}

fn schedule_and_optimizer() -> Result<(bool, String)> {
    let lr_ok = poly_lr(0, 0.01, 100, 1.0) == 0.01 && poly_lr(100, 0.01, 100, 1.0) == 0.0 && poly_lr(50, 0.01, 100, 1.0) == 0.005;
    let mut ps = crate::substrate::ParamStore::new();
    ps.insert("w", Tensor4::from_vec([1, 1, 1, 2], vec![1.0, -3.0])?)?;
    let grads = std::collections::HashMap::from([("w".to_owned(), vec![0.0, 0.0])]);
    let mut st = AdamState::new();
    adamw_step(&mut ps, &grads, &mut st, 0.5, &AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() })?;
    let fixed = ps.get("w").map(|t| t.data() == [1.0, -3.0]).unwrap_or(false);
    adamw_step(&mut ps, &grads, &mut st, 0.5, &AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() })?;
    let decayed = ps.get("w").map(|t| t.data() == [0.75, -2.25]).unwrap_or(false);
    Ok((lr_ok && fixed && decayed, format!("poly_lr {lr_ok}, zero-grad fixed point {fixed}, decay factor {decayed}")))
}

fn model_gradients() -> Result<(bool, String)> {
    let model = build_model(&ModelConfig::toy(4), 15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Tensor4::randn([1, 3, 16, 16], 1.0, &mut rng);
    let labels: Vec<u8> = (0..256).map(|_| rng.random_range(0..4)).collect();
    let names: Vec<String> = model.params.names().map(str::to_owned).collect();
    let probes: Vec<(String, usize)> = (0..10)
        .map(|_| {
            let n = names[rng.random_range(0..names.len())].clone();
            let len = model.params.get(&n).map_or(1, Tensor4::numel);
            (n, rng.random_range(0..len))
        })
        .collect();
    let err = finite_difference_check(&model, &x, &labels, &probes, 1e-5, 1e-8)?;
    Ok((err < 1e-3, format!("max relative error {err:.2e} over {} probes", probes.len())))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let model = build_model(&ModelConfig::toy(4), 17)?;
    let path = std::env::temp_dir().join(format!("vqseg-selftest-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &model, 17, 0, false)?;
    let loaded = Checkpoint::read(&path)?.into_model(&model.config);
    let _ = std::fs::remove_file(&path);
    let loaded = loaded?;
    let x = Tensor4::randn([1, 3, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(18));
    let (a, _) = model.infer(&x, false)?;
    let (b, _) = loaded.infer(&x, false)?;
    let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    Ok((same, if same { "bit-identical eval logits".into() } else { "logits differ after reload".into() }))
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("nearest code vs brute force", nearest_code_oracle),
        check("VQ loss gradients", vq_gradients),
        check("fold/unfold round trip", fold_round_trip),
        check("IoU and perplexity oracles", iou_oracle),
        check("schedule and optimizer values", schedule_and_optimizer),
        check("full-model gradients", model_gradients),
        check("checkpoint round trip", checkpoint_round_trip),
    ]
}
