use std::path::Path;

use vqseg::checkpoint::{Checkpoint, MAGIC};
use vqseg::metrics::MetricsReport;
use vqseg::trainer::{evaluate, train, EvaluateOptions, RunConfig};

fn tiny(dir: &Path, no_vq: bool) -> RunConfig {
    let toml = format!(
        r#"
[model]
num_classes = 4
[train]
max_iters = 4
batch_size = 2
checkpoint_interval = 2
eval_interval = 0
no_vq = {no_vq}
run_dir = "{}"
[augment]
crop = [32, 32]
[data]
train_scenes = 6
val_scenes = 2
size = [32, 48]
"#,
        dir.display()
    );
    RunConfig::from_toml(&toml).unwrap()
}

#[test]
fn runs_are_deterministic_and_evaluation_reproduces_final_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&tiny(a.path(), false)).unwrap();
    let rb = train(&tiny(b.path(), false)).unwrap();
    let bits = |r: &vqseg::trainer::RunReport| r.losses.iter().map(|p| p.terms.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ra), bits(&rb));
    assert_eq!(
        std::fs::read(a.path().join("checkpoints/final.ckpt")).unwrap()[..],
        std::fs::read(b.path().join("checkpoints/final.ckpt")).unwrap()[..]
    );

    let cfg = tiny(a.path(), false);
    let m = evaluate(&cfg, &ra.checkpoint, &EvaluateOptions::default()).unwrap();
    assert_eq!(&m, ra.final_metrics());
    let json: MetricsReport = serde_json::from_str(&std::fs::read_to_string(a.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(json, m);
}

#[test]
fn checkpoint_records_run_and_rejects_other_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), true);
    let report = train(&cfg).unwrap();
    let bytes = std::fs::read(&report.checkpoint).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    let ck = Checkpoint::read(&report.checkpoint).unwrap();
    assert_eq!((ck.manifest.iteration, ck.manifest.bypass_vq), (4, true));
    assert!(report.final_metrics().codebook.is_none());
    assert!(dir.path().join("checkpoints/iter_0000002.ckpt").is_file());

    let mut other = cfg.clone();
    other.model.bottleneck_dim = 8;
    other.model.vq.dim = 8;
    let err = evaluate(&other, &report.checkpoint, &EvaluateOptions::default()).unwrap_err().to_string();
    assert!(err.contains("bottleneck_dim: checkpoint 16, config 8"), "{err}");
}

#[test]
fn evaluation_can_write_colorized_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), false);
    let report = train(&RunConfig { train: vqseg::trainer::TrainConfig { max_iters: 1, ..cfg.train.clone() }, ..cfg.clone() }).unwrap();
    let out = dir.path().join("png");
    let opts = EvaluateOptions { emit_png: Some(out.clone()), ..Default::default() };
    evaluate(&cfg, &report.checkpoint, &opts).unwrap();
    let pngs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert!(pngs >= 2, "{pngs}");
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["toy.toml", "cityscapes.toml"] {
        let cfg = RunConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let full = RunConfig::load(&root.join("cityscapes.toml")).unwrap();
    let model = vqseg::model::build_model(&full.model, 0).unwrap();
    let counts = model.param_counts();
    println!("full-scale profile: {} parameters (encoder {}, decoder {})", counts.total, counts.encoder, counts.decoder);
}
