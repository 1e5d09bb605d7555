use css_core::build_network;
use css_core::harness::checkpoint::load_checkpoint;
use css_core::harness::data::{load_dataset, Dataset, Loader};
use css_core::harness::metrics::{read_metrics_csv, read_steps_csv};
use css_core::harness::{
    evaluate, evaluate_networks, train, AblationFlags, ExperimentConfig, Split, Trainer,
};
use css_core::nn::Mode;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn smoke(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig::synthetic_smoke(dir.join("run"))
}

#[test]
fn one_epoch_produces_metrics_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let out = train(&cfg).unwrap();
    let rows = read_metrics_csv(&out.run_dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0], out.final_record().row());
    for f in [
        "checkpoint/manifest.toml",
        "checkpoint/net1.params",
        "checkpoint/net2.params",
        "diversity.csv",
        "steps.csv",
        "config.toml",
        "diversity.png",
        "accuracy.png",
        "features.png",
    ] {
        assert!(out.run_dir.join(f).is_file(), "{f} missing");
    }
    let saved = ExperimentConfig::load(&out.run_dir.join("config.toml"), &[]).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn identical_seeds_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = smoke(dir.path());
    a.epochs = 2;
    a.augment = true;
    let mut b = a.clone();
    a.out_dir = dir.path().join("a");
    b.out_dir = dir.path().join("b");
    train(&a).unwrap();
    train(&b).unwrap();
    for f in ["metrics.csv", "diversity.csv", "steps.csv"] {
        let x = std::fs::read(a.out_dir.join(f)).unwrap();
        let y = std::fs::read(b.out_dir.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let mut c = a.clone();
    c.seed = 1;
    c.out_dir = dir.path().join("c");
    train(&c).unwrap();
    assert_ne!(
        std::fs::read(a.out_dir.join("steps.csv")).unwrap(),
        std::fs::read(c.out_dir.join("steps.csv")).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_reproduces_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let out = train(&cfg).unwrap();
    let restored = evaluate(&out.run_dir.join("checkpoint"), Split::Test, None).unwrap();
    assert_eq!(&restored.record, out.final_record());
    let ckpt = load_checkpoint(&out.run_dir.join("checkpoint")).unwrap();
    assert_eq!(ckpt.manifest.spec, cfg.model_spec());
    assert_eq!(ckpt.manifest.metrics, out.final_record().row());
}

#[test]
fn checkpoint_rejects_a_dataset_with_other_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&smoke(dir.path())).unwrap();
    let ckpt = out.run_dir.join("checkpoint");
    let manifest = ckpt.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap();
    // Point the recorded config at a 5-class synthetic set.
    let patched = text.replace(
        "[config.model]\ndepth = 8\nsplit_depth = 1\nbranches = 2\nclasses = 4",
        "[config.model]\ndepth = 8\nsplit_depth = 1\nbranches = 2\nclasses = 5",
    );
    assert_ne!(patched, text, "manifest layout changed");
    std::fs::write(&manifest, patched).unwrap();
    assert!(evaluate(&ckpt, Split::Test, None).is_err());
}

fn steps_of(cfg: &ExperimentConfig) -> Vec<css_core::harness::StepRecord> {
    train(cfg).unwrap();
    read_steps_csv(&cfg.out_dir.join("steps.csv")).unwrap()
}

#[test]
fn network_diversity_off_logs_zero_kd() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.ablation.network_diversity = false;
    let steps = steps_of(&cfg);
    assert!(steps.iter().all(|s| s.kd == 0.0 && s.ce2.is_none()));
    let rows = read_metrics_csv(&cfg.out_dir.join("metrics.csv")).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.kd == 0.0 && r.dual_ensemble.is_none() && r.net2_agg.is_none()));
}

#[test]
fn dynamic_weights_off_logs_fixed_alpha() {
    let dir = tempfile::tempdir().unwrap();
    for nd in [true, false] {
        let mut cfg = smoke(dir.path());
        cfg.out_dir = dir.path().join(format!("nd{nd}"));
        cfg.ablation.dynamic_weights = false;
        cfg.ablation.network_diversity = nd;
        cfg.distill.fixed_alpha = 0.7;
        let steps = steps_of(&cfg);
        assert!(steps.iter().all(|s| s.alpha1 == Some(0.7)));
    }
    // Dynamic weights do move with the losses.
    let mut cfg = smoke(dir.path());
    cfg.out_dir = dir.path().join("dynamic");
    let steps = steps_of(&cfg);
    assert!(steps.windows(2).any(|w| w[0].alpha1 != w[1].alpha1));
}

#[test]
fn sample_diversity_off_gives_identical_branch_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.ablation.sample_diversity = false;
    let splits = load_dataset(&cfg).unwrap();
    let mut net = build_network(&cfg.model_spec(), 0).unwrap();
    let (x, _) = splits.test.batch(&[0, 1, 2]);
    let f = net.stem_forward(&x, Mode::Eval).unwrap();
    let inputs = net.branch_inputs(&f).unwrap();
    assert!(inputs.iter().all(|i| *i == f));
    // Perturbing any location changes every branch.
    let mut g = f.clone();
    g[[0, 0, 0, 0]] += 10.0;
    let (a, b) = (
        net.branches_forward(&f, Mode::Eval).unwrap(),
        net.branches_forward(&g, Mode::Eval).unwrap(),
    );
    for (la, lb) in a.branch_logits.iter().zip(&b.branch_logits) {
        assert_ne!(la.values(), lb.values());
    }
}

#[test]
fn target_diversity_off_uses_plain_heads() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.ablation = AblationFlags::preset("A").unwrap();
    let spec = cfg.model_spec();
    assert_eq!(spec.head_outputs(), cfg.model.classes);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let splits = load_dataset(&cfg).unwrap();
    let batch = Loader::new(8, false, 0)
        .epoch(&splits.train)
        .next()
        .unwrap();
    let rec = trainer.train_step(&batch, 0, 0.01).unwrap();
    assert!(rec.ce1.is_finite());
    let labels = css_core::harness::eval::branch_labels(&spec, 1, &batch.labels).unwrap();
    for (l, &y) in labels.iter().zip(&batch.labels) {
        assert_eq!((l.joint_index, l.transform_id), (y, 0));
    }
}

#[test]
fn untrained_ten_class_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke(dir.path());
    cfg.model.classes = 10;
    cfg.synthetic.train_size = 100;
    cfg.synthetic.test_size = 10_000;
    let splits = load_dataset(&cfg).unwrap();
    // Random weights can still align with blob structure; permuting the
    // labels removes any image-label signal.
    let test = &splits.test;
    let mut labels = test.labels().to_vec();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let images: Vec<f32> = (0..test.len())
        .flat_map(|i| test.image(i).to_vec())
        .collect();
    let test = Dataset::new(images, labels, test.shape(), test.classes()).unwrap();
    let spec = cfg.model_spec();
    let mut n1 = build_network(&spec, 11).unwrap();
    let mut n2 = build_network(&spec, 12).unwrap();
    let ev = evaluate_networks(&mut n1, Some(&mut n2), &test, &cfg.distillation(), 500, 0).unwrap();
    for acc in ev.record.accuracies() {
        assert!((acc - 0.1).abs() <= 0.03, "{acc}: {}", ev.record);
    }
}
