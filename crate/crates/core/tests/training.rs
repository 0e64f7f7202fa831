use prcl_core::ablate::run_ablation;
use prcl_core::checkpoint::Checkpoint;
use prcl_core::datagen::{self, DatasetSpec};
use prcl_core::train::{eval_checkpoint, load_or_generate, run_training, train_to_dir, Trainer, METRICS_HEADER};
use prcl_core::{PrclError, RunConfig, Strategy};

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.num_scenes = 40;
    cfg.data.labeled_fraction = 0.25;
    cfg.total_iters = 120;
    cfg.eval_every = 40;
    cfg.metric_pixels = 200;
    cfg.set("seed", &seed.to_string()).unwrap();
    cfg
}

#[test]
fn same_seed_same_metrics() {
    let a = run_training(&small(3)).unwrap();
    let b = run_training(&small(3)).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.rows.len(), 3);
    assert!(a.metrics_csv().starts_with(METRICS_HEADER));
    let c = run_training(&small(4)).unwrap();
    assert_ne!(a.metrics_csv(), c.metrics_csv());
}

#[test]
fn eval_reproduces_last_training_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(5);
    let data = datagen::generate(&cfg.data).unwrap();
    let path = dir.path().join("data.bin");
    datagen::export_scenes(&cfg.data, &data.all_scenes(), &path).unwrap();
    cfg.dataset_path = Some(path.clone());
    cfg.output_dir = dir.path().join("run");
    let out = train_to_dir(&cfg).unwrap();
    let ck = Checkpoint::load(&cfg.output_dir.join("checkpoint.bin")).unwrap();
    let csv = eval_checkpoint(&ck, &path, cfg.holdout_fraction, cfg.metric_pixels).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let last = out.metrics_csv().lines().last().unwrap().to_string();
    let cols: Vec<&str> = last.split(',').collect();
    assert_eq!(row, format!("{},{},{},{}", cols[0], cols[5], cols[6], cols[7]));
    assert_eq!(csv, eval_checkpoint(&ck, &path, cfg.holdout_fraction, cfg.metric_pixels).unwrap());
    // the generated and the imported dataset train identically
    let mut gen_cfg = cfg.clone();
    gen_cfg.dataset_path = None;
    assert_eq!(run_training(&gen_cfg).unwrap().metrics_csv(), out.metrics_csv());
}

#[test]
fn eval_refuses_mismatched_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(1);
    cfg.total_iters = 10;
    cfg.eval_every = 10;
    let ck = run_training(&cfg).unwrap().checkpoint;
    let spec = DatasetSpec { num_classes: 8, num_scenes: 20, ..DatasetSpec::default() };
    let path = dir.path().join("c8.bin");
    datagen::export_scenes(&spec, &datagen::generate(&spec).unwrap().all_scenes(), &path).unwrap();
    match eval_checkpoint(&ck, &path, 0.2, 100) {
        Err(e @ PrclError::Incompatible(_)) => assert!(e.to_string().contains("C=6") && e.to_string().contains("C=8")),
        other => panic!("expected refusal, got {other:?}"),
    }
}

#[test]
fn single_cell_ablation_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(0);
    cfg.ablate_rows = vec![Strategy::PR_GDP_VN];
    cfg.ablate_seeds = vec![7];
    let report = run_ablation(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.runs.len(), 1);
    let mut train_cfg = cfg.clone();
    train_cfg.set("seed", "7").unwrap();
    let direct = run_training(&train_cfg).unwrap();
    let sub = std::fs::read_to_string(dir.path().join("pr_gdp_vn_seed7/metrics.csv")).unwrap();
    assert_eq!(sub, direct.metrics_csv());
}

#[test]
fn summary_has_one_line_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(0);
    cfg.total_iters = 20;
    cfg.eval_every = 20;
    cfg.ablate_rows = vec![Strategy::BASELINE, Strategy::PR_GDP_MB];
    cfg.ablate_seeds = vec![1, 2];
    run_ablation(&cfg, Some(dir.path())).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    let aggregate = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 1 + 2);
    for name in ["baseline_seed1", "baseline_seed2", "pr_gdp_mb_seed1", "pr_gdp_mb_seed2"] {
        assert!(dir.path().join(name).join("metrics.csv").exists(), "{name}");
    }
}

#[test]
fn failed_sub_runs_are_recorded() {
    let mut cfg = small(0);
    cfg.total_iters = 30;
    cfg.eval_every = 30;
    cfg.grad_clip = 0.0;
    cfg.hp.lr_main = 1e308;
    cfg.ablate_rows = vec![Strategy::PR];
    cfg.ablate_seeds = vec![1, 2];
    let report = run_ablation(&cfg, None).unwrap();
    assert_eq!(report.runs.len(), 2);
    assert!(report.runs.iter().all(|r| r.outcome.is_err()));
    assert!(report.summary_csv().contains("failed: numeric failure"));
}

#[test]
fn divergence_is_reported_as_numeric_failure() {
    let mut cfg = small(0);
    cfg.grad_clip = 0.0;
    cfg.hp.lr_main = 1e308;
    match run_training(&cfg) {
        Err(e @ PrclError::Numeric(_)) => assert_eq!(e.exit_code(), 3),
        other => panic!("expected numeric failure, got {:?}", other.map(|o| o.metrics_csv())),
    }
}

#[test]
fn deterministic_baseline_never_touches_the_variance_head() {
    let mut cfg = small(2);
    cfg.strategy = Strategy::BASELINE;
    cfg.hp.delta_w = 0.2;
    let (seed, scenes) = load_or_generate(&cfg).unwrap();
    let mut t = Trainer::new(cfg, &scenes, seed).unwrap();
    let before = t.student().clone();
    for _ in 0..60 {
        t.step().unwrap();
    }
    assert_eq!(t.student().prob_hidden, before.prob_hidden);
    assert_eq!(t.student().prob_out, before.prob_out);
    assert_ne!(t.student().repr_out, before.repr_out);
    for c in t.bank().initialized_classes() {
        assert!(t.bank().get(c).unwrap().sigma2_hat.iter().all(|&v| v == 0.5));
    }
}

#[test]
fn baseline_plus_uses_ema_prototypes() {
    let mut cfg = small(2);
    cfg.strategy = Strategy::BASELINE_PLUS;
    cfg.hp.delta_w = 0.2;
    let (seed, scenes) = load_or_generate(&cfg).unwrap();
    let mut t = Trainer::new(cfg, &scenes, seed).unwrap();
    for _ in 0..20 {
        t.step().unwrap();
    }
    assert_eq!(t.bank().strategy().as_str(), "ema");
    assert!(t.bank().initialized_classes().count() > 0);
}

#[test]
fn memory_bank_bytes_grow_then_plateau() {
    let mut cfg = small(1);
    cfg.strategy = Strategy::PR_GDP_MB;
    cfg.memory_bank_capacity = 2000;
    cfg.hp.delta_w = 0.2;
    cfg.total_iters = 80;
    cfg.eval_every = 80;
    let out = run_training(&cfg).unwrap();
    let cap = 2000 * 2 * cfg.embed_dim * 8;
    let trace = &out.neg_bytes_trace;
    assert!(trace.windows(2).all(|w| w[0] <= w[1]));
    assert!(trace[0] < cap);
    assert_eq!(*trace.last().unwrap(), cap);
}

#[test]
fn embedding_dump_is_versioned_jsonl() {
    let cfg = small(6);
    let out = run_training(&cfg).unwrap();
    let text = out.embeddings_jsonl(cfg.embed_dim);
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["schema"], "prcl.embeddings");
    assert_eq!(header["version"], 1);
    let mut n = 0;
    for line in lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["mu"].as_array().unwrap().len(), cfg.embed_dim);
        assert_eq!(v["sigma2"].as_array().unwrap().len(), cfg.embed_dim);
        assert!(v["gt"].as_u64().unwrap() < 6 && v["pred"].as_u64().unwrap() < 6);
        n += 1;
    }
    assert_eq!(n, cfg.metric_pixels);
}

// Supervised-only: no contrastive weight and an unreachable confidence
// threshold for the pseudo-label loss.
#[test]
fn supervised_only_reference_band() {
    let mut cfg = RunConfig::default();
    cfg.strategy = Strategy::BASELINE;
    cfg.hp.lambda_c0 = 0.0;
    cfg.hp.delta_u = 1.0;
    cfg.total_iters = 1000;
    cfg.eval_every = 1000;
    let out = run_training(&cfg).unwrap();
    assert_eq!(out.last().loss_u, 0.0);
    assert_eq!(out.last().lambda, 0.0);
    let miou = out.last().eval.miou;
    assert!((miou - GOLDEN_SUPERVISED_MIOU).abs() < 0.01, "mIoU {miou}");
}

const GOLDEN_SUPERVISED_MIOU: f64 = 0.4913;
