//! The end-to-end training loop.
//!
//! One iteration: supervised CE on labeled pixels, teacher pseudo-labels and
//! confidence-weighted CE on unlabeled pixels, then the contrastive term on
//! the combined stream (validity filter, local prototypes, prototype update,
//! anchor and negative sampling, virtual negatives), a soft-freeze SGD step
//! and a teacher EMA step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{NegativeStrategy, Representation, RunConfig};
use crate::datagen::{self, ToyScene};
use crate::error::{PrclError, Result};
use crate::metrics::{davies_bouldin, miou, silhouette, ConfusionMatrix};
use crate::negatives::{
    filter_valid, generate_vn, negative_class_distribution, sample_anchors, sample_real_negatives, AnchorGroup,
    Candidate, MemoryBank, SampleSet,
};
use crate::network::{
    backward, class_probability, forward, predict_logits, pseudo_label, sgd_step, teacher_ema_step, ModelParams,
    NetShape, TeacherState,
};
use crate::objective::{contrastive_loss, lambda_schedule, supervised_ce, total_loss, unsupervised_weighted_ce};
use crate::prob_embed::ProbRepr;
use crate::prototypes::{local_prototype, prototype_shift, PrototypeBank};

/// Column order of `metrics.csv`.
pub const METRICS_HEADER: &str =
    "iteration,loss_s,loss_u,loss_c,lambda,miou,silhouette,dbi,proto_shift,neg_state_bytes";
/// Column order of `timing.csv`.
pub const TIMING_HEADER: &str = "iteration,ms_per_iter";
/// Column order of `eval.csv`.
pub const EVAL_HEADER: &str = "iteration,miou,silhouette,dbi";

pub const EMBEDDING_SCHEMA: &str = "prcl.embeddings";
pub const EMBEDDING_SCHEMA_VERSION: u32 = 1;

// Offsets the data seed so the holdout shuffle is independent of generation.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
// Offsets the run seed for batch selection, so every strategy trained with the
// same seed sees the same batches.
const BATCH_STREAM: u64 = 0x6a09_e667_f3bc_c909;

/// Scenes partitioned for training and validation. Ids are positions in the
/// original scene list.
#[derive(Debug, Clone)]
pub struct Splits {
    pub labeled: Vec<ToyScene>,
    pub unlabeled: Vec<ToyScene>,
    pub val: Vec<(usize, ToyScene)>,
}

/// Holds out `holdout_fraction` of all scenes for validation, taken from the
/// unlabeled pool by a seed-determined shuffle. With no unlabeled scenes the
/// labeled set doubles as validation.
pub fn split_scenes(scenes: &[ToyScene], data_seed: u64, holdout_fraction: f64) -> Splits {
    let labeled: Vec<ToyScene> = scenes.iter().filter(|s| s.is_labeled).cloned().collect();
    let mut pool: Vec<usize> = (0..scenes.len()).filter(|&i| !scenes[i].is_labeled).collect();
    if pool.is_empty() {
        let val = (0..scenes.len()).map(|i| (i, scenes[i].clone())).collect();
        return Splits { labeled, unlabeled: Vec::new(), val };
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(data_seed ^ SPLIT_STREAM));
    let n_val = ((holdout_fraction * scenes.len() as f64).round() as usize).clamp(1, pool.len());
    let mut val_ids = pool[..n_val].to_vec();
    val_ids.sort_unstable();
    let mut train_ids = pool[n_val..].to_vec();
    train_ids.sort_unstable();
    Splits {
        labeled,
        unlabeled: train_ids.into_iter().map(|i| scenes[i].clone()).collect(),
        val: val_ids.into_iter().map(|i| (i, scenes[i].clone())).collect(),
    }
}

/// Scenes for a run: loaded from `dataset_path` when set, generated otherwise.
pub fn load_or_generate(cfg: &RunConfig) -> Result<(u64, Vec<ToyScene>)> {
    match &cfg.dataset_path {
        Some(path) => {
            let (spec, scenes) = datagen::import_scenes(path)?;
            if spec.num_classes != cfg.data.num_classes || spec.features != cfg.data.features || spec.grid != cfg.data.grid {
                return Err(PrclError::Incompatible(format!(
                    "dataset has C={} F={} G={}, config expects C={} F={} G={}",
                    spec.num_classes, spec.features, spec.grid, cfg.data.num_classes, cfg.data.features, cfg.data.grid
                )));
            }
            Ok((spec.seed, scenes))
        }
        None => Ok((cfg.data.seed, datagen::generate(&cfg.data)?.all_scenes())),
    }
}

/// Validation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub miou: f64,
    /// `None` when the sampled pixels cover fewer than two classes.
    pub silhouette: Option<f64>,
    pub dbi: Option<f64>,
}

/// One line of the embedding dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub scene: usize,
    pub pixel: usize,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub pred: usize,
    pub gt: usize,
}

#[derive(Serialize)]
struct DumpHeader<'a> {
    schema: &'a str,
    version: u32,
    dim: usize,
}

/// Mean IoU on every validation pixel, clustering scores of the means on an
/// evenly strided subset of `metric_pixels` pixels.
pub fn evaluate_model(
    params: &ModelParams,
    val: &[(usize, ToyScene)],
    metric_pixels: usize,
) -> Result<(EvalMetrics, Vec<EmbeddingRecord>)> {
    let classes = params.shape().classes;
    let mut cm = ConfusionMatrix::new(classes);
    let total: usize = val.iter().map(|(_, s)| s.num_pixels()).sum();
    let stride = (total / metric_pixels.max(1)).max(1);
    let mut records = Vec::new();
    let mut offset = 0;
    for (id, scene) in val {
        let pixels = scene_pixels(scene);
        let out = forward(params, &pixels)?;
        let pl = pseudo_label(&out.logits, classes);
        let d = params.shape().embed;
        for i in 0..scene.num_pixels() {
            cm.add(scene.label(i), pl.labels[i]);
            let global = offset + i;
            if global % stride == 0 && records.len() < metric_pixels {
                records.push(EmbeddingRecord {
                    scene: *id,
                    pixel: i,
                    mu: out.mu[i * d..(i + 1) * d].to_vec(),
                    sigma2: out.sigma2[i * d..(i + 1) * d].to_vec(),
                    pred: pl.labels[i],
                    gt: scene.label(i),
                });
            }
        }
        offset += scene.num_pixels();
    }
    let points: Vec<(Vec<f64>, usize)> = records.iter().map(|r| (r.mu.clone(), r.gt)).collect();
    let metrics = EvalMetrics {
        miou: miou(&cm)?,
        silhouette: silhouette(&points).ok(),
        dbi: davies_bouldin(&points).ok(),
    };
    Ok((metrics, records))
}

fn scene_pixels(scene: &ToyScene) -> Vec<f64> {
    scene.features.iter().map(|&v| v as f64).collect()
}

/// Per-iteration bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_c: f64,
    pub lambda: f64,
    pub total: f64,
    /// Mean displacement of class prototypes present before and after the
    /// update.
    pub proto_shift: Option<f64>,
    pub neg_state_bytes: usize,
    pub anchors: usize,
}

/// A row of `metrics.csv`; losses are means over the iterations since the
/// previous row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss_c: f64,
    pub lambda: f64,
    pub eval: EvalMetrics,
    pub proto_shift: Option<f64>,
    pub neg_state_bytes: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.loss_s,
            self.loss_u,
            self.loss_c,
            self.lambda,
            self.eval.miou,
            opt(self.eval.silhouette),
            opt(self.eval.dbi),
            opt(self.proto_shift),
            self.neg_state_bytes
        )
    }
}

pub fn eval_csv_row(iteration: usize, m: &EvalMetrics) -> String {
    format!("{},{},{},{}", iteration, m.miou, opt(m.silhouette), opt(m.dbi))
}

/// Training state for one run.
pub struct Trainer {
    cfg: RunConfig,
    rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    student: ModelParams,
    teacher: TeacherState,
    bank: PrototypeBank,
    memory: Option<MemoryBank>,
    splits: Splits,
    iter: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, scenes: &[ToyScene], data_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let splits = split_scenes(scenes, data_seed, cfg.holdout_fraction);
        if splits.labeled.is_empty() {
            return Err(PrclError::contract("training needs at least one labeled scene"));
        }
        let shape = NetShape {
            features: cfg.data.features,
            hidden: cfg.hidden,
            classes: cfg.data.num_classes,
            embed: cfg.embed_dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.hp.seed);
        let student = ModelParams::init(shape, &mut rng);
        let teacher = TeacherState::from_student(&student, cfg.hp.teacher_momentum);
        let bank = PrototypeBank::new(cfg.strategy.prototype, shape.classes, shape.embed);
        let memory = match cfg.strategy.negatives {
            NegativeStrategy::MemoryBank => Some(MemoryBank::new(cfg.memory_bank_capacity, shape.classes, shape.embed)?),
            _ => None,
        };
        let batch_rng = ChaCha8Rng::seed_from_u64(cfg.hp.seed ^ BATCH_STREAM);
        Ok(Trainer {
            cfg,
            rng,
            batch_rng,
            student,
            teacher,
            bank,
            memory,
            splits,
            iter: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn teacher(&self) -> &TeacherState {
        &self.teacher
    }

    pub fn bank(&self) -> &PrototypeBank {
        &self.bank
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Persistent state kept only to supply extra negatives.
    pub fn neg_state_bytes(&self) -> usize {
        match self.cfg.strategy.negatives {
            NegativeStrategy::None => 0,
            NegativeStrategy::Vn => self.bank.state_bytes(),
            NegativeStrategy::MemoryBank => self.memory.as_ref().map_or(0, MemoryBank::state_bytes),
        }
    }

    fn batch(&mut self) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
        let mut xl = Vec::new();
        let mut yl = Vec::new();
        for _ in 0..self.cfg.batch_labeled {
            let s = &self.splits.labeled[self.batch_rng.random_range(0..self.splits.labeled.len())];
            xl.extend(s.features.iter().map(|&v| v as f64));
            yl.extend(s.labels.iter().map(|&l| l as usize));
        }
        let mut xu = Vec::new();
        if !self.splits.unlabeled.is_empty() {
            for _ in 0..self.cfg.batch_unlabeled {
                let s = &self.splits.unlabeled[self.batch_rng.random_range(0..self.splits.unlabeled.len())];
                xu.extend(s.features.iter().map(|&v| v as f64));
            }
        }
        (xl, yl, xu)
    }

    fn embedding(&self, mu: &[f64], sigma2: &[f64], i: usize) -> Result<ProbRepr> {
        let d = self.cfg.embed_dim;
        let m = mu[i * d..(i + 1) * d].to_vec();
        match self.cfg.strategy.representation {
            Representation::Probabilistic => ProbRepr::new(m, sigma2[i * d..(i + 1) * d].to_vec()),
            Representation::Deterministic => ProbRepr::isotropic(m, self.cfg.fixed_sigma2),
        }
    }

    /// Runs one training iteration.
    pub fn step(&mut self) -> Result<IterStats> {
        let classes = self.cfg.data.num_classes;
        let d = self.cfg.embed_dim;
        let f = self.cfg.data.features;
        let hp = self.cfg.hp.clone();
        let deterministic = self.cfg.strategy.representation == Representation::Deterministic;

        let (xl, yl, xu) = self.batch();
        let n_l = yl.len();
        let n_u = xu.len() / f;

        // teacher: pseudo-labels for unlabeled pixels, confidence of the
        // ground-truth class for labeled ones
        let t_logits_l = predict_logits(&self.teacher.params, &xl)?;
        let conf_l = class_probability(&t_logits_l, classes, &yl);
        let t_logits_u = predict_logits(&self.teacher.params, &xu)?;
        let pseudo = pseudo_label(&t_logits_u, classes);

        let mut x = xl;
        x.extend_from_slice(&xu);
        let out = forward(&self.student, &x)?;
        let ls = supervised_ce(&out.logits[..n_l * classes], classes, &yl)?;
        let lu = unsupervised_weighted_ce(&out.logits[n_l * classes..], classes, &pseudo.labels, &pseudo.confidences, hp.delta_u)?;

        let labels: Vec<usize> = yl.iter().chain(&pseudo.labels).copied().collect();
        let conf: Vec<f64> = conf_l.iter().chain(&pseudo.confidences).copied().collect();
        let mut candidates = Vec::new();
        for i in 0..n_l + n_u {
            if conf[i] > hp.delta_w {
                candidates.push(Candidate {
                    repr: self.embedding(&out.mu, &out.sigma2, i)?,
                    class: labels[i],
                    confidence: conf[i],
                    pixel: i,
                });
            }
        }
        let valid = filter_valid(&candidates, hp.delta_w);
        let mut valid_by_class: Vec<Vec<Candidate>> = vec![Vec::new(); classes];
        for c in valid {
            valid_by_class[c.class].push(c);
        }

        let before = self.bank.clone();
        for (c, reps) in valid_by_class.iter().enumerate() {
            if reps.is_empty() {
                continue;
            }
            let reprs: Vec<ProbRepr> = reps.iter().map(|c| c.repr.clone()).collect();
            let mut local = local_prototype(&reprs)?;
            if deterministic {
                local = ProbRepr::isotropic(local.mu().to_vec(), self.cfg.fixed_sigma2)?;
            }
            self.bank.absorb(c, &local, hp.ema_proto_momentum)?;
        }
        let shifts: Vec<f64> = prototype_shift(&before, &self.bank).into_iter().flatten().collect();
        let proto_shift = (!shifts.is_empty()).then(|| shifts.iter().sum::<f64>() / shifts.len() as f64);

        let mut samples = SampleSet::default();
        for c in 0..classes {
            if valid_by_class[c].is_empty() {
                continue;
            }
            let anchors = sample_anchors(&valid_by_class[c], hp.delta_s, hp.anchors_per_class, &mut self.rng);
            if anchors.is_empty() {
                continue;
            }
            // classes absent from this batch are redrawn, then skipped
            let dist = negative_class_distribution(c, &self.bank, hp.temperature_n)?;
            let real = sample_real_negatives(&valid_by_class, &dist, hp.negatives_total, &mut self.rng)?;
            let real_negatives = real.into_iter().flatten().collect();
            let mut group = AnchorGroup {
                class: c,
                anchors,
                real_negatives,
                virtual_negatives: Vec::new(),
            };
            match self.cfg.strategy.negatives {
                NegativeStrategy::None => {}
                NegativeStrategy::Vn => {
                    for k in self.bank.initialized_classes().filter(|&k| k != c).collect::<Vec<_>>() {
                        let g = self.bank.get(k).expect("initialized");
                        group.virtual_negatives.extend(generate_vn(g, hp.beta, hp.vn_count, hp.vn_scale, &mut self.rng)?);
                    }
                }
                NegativeStrategy::MemoryBank => {
                    let memory = self.memory.as_ref().expect("memory bank strategy");
                    for (k, repr) in memory.sample_excluding(c, self.cfg.memory_bank_negatives, &mut self.rng) {
                        group.real_negatives.push(Candidate { repr, class: k, confidence: 1.0, pixel: usize::MAX });
                    }
                }
            }
            samples.groups.push(group);
        }

        let lc = contrastive_loss(&samples, &self.bank, &hp)?;
        let lambda = lambda_schedule(self.iter as f64, self.cfg.total_iters as f64, hp.lambda_c0, hp.alpha_sched)?;
        let total = total_loss(ls.loss, lu.loss, lc.loss, lambda);
        if !total.is_finite() {
            return Err(PrclError::Numeric(format!(
                "iteration {}: loss_s={} loss_u={} loss_c={} lambda={}",
                self.iter, ls.loss, lu.loss, lc.loss, lambda
            )));
        }

        let mut grad_logits = ls.grad;
        grad_logits.extend_from_slice(&lu.grad);
        let mut grad_mu = vec![0.0; (n_l + n_u) * d];
        let mut grad_sigma2 = vec![0.0; (n_l + n_u) * d];
        for ag in &lc.anchor_grads {
            let p = ag.pixel;
            for k in 0..d {
                grad_mu[p * d + k] += lambda * ag.grad_mu[k];
                if !deterministic {
                    grad_sigma2[p * d + k] += lambda * ag.grad_sigma2[k];
                }
            }
        }
        let mut grads = backward(&self.student, &out.cache, &grad_logits, &grad_mu, &grad_sigma2)?;
        let norm = grads.norm();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            grads.scale(self.cfg.grad_clip / norm);
        }
        sgd_step(&mut self.student, &grads, hp.lr_main, hp.lr_prob_head, self.iter, self.cfg.total_iters)?;
        teacher_ema_step(&mut self.teacher, &self.student)?;

        if let Some(memory) = self.memory.as_mut() {
            for reps in &valid_by_class {
                for c in reps {
                    memory.enqueue(c.class, c.repr.clone())?;
                }
            }
        }
        self.iter += 1;
        Ok(IterStats {
            loss_s: ls.loss,
            loss_u: lu.loss,
            loss_c: lc.loss,
            lambda,
            total,
            proto_shift,
            neg_state_bytes: self.neg_state_bytes(),
            anchors: samples.anchor_count(),
        })
    }

    pub fn evaluate(&self) -> Result<(EvalMetrics, Vec<EmbeddingRecord>)> {
        evaluate_model(&self.student, &self.splits.val, self.cfg.metric_pixels)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                embed_dim: self.cfg.embed_dim,
                num_classes: self.cfg.data.num_classes,
                features: self.cfg.data.features,
                hidden: self.cfg.hidden,
                grid: self.cfg.data.grid,
                iteration: self.iter,
            },
            student: self.student.clone(),
            teacher: self.teacher.params.clone(),
            bank: self.bank.clone(),
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    /// `(iteration, wall-clock ms per iteration)` for each metrics row.
    pub timing: Vec<(usize, f64)>,
    pub ms_per_iter: f64,
    /// Negative-state bytes after every iteration.
    pub neg_bytes_trace: Vec<usize>,
    pub embeddings: Vec<EmbeddingRecord>,
    pub checkpoint: Checkpoint,
}

impl RunOutcome {
    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("a run has at least one row")
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from(TIMING_HEADER);
        s.push('\n');
        for (i, ms) in &self.timing {
            let _ = writeln!(s, "{i},{ms:.4}");
        }
        s
    }

    pub fn embeddings_jsonl(&self, dim: usize) -> String {
        let mut s = serde_json::to_string(&DumpHeader {
            schema: EMBEDDING_SCHEMA,
            version: EMBEDDING_SCHEMA_VERSION,
            dim,
        })
        .expect("header serializes");
        s.push('\n');
        for r in &self.embeddings {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    /// Writes `metrics.csv`, `timing.csv`, `embeddings.jsonl`,
    /// `checkpoint.bin` and `config.txt` into `dir`.
    pub fn write(&self, cfg: &RunConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("timing.csv"), self.timing_csv())?;
        fs::write(dir.join("embeddings.jsonl"), self.embeddings_jsonl(cfg.embed_dim))?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        self.checkpoint.save(&dir.join("checkpoint.bin"))?;
        Ok(())
    }
}

/// Trains for `total_iters`, evaluating every `eval_every` iterations and at
/// the end. Nothing is written to disk.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    let (data_seed, scenes) = load_or_generate(cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), &scenes, data_seed)?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let mut trace = Vec::with_capacity(cfg.total_iters);
    let (mut ls, mut lu, mut lc, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut shift_sum = 0.0;
    let mut shift_n = 0usize;
    let mut train_time = 0.0;
    let mut window_time = 0.0;
    while trainer.iteration() < cfg.total_iters {
        let t0 = Instant::now();
        let st = trainer.step()?;
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        train_time += dt;
        window_time += dt;
        ls += st.loss_s;
        lu += st.loss_u;
        lc += st.loss_c;
        n += 1;
        if let Some(s) = st.proto_shift {
            shift_sum += s;
            shift_n += 1;
        }
        trace.push(st.neg_state_bytes);
        let it = trainer.iteration();
        if it % cfg.eval_every == 0 || it == cfg.total_iters {
            let (eval, _) = trainer.evaluate()?;
            rows.push(MetricsRow {
                iteration: it,
                loss_s: ls / n as f64,
                loss_u: lu / n as f64,
                loss_c: lc / n as f64,
                lambda: st.lambda,
                eval,
                proto_shift: (shift_n > 0).then(|| shift_sum / shift_n as f64),
                neg_state_bytes: st.neg_state_bytes,
            });
            timing.push((it, window_time / n as f64));
            (ls, lu, lc, n, shift_sum, shift_n, window_time) = (0.0, 0.0, 0.0, 0, 0.0, 0, 0.0);
        }
    }
    let (_, embeddings) = trainer.evaluate()?;
    Ok(RunOutcome {
        rows,
        timing,
        ms_per_iter: train_time / cfg.total_iters as f64,
        neg_bytes_trace: trace,
        embeddings,
        checkpoint: trainer.checkpoint(),
    })
}

/// Trains and writes all artifacts into `cfg.output_dir`.
pub fn train_to_dir(cfg: &RunConfig) -> Result<RunOutcome> {
    let outcome = run_training(cfg)?;
    outcome.write(cfg, &cfg.output_dir)?;
    Ok(outcome)
}

/// Evaluates a checkpoint on the validation split of `dataset`.
pub fn eval_checkpoint(ck: &Checkpoint, dataset: &Path, holdout_fraction: f64, metric_pixels: usize) -> Result<String> {
    let (spec, scenes) = datagen::import_scenes(dataset)?;
    let h = &ck.header;
    if spec.num_classes != h.num_classes || spec.features != h.features || spec.grid != h.grid {
        return Err(PrclError::Incompatible(format!(
            "checkpoint trained with C={} F={} G={}, dataset has C={} F={} G={}",
            h.num_classes, h.features, h.grid, spec.num_classes, spec.features, spec.grid
        )));
    }
    let splits = split_scenes(&scenes, spec.seed, holdout_fraction);
    let (m, _) = evaluate_model(&ck.student, &splits.val, metric_pixels)?;
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    out.push_str(&eval_csv_row(h.iteration, &m));
    out.push('\n');
    Ok(out)
}
