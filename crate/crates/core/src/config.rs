//! Run configuration: flat `key = value` text with typed, documented keys.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datagen::DatasetSpec;
use crate::error::{PrclError, Result};
use crate::negatives::VnScale;
use crate::objective::HyperParams;
use crate::prototypes::PrototypeStrategy;

/// How pixel embeddings carry uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// Variance head bypassed; every embedding gets the same fixed variance.
    Deterministic,
    Probabilistic,
}

/// Where extra negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeStrategy {
    None,
    MemoryBank,
    Vn,
}

/// A named combination of representation, prototype and negative strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub representation: Representation,
    pub prototype: PrototypeStrategy,
    pub negatives: NegativeStrategy,
}

impl Strategy {
    pub const BASELINE: Strategy = Strategy::new(Representation::Deterministic, PrototypeStrategy::None, NegativeStrategy::None);
    pub const BASELINE_PLUS: Strategy = Strategy::new(Representation::Deterministic, PrototypeStrategy::Ema, NegativeStrategy::None);
    pub const PR: Strategy = Strategy::new(Representation::Probabilistic, PrototypeStrategy::None, NegativeStrategy::None);
    pub const PR_GDP: Strategy = Strategy::new(Representation::Probabilistic, PrototypeStrategy::Gdp, NegativeStrategy::None);
    pub const PR_GDP_VN: Strategy = Strategy::new(Representation::Probabilistic, PrototypeStrategy::Gdp, NegativeStrategy::Vn);
    pub const PR_GDP_MB: Strategy = Strategy::new(Representation::Probabilistic, PrototypeStrategy::Gdp, NegativeStrategy::MemoryBank);

    const NAMED: [(&'static str, Strategy); 6] = [
        ("baseline", Strategy::BASELINE),
        ("baseline_plus", Strategy::BASELINE_PLUS),
        ("pr", Strategy::PR),
        ("pr_gdp", Strategy::PR_GDP),
        ("pr_gdp_vn", Strategy::PR_GDP_VN),
        ("pr_gdp_mb", Strategy::PR_GDP_MB),
    ];

    pub const fn new(representation: Representation, prototype: PrototypeStrategy, negatives: NegativeStrategy) -> Self {
        Strategy { representation, prototype, negatives }
    }

    pub fn from_name(name: &str) -> Option<Strategy> {
        Strategy::NAMED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    /// Row name, or a `repr/proto/neg` triple for unnamed combinations.
    pub fn name(&self) -> String {
        Strategy::NAMED
            .iter()
            .find(|(_, s)| s == self)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| {
                format!(
                    "{}/{}/{}",
                    representation_str(self.representation),
                    self.prototype.as_str(),
                    negatives_str(self.negatives)
                )
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.negatives == NegativeStrategy::Vn && self.prototype != PrototypeStrategy::Gdp {
            return Err(PrclError::Config {
                key: "negatives".into(),
                msg: "vn requires prototype = gdp".into(),
            });
        }
        if self.prototype == PrototypeStrategy::Gdp && self.representation != Representation::Probabilistic {
            return Err(PrclError::Config {
                key: "prototype".into(),
                msg: "gdp requires representation = probabilistic".into(),
            });
        }
        Ok(())
    }
}

fn representation_str(r: Representation) -> &'static str {
    match r {
        Representation::Deterministic => "deterministic",
        Representation::Probabilistic => "probabilistic",
    }
}

fn negatives_str(n: NegativeStrategy) -> &'static str {
    match n {
        NegativeStrategy::None => "none",
        NegativeStrategy::MemoryBank => "memory_bank",
        NegativeStrategy::Vn => "vn",
    }
}

/// Everything a `train`, `eval` or `ablate` invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub hp: HyperParams,
    pub strategy: Strategy,
    pub memory_bank_capacity: usize,
    /// Negatives drawn from the memory bank per anchor class.
    pub memory_bank_negatives: usize,
    /// Variance assigned to every embedding in deterministic mode.
    pub fixed_sigma2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub hidden: usize,
    pub embed_dim: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub total_iters: usize,
    pub eval_every: usize,
    pub holdout_fraction: f64,
    /// Validation pixels used for clustering metrics and the embedding dump.
    pub metric_pixels: usize,
    pub dataset_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub ablate_rows: Vec<Strategy>,
    pub ablate_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DatasetSpec::default(),
            hp: HyperParams::default(),
            strategy: Strategy::PR_GDP_VN,
            memory_bank_capacity: 4096,
            memory_bank_negatives: 256,
            fixed_sigma2: 0.5,
            grad_clip: 1.0,
            hidden: 32,
            embed_dim: 16,
            batch_labeled: 1,
            batch_unlabeled: 1,
            total_iters: 4000,
            eval_every: 500,
            holdout_fraction: 0.2,
            metric_pixels: 512,
            dataset_path: None,
            output_dir: PathBuf::from("runs/default"),
            ablate_rows: vec![Strategy::BASELINE, Strategy::PR, Strategy::PR_GDP, Strategy::PR_GDP_VN],
            ablate_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

/// `(key, type, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "u64", "seed for data generation and training"),
    ("num_scenes", "usize", "scenes to generate"),
    ("labeled_fraction", "f64", "fraction of scenes that keep labels, in (0, 1]"),
    ("num_classes", "usize", "number of classes C"),
    ("grid", "usize", "scene side length G"),
    ("features", "usize", "pixel feature dimension F"),
    ("class_separation", "f64", "mean distance between class centroids"),
    ("noise_sigma", "f64", "base feature noise"),
    ("boundary_blur", "f64", "probability of mixing a boundary pixel with its neighbour"),
    ("dataset_path", "path", "load scenes from this file instead of generating them"),
    ("representation", "enum", "deterministic | probabilistic"),
    ("prototype", "enum", "none | ema | gdp"),
    ("negatives", "enum", "none | memory_bank | vn"),
    ("strategy", "enum", "shorthand for the three keys above: baseline | baseline_plus | pr | pr_gdp | pr_gdp_vn | pr_gdp_mb"),
    ("memory_bank_capacity", "usize", "memory bank size in representations"),
    ("memory_bank_negatives", "usize", "memory bank negatives per anchor class"),
    ("fixed_sigma2", "f64", "embedding variance in deterministic mode"),
    ("grad_clip", "f64", "global gradient-norm clip, 0 disables"),
    ("tau", "f64", "contrastive temperature"),
    ("delta_s", "f64", "strong threshold (anchors below it)"),
    ("delta_w", "f64", "weak threshold (valid above it)"),
    ("delta_u", "f64", "confidence threshold of the unsupervised loss weight"),
    ("beta", "f64", "virtual radius"),
    ("vn_scale", "enum", "variance | stddev"),
    ("lambda_c0", "f64", "initial contrastive weight"),
    ("alpha_sched", "f64", "contrastive weight growth exponent"),
    ("vn_count", "usize", "virtual negatives per class"),
    ("anchors_per_class", "usize", "anchors sampled per class and iteration"),
    ("negatives_total", "usize", "real negatives per anchor class"),
    ("teacher_momentum", "f64", "teacher EMA momentum"),
    ("ema_proto_momentum", "f64", "EMA prototype momentum"),
    ("lr_main", "f64", "learning rate of encoder, segmentation and representation heads"),
    ("lr_prob_head", "f64", "learning rate of the probability head"),
    ("temperature_n", "f64", "negative class sampling temperature"),
    ("hidden", "usize", "hidden width H"),
    ("embed_dim", "usize", "embedding dimension D"),
    ("batch_labeled", "usize", "labeled scenes per iteration"),
    ("batch_unlabeled", "usize", "unlabeled scenes per iteration"),
    ("total_iters", "usize", "training iterations"),
    ("eval_every", "usize", "iterations between metric rows"),
    ("holdout_fraction", "f64", "fraction of scenes held out for validation"),
    ("metric_pixels", "usize", "validation pixels for clustering metrics and the embedding dump"),
    ("output_dir", "path", "directory for run artifacts"),
    ("ablate_rows", "list", "comma-separated strategy names for `ablate`"),
    ("ablate_seeds", "list", "comma-separated seeds for `ablate`"),
];

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("config keys (key = value, '#' starts a comment):\n");
    for (k, t, d) in KEYS {
        let _ = writeln!(s, "  {k:<22} {t:<6} {d}");
    }
    s
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| PrclError::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| PrclError::Config {
                key: line.to_string(),
                msg: format!("line {} is not `key = value`", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: &str| PrclError::Config { key: key.into(), msg: msg.into() };
        match key {
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.hp.seed = s;
                self.data.seed = s;
            }
            "num_scenes" => self.data.num_scenes = parse(key, value)?,
            "labeled_fraction" => self.data.labeled_fraction = parse(key, value)?,
            "num_classes" => self.data.num_classes = parse(key, value)?,
            "grid" => self.data.grid = parse(key, value)?,
            "features" => self.data.features = parse(key, value)?,
            "class_separation" => self.data.class_separation = parse(key, value)?,
            "noise_sigma" => self.data.noise_sigma = parse(key, value)?,
            "boundary_blur" => self.data.boundary_blur = parse(key, value)?,
            "dataset_path" => self.dataset_path = Some(PathBuf::from(value)),
            "representation" => {
                self.strategy.representation = match value {
                    "deterministic" => Representation::Deterministic,
                    "probabilistic" => Representation::Probabilistic,
                    _ => return Err(bad("expected deterministic | probabilistic")),
                }
            }
            "prototype" => {
                self.strategy.prototype = match value {
                    "none" => PrototypeStrategy::None,
                    "ema" => PrototypeStrategy::Ema,
                    "gdp" => PrototypeStrategy::Gdp,
                    _ => return Err(bad("expected none | ema | gdp")),
                }
            }
            "negatives" => {
                self.strategy.negatives = match value {
                    "none" => NegativeStrategy::None,
                    "memory_bank" => NegativeStrategy::MemoryBank,
                    "vn" => NegativeStrategy::Vn,
                    _ => return Err(bad("expected none | memory_bank | vn")),
                }
            }
            "strategy" => self.strategy = Strategy::from_name(value).ok_or_else(|| bad("unknown strategy name"))?,
            "memory_bank_capacity" => self.memory_bank_capacity = parse(key, value)?,
            "memory_bank_negatives" => self.memory_bank_negatives = parse(key, value)?,
            "fixed_sigma2" => self.fixed_sigma2 = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "tau" => self.hp.tau = parse(key, value)?,
            "delta_s" => self.hp.delta_s = parse(key, value)?,
            "delta_w" => self.hp.delta_w = parse(key, value)?,
            "delta_u" => self.hp.delta_u = parse(key, value)?,
            "beta" => self.hp.beta = parse(key, value)?,
            "vn_scale" => {
                self.hp.vn_scale = match value {
                    "variance" => VnScale::Variance,
                    "stddev" => VnScale::StdDev,
                    _ => return Err(bad("expected variance | stddev")),
                }
            }
            "lambda_c0" => self.hp.lambda_c0 = parse(key, value)?,
            "alpha_sched" => self.hp.alpha_sched = parse(key, value)?,
            "vn_count" => self.hp.vn_count = parse(key, value)?,
            "anchors_per_class" => self.hp.anchors_per_class = parse(key, value)?,
            "negatives_total" => self.hp.negatives_total = parse(key, value)?,
            "teacher_momentum" => self.hp.teacher_momentum = parse(key, value)?,
            "ema_proto_momentum" => self.hp.ema_proto_momentum = parse(key, value)?,
            "lr_main" => self.hp.lr_main = parse(key, value)?,
            "lr_prob_head" => self.hp.lr_prob_head = parse(key, value)?,
            "temperature_n" => self.hp.temperature_n = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "batch_labeled" => self.batch_labeled = parse(key, value)?,
            "batch_unlabeled" => self.batch_unlabeled = parse(key, value)?,
            "total_iters" => self.total_iters = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            "metric_pixels" => self.metric_pixels = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "ablate_rows" => {
                self.ablate_rows = value
                    .split(',')
                    .map(|n| Strategy::from_name(n.trim()).ok_or_else(|| bad(&format!("unknown strategy `{}`", n.trim()))))
                    .collect::<Result<_>>()?
            }
            "ablate_seeds" => {
                self.ablate_seeds = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
            }
            _ => return Err(bad("unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.hp.validate()?;
        self.strategy.validate()?;
        let bad = |key: &str, msg: &str| Err(PrclError::Config { key: key.into(), msg: msg.into() });
        if self.hidden == 0 {
            return bad("hidden", "must be positive");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim", "must be positive");
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled", "must be positive");
        }
        if self.total_iters == 0 {
            return bad("total_iters", "must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if self.memory_bank_capacity == 0 {
            return bad("memory_bank_capacity", "must be positive");
        }
        if !(self.fixed_sigma2 > 0.0 && self.fixed_sigma2.is_finite()) {
            return bad("fixed_sigma2", "must be positive");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip", "must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction", "must lie in [0, 1)");
        }
        if self.ablate_rows.is_empty() {
            return bad("ablate_rows", "must name at least one strategy");
        }
        for s in &self.ablate_rows {
            s.validate()?;
        }
        if self.ablate_seeds.is_empty() {
            return bad("ablate_seeds", "must list at least one seed");
        }
        Ok(())
    }

    /// The config as parseable text; `parse_str(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.hp.seed.to_string());
        kv("num_scenes", self.data.num_scenes.to_string());
        kv("labeled_fraction", self.data.labeled_fraction.to_string());
        kv("num_classes", self.data.num_classes.to_string());
        kv("grid", self.data.grid.to_string());
        kv("features", self.data.features.to_string());
        kv("class_separation", self.data.class_separation.to_string());
        kv("noise_sigma", self.data.noise_sigma.to_string());
        kv("boundary_blur", self.data.boundary_blur.to_string());
        if let Some(p) = &self.dataset_path {
            kv("dataset_path", p.display().to_string());
        }
        kv("representation", representation_str(self.strategy.representation).into());
        kv("prototype", self.strategy.prototype.as_str().into());
        kv("negatives", negatives_str(self.strategy.negatives).into());
        kv("memory_bank_capacity", self.memory_bank_capacity.to_string());
        kv("memory_bank_negatives", self.memory_bank_negatives.to_string());
        kv("fixed_sigma2", self.fixed_sigma2.to_string());
        kv("grad_clip", self.grad_clip.to_string());
        let hp = &self.hp;
        kv("tau", hp.tau.to_string());
        kv("delta_s", hp.delta_s.to_string());
        kv("delta_w", hp.delta_w.to_string());
        kv("delta_u", hp.delta_u.to_string());
        kv("beta", hp.beta.to_string());
        kv(
            "vn_scale",
            match hp.vn_scale {
                VnScale::Variance => "variance",
                VnScale::StdDev => "stddev",
            }
            .into(),
        );
        kv("lambda_c0", hp.lambda_c0.to_string());
        kv("alpha_sched", hp.alpha_sched.to_string());
        kv("vn_count", hp.vn_count.to_string());
        kv("anchors_per_class", hp.anchors_per_class.to_string());
        kv("negatives_total", hp.negatives_total.to_string());
        kv("teacher_momentum", hp.teacher_momentum.to_string());
        kv("ema_proto_momentum", hp.ema_proto_momentum.to_string());
        kv("lr_main", hp.lr_main.to_string());
        kv("lr_prob_head", hp.lr_prob_head.to_string());
        kv("temperature_n", hp.temperature_n.to_string());
        kv("hidden", self.hidden.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("batch_labeled", self.batch_labeled.to_string());
        kv("batch_unlabeled", self.batch_unlabeled.to_string());
        kv("total_iters", self.total_iters.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("holdout_fraction", self.holdout_fraction.to_string());
        kv("metric_pixels", self.metric_pixels.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("ablate_rows", self.ablate_rows.iter().map(Strategy::name).collect::<Vec<_>>().join(","));
        kv("ablate_seeds", self.ablate_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        s
    }
}
