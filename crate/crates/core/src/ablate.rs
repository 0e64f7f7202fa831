//! Strategy grid × seeds sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{RunConfig, Strategy};
use crate::error::Result;
use crate::train::{run_training, RunOutcome};

/// Column order of `summary.csv`, one line per (strategy, seed).
pub const SUMMARY_HEADER: &str = "strategy,seed,status,miou,silhouette,dbi,neg_state_bytes,ms_per_iter";
/// Column order of `aggregate.csv`, one line per strategy.
pub const AGGREGATE_HEADER: &str =
    "strategy,runs,failed,miou_mean,miou_std,silhouette_mean,dbi_mean,neg_state_bytes,ms_per_iter";

/// Result of one sub-run. Failures keep the error text so the grid can go on.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

impl AblationRun {
    pub fn dir_name(&self) -> String {
        run_dir_name(&self.strategy, self.seed)
    }

    fn summary_line(&self) -> String {
        let name = self.strategy.name();
        match &self.outcome {
            Ok(o) => {
                let r = o.last();
                format!(
                    "{},{},ok,{},{},{},{},{:.4}",
                    name,
                    self.seed,
                    r.eval.miou,
                    fmt_opt(r.eval.silhouette),
                    fmt_opt(r.eval.dbi),
                    r.neg_state_bytes,
                    o.ms_per_iter
                )
            }
            Err(e) => format!("{name},{},failed: {},nan,nan,nan,0,nan", self.seed, e.replace([',', '\n'], ";")),
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn run_dir_name(strategy: &Strategy, seed: u64) -> String {
    format!("{}_seed{}", strategy.name(), seed)
}

/// Sub-run config: the base config with strategy, seed and output directory
/// overridden.
pub fn sub_config(base: &RunConfig, strategy: Strategy, seed: u64, out: &Path) -> RunConfig {
    let mut cfg = base.clone();
    cfg.strategy = strategy;
    cfg.hp.seed = seed;
    cfg.data.seed = seed;
    cfg.output_dir = out.join(run_dir_name(&strategy, seed));
    cfg
}

/// All sub-runs, ordered by strategy row then seed.
#[derive(Debug, Clone)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

/// Per-strategy summary statistics over successful seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSummary {
    pub strategy: Strategy,
    pub runs: usize,
    pub failed: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub silhouette_mean: f64,
    pub dbi_mean: f64,
    pub neg_state_bytes: f64,
    pub ms_per_iter: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl AblationReport {
    pub fn rows(&self, strategies: &[Strategy]) -> Vec<RowSummary> {
        strategies
            .iter()
            .map(|s| {
                let ok: Vec<&RunOutcome> = self
                    .runs
                    .iter()
                    .filter(|r| r.strategy == *s)
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .collect();
                let total = self.runs.iter().filter(|r| r.strategy == *s).count();
                let miou: Vec<f64> = ok.iter().map(|o| o.last().eval.miou).collect();
                let m = mean(&miou);
                // sample standard deviation; zero for a single seed
                let std = if miou.len() > 1 {
                    (miou.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (miou.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                let sil: Vec<f64> = ok.iter().filter_map(|o| o.last().eval.silhouette).collect();
                let dbi: Vec<f64> = ok.iter().filter_map(|o| o.last().eval.dbi).collect();
                let bytes: Vec<f64> = ok.iter().map(|o| o.last().neg_state_bytes as f64).collect();
                let ms: Vec<f64> = ok.iter().map(|o| o.ms_per_iter).collect();
                RowSummary {
                    strategy: *s,
                    runs: total,
                    failed: total - ok.len(),
                    miou_mean: m,
                    miou_std: std,
                    silhouette_mean: mean(&sil),
                    dbi_mean: mean(&dbi),
                    neg_state_bytes: mean(&bytes),
                    ms_per_iter: mean(&ms),
                }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(SUMMARY_HEADER);
        s.push('\n');
        for r in &self.runs {
            s.push_str(&r.summary_line());
            s.push('\n');
        }
        s
    }

    pub fn aggregate_csv(&self, strategies: &[Strategy]) -> String {
        let mut s = String::from(AGGREGATE_HEADER);
        s.push('\n');
        for r in self.rows(strategies) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.4}",
                r.strategy.name(),
                r.runs,
                r.failed,
                r.miou_mean,
                r.miou_std,
                r.silhouette_mean,
                r.dbi_mean,
                r.neg_state_bytes,
                r.ms_per_iter
            );
        }
        s
    }
}

/// Runs every strategy row of `base.ablate_rows` for every seed in
/// `base.ablate_seeds`. Sub-runs execute on the rayon pool; each one is
/// deterministic on its own. When `out` is given, each sub-run writes its
/// artifacts to `<out>/<strategy>_seed<k>` and the grid writes `summary.csv`
/// and `aggregate.csv`.
pub fn run_ablation(base: &RunConfig, out: Option<&Path>) -> Result<AblationReport> {
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let jobs: Vec<(Strategy, u64)> = base
        .ablate_rows
        .iter()
        .flat_map(|s| base.ablate_seeds.iter().map(move |&k| (*s, k)))
        .collect();
    let runs: Vec<AblationRun> = jobs
        .into_par_iter()
        .map(|(strategy, seed)| {
            let cfg = sub_config(base, strategy, seed, &root);
            let outcome = run_training(&cfg).and_then(|o| {
                if out.is_some() {
                    o.write(&cfg, &cfg.output_dir)?;
                }
                Ok(o)
            });
            AblationRun {
                strategy,
                seed,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    let report = AblationReport { runs };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), report.summary_csv())?;
        fs::write(dir.join("aggregate.csv"), report.aggregate_csv(&base.ablate_rows))?;
    }
    Ok(report)
}
