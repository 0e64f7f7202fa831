use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prcl_core::ablate::run_ablation;
use prcl_core::checkpoint::Checkpoint;
use prcl_core::config::keys_help;
use prcl_core::datagen;
use prcl_core::train::{eval_checkpoint, train_to_dir};
use prcl_core::{PrclError, Result, RunConfig};

#[derive(Parser)]
#[command(name = "prcl", version, about = "Probabilistic prototype contrastive learning on synthetic segmentation scenes")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data and model seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `<out>/dataset.bin`.
    GenData(Common),
    /// Train one model; writes metrics.csv, timing.csv, embeddings.jsonl and checkpoint.bin.
    Train(Common),
    /// Evaluate a checkpoint on the held-out split of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run every strategy row for every seed; writes summary.csv and aggregate.csv.
    Ablate(Common),
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse_str(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let data = datagen::generate(&cfg.data)?;
    let path = cfg.output_dir.join("dataset.bin");
    datagen::export_scenes(&cfg.data, &data.all_scenes(), &path)?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let path = gen_data(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let outcome = train_to_dir(&cfg)?;
            let last = outcome.last();
            println!(
                "{} iterations, val mIoU {:.4}, {:.3} ms/iter, artifacts in {}",
                last.iteration,
                last.eval.miou,
                outcome.ms_per_iter,
                cfg.output_dir.display()
            );
        }
        Command::Eval { common, checkpoint, dataset } => {
            let cfg = load_config(&common)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let csv = eval_checkpoint(&ck, &dataset, cfg.holdout_fraction, cfg.metric_pixels)?;
            if let Some(out) = &common.out {
                fs::create_dir_all(out)?;
                fs::write(out.join("eval.csv"), &csv)?;
            }
            print!("{csv}");
        }
        Command::Ablate(common) => {
            let cfg = load_config(&common)?;
            let out: &Path = &cfg.output_dir;
            let report = run_ablation(&cfg, Some(out))?;
            print!("{}", report.aggregate_csv(&cfg.ablate_rows));
            let failed = report.runs.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                eprintln!("{failed} sub-run(s) failed; see summary.csv");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let PrclError::Numeric(_) = e {
                eprintln!("training aborted; lower the learning rate or check the config");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
