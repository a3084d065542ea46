use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use hcp::eval::{read_predictions_csv, save_report, write_pr_csv, write_predictions_csv};
use hcp::harness::pipeline::{
    dump_proposals, gen_data, proposal_recall, run_eval, run_fuse, run_hft, run_ift, run_predict,
    run_pretrain, run_train_objectness,
};
use hcp::harness::{Dataset, PipelineConfig, Split};
use hcp::nn::{Checkpoint, Stage};
use hcp::objectness::ObjectnessModel;
use hcp::{Error, Result};

/// Hypothesis-pooled multi-label image classification pipeline.
#[derive(Parser)]
#[command(name = "hcp", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, `key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory (holds dataset.json).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the objectness scorer on the held-out-category split.
    TrainObjectness {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Also report proposal recall on this split.
        #[arg(long)]
        recall_split: Option<Split>,
    },
    /// Dump proposals as JSON lines.
    Proposals {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        objectness: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dump hypothesis-selection records instead of raw proposals.
        #[arg(long)]
        hs: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-label pre-training.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole-image fine-tuning of a pre-trained checkpoint.
    Ift {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hypothesis fine-tuning of an image-fine-tuned checkpoint.
    Hft {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        objectness: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split; hft checkpoints go through hypotheses, others score whole images.
    Predict {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        objectness: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average precision of a prediction file.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Per-class precision/recall curves as CSV.
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Late fusion of two prediction files.
    Fuse {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Weight of `a`; defaults to the config's late_fusion_weight.
        #[arg(long)]
        weight: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_predictions_csv(file)
}

fn write_scores(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    write_predictions_csv(&mut w, rows)?;
    finish(w, path)
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ckpt.save(path)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    match cli.command {
        Command::GenData { out } => {
            let ds = gen_data(&cfg, &out)?;
            info!("wrote {:?} to {}", ds.info.splits, out.display());
        }
        Command::TrainObjectness { data, out, recall_split } => {
            let ds = Dataset::open(&data.data)?;
            let model = run_train_objectness(&cfg, &ds)?;
            model.save_json(&out)?;
            if let Some(split) = recall_split {
                for (n, r) in proposal_recall(&cfg, &ds, &model, split, &[10, 50, 100, cfg.proposals])? {
                    println!("recall@{n}: {r:.4}");
                }
            }
        }
        Command::Proposals { data, objectness, split, hs, out } => {
            let ds = Dataset::open(&data.data)?;
            let model = ObjectnessModel::load_json(&objectness)?;
            let mut w = create(&out)?;
            dump_proposals(&cfg, &ds, &model, split, hs, &mut w)?;
            finish(w, &out)?;
        }
        Command::Pretrain { data, out } => {
            let ds = Dataset::open(&data.data)?;
            let (ckpt, _) = run_pretrain(&cfg, &ds)?;
            save_checkpoint(&ckpt, &out)?;
        }
        Command::Ift { data, checkpoint, out } => {
            let ds = Dataset::open(&data.data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (next, _) = run_ift(&cfg, &ds, &ckpt)?;
            save_checkpoint(&next, &out)?;
        }
        Command::Hft { data, checkpoint, objectness, out } => {
            let ds = Dataset::open(&data.data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            ckpt.expect_stage(Stage::Ift)?;
            let model = ObjectnessModel::load_json(&objectness)?;
            let (next, _) = run_hft(&cfg, &ds, &ckpt, &model)?;
            save_checkpoint(&next, &out)?;
        }
        Command::Predict { data, checkpoint, objectness, split, out } => {
            let ds = Dataset::open(&data.data)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = objectness.map(ObjectnessModel::load_json).transpose()?;
            let rows = run_predict(&cfg, &ds, split, &ckpt, model.as_ref())?;
            write_scores(&out, &rows)?;
        }
        Command::Eval { data, predictions, split, out, pr_csv } => {
            let ds = Dataset::open(&data.data)?;
            let report = run_eval(&cfg, &ds, split, &read_scores(&predictions)?)?;
            save_report(&report, &out)?;
            if let Some(path) = pr_csv {
                let mut w = create(&path)?;
                write_pr_csv(&mut w, &report)?;
                finish(w, &path)?;
            }
            println!("mAP: {:.4}", report.map);
        }
        Command::Fuse { a, b, weight, out } => {
            let rows = run_fuse(&read_scores(&a)?, &read_scores(&b)?, weight.unwrap_or(cfg.late_fusion_weight))?;
            write_scores(&out, &rows)?;
        }
        Command::ShowConfig => print!("{}", cfg.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
