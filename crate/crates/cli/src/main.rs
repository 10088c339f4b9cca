use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acnet_core::data::SyntheticSpec;
use acnet_core::persist::{
    eval_checkpoint, export_synthetic, infer_image, inspect_checkpoint, read_config, run_training, RunConfig,
};
use acnet_core::train::model_gradcheck;
use acnet_numeric::gradcheck::{primitive_suite, GradcheckReport, GRADCHECK_TOLERANCE};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acnet", version, about = "Attention convolutional binary neural tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run two-stage training.
    Train {
        /// Config file; every key is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (defaults to the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report top-1, per-leaf and per-class accuracy.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of class folders; defaults to the checkpoint's test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the JSON report (defaults to `<ckpt>.eval.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank classes for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Write gate/leaf report and Grad-CAM heatmaps for one image.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a synthetic glyph data set as PPM class folders.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn train(config: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let out = out.unwrap_or_else(|| cfg.output.clone());
    let records = run_training(&cfg, &out, resume)?;
    if let Some(last) = records.last() {
        println!(
            "{} epochs; last: stage {} epoch {} train_top1 {:.4} val_top1 {:.4}",
            records.len(),
            last.stage,
            last.epoch,
            last.train_top1,
            last.val_top1
        );
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: Option<&Path>, report: Option<PathBuf>) -> Result<()> {
    let r = eval_checkpoint(ckpt, data)?;
    let json = serde_json::to_string_pretty(&r)?;
    println!("{json}");
    let path = report.unwrap_or_else(|| ckpt.with_extension("eval.json"));
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_reports(reports: &[GradcheckReport]) -> bool {
    let mut ok = true;
    for r in reports {
        let pass = r.passed();
        ok &= pass;
        println!("{} {:<48} {:.3e}", if pass { "ok  " } else { "FAIL" }, r.name, r.max_rel_error);
    }
    ok
}

fn gradcheck(seed: u64) -> Result<bool> {
    let primitives = primitive_suite(seed)?;
    let model = model_gradcheck(seed)?;
    let ok = print_reports(&primitives) & print_reports(&model);
    println!(
        "{} checks, tolerance {GRADCHECK_TOLERANCE:e}: {}",
        primitives.len() + model.len(),
        if ok { "passed" } else { "FAILED" }
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, seed, resume } => train(config.as_deref(), out, seed, resume.as_deref())?,
        Command::Eval { ckpt, data, report } => eval(&ckpt, data.as_deref(), report)?,
        Command::Infer { ckpt, image, topk } => {
            for (class, p) in infer_image(&ckpt, &image, topk)? {
                println!("{class}\t{p:.6}");
            }
        }
        Command::Inspect { ckpt, image, out } => {
            let r = inspect_checkpoint(&ckpt, &image, &out)?;
            print!("{}", r.to_text());
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
        Command::GenData { out, classes, per_class, side, seed } => {
            export_synthetic(&SyntheticSpec::new(classes, per_class, side, seed), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Gradcheck { seed } => return gradcheck(seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
