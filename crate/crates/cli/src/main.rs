//! `cseg`: synthetic data generation, training, evaluation and the
//! verification suite.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or I/O
//! error, 3 numerical failure, 4 incompatible checkpoint.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cseg::checkpoint;
use cseg::config::{train_run, RunConfig};
use cseg::losses::{summarize, MaskMap};
use cseg::model::predict;
use cseg::synth::{
    encode_pgm, gen_dataset, load_dataset, read_manifest, write_atomic, write_dataset,
};
use cseg::train::Batch;
use cseg::verify::{self, Fault, VerifyOptions};
use cseg::Error;

#[derive(Parser)]
#[command(
    name = "cseg",
    version,
    about = "Nucleus segmentation with sample reweighting on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PPM images, PGM masks, JSON-lines manifest).
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train on a generated dataset; writes the checkpoint, per-epoch history and test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep sample weights uniform.
        #[arg(long)]
        no_cim: bool,
        /// Merge the two encoder branches with a 1x1 convolution of their sum.
        #[arg(long)]
        no_dac: bool,
    },
    /// Evaluate a checkpoint on a dataset and write predicted masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the property suite; exits 1 if any property fails.
    Verify {
        /// Also run the training experiments (several minutes).
        #[arg(long)]
        full: bool,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    FocalGradSign,
}

/// Command failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Checkpoint(_) => 4,
            Error::NonFinite(_)
            | Error::DegenerateReduction { .. }
            | Error::NonScalarLoss(_)
            | Error::TapeConsumed => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, out, count } => cmd_gen(&config, &out, count),
        Command::Train {
            config,
            data,
            out,
            no_cim,
            no_dac,
        } => cmd_train(&config, &data, &out, no_cim, no_dac),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Command::Verify { full, inject_fault } => cmd_verify(full, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn to_json(value: &serde_json::Value) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn cmd_gen(config: &Path, out: &Path, count: usize) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let samples = gen_dataset(&cfg.synthetic, count)?;
    write_dataset(out, &samples)?;
    println!(
        "generated {count} samples in {} (data seed {}, {} domains{})",
        out.display(),
        cfg.synthetic.seed,
        cfg.synthetic.domains.len(),
        cfg.synthetic
            .heldout_domain()
            .map(|d| format!(", anti-correlated domain {d}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, no_cim: bool, no_dac: bool) -> CmdResult {
    let mut cfg = RunConfig::load(config)?;
    cfg.train.cim_enabled &= !no_cim;
    cfg.model.use_dac &= !no_dac;
    cfg.validate()?;
    let dataset = load_dataset(data)?;
    let mut history = String::new();
    let outcome = train_run(&cfg, &dataset, |r| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  val dsc {:.2}  val miou {:.2}  lr {:.2e}",
            r.epoch, r.loss, r.val_dsc, r.val_miou, r.lr
        );
        history.push_str(&serde_json::to_string(r).expect("records serialize"));
        history.push('\n');
    })?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let metrics = serde_json::json!({
        "miou_mean": outcome.test.miou.mean,
        "miou_std": outcome.test.miou.std,
        "dsc_mean": outcome.test.dsc.mean,
        "dsc_std": outcome.test.dsc.std,
        "best_epoch": outcome.history.best_epoch,
        "epochs_run": outcome.history.epochs.len(),
        "test_samples": outcome.split.test.len(),
    });
    write_atomic(
        &out.join("config.json"),
        to_json(&serde_json::to_value(&cfg).map_err(Error::from)?)?.as_bytes(),
    )?;
    write_atomic(&out.join("history.jsonl"), history.as_bytes())?;
    checkpoint::save(&outcome.model, &out.join("model.cseg"))?;
    write_atomic(&out.join("metrics.json"), to_json(&metrics)?.as_bytes())?;
    print!("{}", to_json(&metrics)?);
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, data: &Path) -> CmdResult {
    let model = checkpoint::load(checkpoint_path)?;
    let entries = read_manifest(data)?;
    let samples = load_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{} lists no samples", data.display())).into());
    }
    let batch = Batch::from_samples(&samples)?;
    let size = model.cfg.image_size;
    if batch.images.shape()[2..] != [size, size] {
        return Err(Error::Config(format!(
            "dataset images are {:?}, the checkpoint expects {size}x{size}",
            &batch.images.shape()[2..]
        ))
        .into());
    }
    let pred = MaskMap::argmax(&predict(&model, &batch.images, 8)?)?;
    let summary = summarize(&pred, &batch.masks)?;

    let pred_dir = data.join("predictions");
    std::fs::create_dir_all(&pred_dir).map_err(|e| Error::Io {
        path: pred_dir.clone(),
        source: e,
    })?;
    let mut per_image = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let path = pred_dir.join(format!("{:05}.pgm", entry.sample_id));
        write_atomic(&path, &encode_pgm(&pred.image(i)))?;
        per_image.push(serde_json::json!({
            "sample_id": entry.sample_id,
            "miou": summary.per_image_miou[i],
            "dsc": summary.per_image_dsc[i],
        }));
    }
    let metrics = serde_json::json!({
        "miou_mean": summary.miou.mean,
        "miou_std": summary.miou.std,
        "dsc_mean": summary.dsc.mean,
        "dsc_std": summary.dsc.std,
        "per_image": per_image,
    });
    let text = to_json(&metrics)?;
    write_atomic(&data.join("eval_metrics.json"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn cmd_verify(full: bool, fault: Option<FaultArg>) -> CmdResult {
    let opts = VerifyOptions {
        full,
        fault: fault.map(|FaultArg::FocalGradSign| Fault::FocalGradSign),
    };
    let outcomes = verify::run_all(opts, |o| println!("{o}"));
    let failed: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        println!("all {} properties passed", outcomes.len());
        return Ok(());
    }
    let mut message = format!("{} of {} properties failed:", failed.len(), outcomes.len());
    for name in failed {
        let _ = write!(message, " {name};");
    }
    Err(Failure {
        code: 1,
        message: message.trim_end_matches(';').to_string(),
    })
}
