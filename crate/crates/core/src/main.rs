use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use clsrec::checkpoint::Checkpoint;
use clsrec::config::{Ablation, ModelKind, RunConfig};
use clsrec::data::{load_ciao, load_lastfm, Dataset, Split};
use clsrec::train::{evaluate_checkpoint, fit, gate_report, recommend};
use clsrec::Error;
use mimalloc::MiMalloc;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

#[derive(Parser)]
#[command(name = "clsrec", version, about = "Social recommendation with contrastive alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Lastfm,
    Ciao,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Tsv,
}

#[derive(Subcommand)]
enum Command {
    /// Load a raw dump, split it and write a dataset cache.
    PrepareData {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Minimum rating counted as a positive (ciao only).
        #[arg(long, default_value_t = 0.0)]
        positive_threshold: f64,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Plain-text `key = value` file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report ranking metrics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        cold_threshold: usize,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Write per-user gate weights as TSV.
        #[arg(long)]
        dump_gates: Option<PathBuf>,
    },
    /// Print the top-K unseen items for one user.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        user: u64,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> clsrec::Result<()> {
    match cli.command {
        Command::PrepareData {
            dataset,
            input,
            output,
            seed,
            positive_threshold,
        } => {
            let corpus = match dataset {
                DatasetKind::Lastfm => load_lastfm(&input)?,
                DatasetKind::Ciao => load_ciao(&input, positive_threshold)?,
            };
            let data = corpus.split(seed)?;
            data.validate()?;
            let summary_path = data.save(&output)?;
            println!("{}", serde_json::to_string_pretty(&data.summary())?);
            info!("wrote {} and {}", output.display(), summary_path.display());
        }
        Command::Train {
            data,
            model,
            ablation,
            config,
            overrides,
            out,
            seed,
        } => {
            let dataset = Dataset::load(&data)?;
            let mut cfg = RunConfig::new(model);
            if let Some(path) = config {
                let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
                    _ => Error::Io(e),
                })?;
                cfg.apply_text(&text)?;
            }
            for pair in &overrides {
                cfg.apply_override(pair)?;
            }
            if let Some(a) = ablation {
                cfg.ablation = a;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let cfg = cfg.finalize()?;
            let ckpt = fit(&dataset, &cfg, |r| {
                println!(
                    "epoch={} loss_bpr={:.6} loss_cl={:.6} val_recall20={:.6}",
                    r.epoch, r.loss_bpr, r.loss_cl, r.val_recall20
                );
            })?;
            ckpt.save(&out)?;
            println!(
                "best_epoch={} val_recall20={:.6} epochs_run={}",
                ckpt.meta.best_epoch, ckpt.meta.best_val_recall20, ckpt.meta.epochs_run
            );
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            k,
            cold_threshold,
            format,
            dump_gates,
        } => {
            if split == Split::Train {
                return Err(Error::Config("--split must be val or test".into()));
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let report = evaluate_checkpoint(&ckpt, &dataset, split, &k, cold_threshold)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Tsv => print!("{}", report.to_tsv()),
            }
            if let Some(path) = dump_gates {
                fs::write(&path, gate_report(&ckpt, &dataset)?)?;
            }
        }
        Command::Recommend {
            checkpoint,
            data,
            user,
            k,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&data)?;
            let index = dataset
                .user_index(user)
                .ok_or_else(|| Error::InvalidInput(format!("unknown user id {user}")))?;
            let list = recommend(&ckpt, &dataset, index, k)?;
            if list.len() < k {
                warn!("only {} items available for user {user}", list.len());
            }
            for (item, score) in list {
                println!("{}\t{score:.6}", dataset.item_ids[item]);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
