use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coleaf_core::harness::{
    ablate, ablation_csv, env_seed, evaluate, load_model, load_predictions, predict, save_json,
    save_model, save_predictions, train, Axis, Branch, ModelFile, PredictOptions, TrainConfig,
};
use coleaf_core::metrics::Threshold;
use coleaf_core::synthdata::{generate_corpus, load_corpus, serialize_corpus, CorpusSpec};
use coleaf_core::Error;

/// Weakly supervised audio-visual video parsing on synthetic corpora.
#[derive(Parser)]
#[command(name = "coleaf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write train.jsonl and test.jsonl.
    GenData(GenData),
    /// Train both branches and write a model file.
    Train(TrainArgs),
    /// Write segment-level probabilities for every video of a corpus.
    Predict(PredictArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Train and score every on/off combination of the chosen axes.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenData {
    /// Corpus specification (TOML); desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus (JSONL).
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus scored after every epoch.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Training configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Training log to write (JSON).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// anchor or reference.
    #[arg(long, default_value = "anchor")]
    branch: Branch,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Predictions (JSONL).
    #[arg(long)]
    pred: PathBuf,
    /// Corpus with segment ground truth (JSONL).
    #[arg(long)]
    gt: PathBuf,
    /// A scalar or a comma-separated per-class list.
    #[arg(long)]
    threshold: Option<Threshold>,
    /// Evaluation settings are taken from this training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report file; printed to standard output as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated axes: evt, kd, cls, collaborative, ref_video,
    /// class_tokens, unimodal_only.
    #[arg(long, value_delimiter = ',')]
    axes: Vec<Axis>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV table; printed to standard output as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> coleaf_core::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    }
    .with_env_seed()?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> coleaf_core::Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(command: Command) -> coleaf_core::Result<()> {
    match command {
        Command::GenData(a) => {
            let mut spec = match &a.config {
                Some(p) => CorpusSpec::load(p)?,
                None => CorpusSpec::desk(0, 0),
            };
            spec.n_videos = a.train + a.test;
            if let Some(s) = env_seed()? {
                spec.seed = s;
            }
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let generated = generate_corpus(&spec)?;
            let (train_set, test_set) = generated.corpus.split_at(a.train);
            std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
                path: a.out.clone(),
                source,
            })?;
            serialize_corpus(&train_set, &a.out.join("train.jsonl"))?;
            serialize_corpus(&test_set, &a.out.join("test.jsonl"))?;
            eprintln!(
                "wrote {} training and {} test videos to {}",
                train_set.len(),
                test_set.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::Train(a) => {
            let cfg = train_config(a.config.as_deref(), a.seed)?;
            let corpus = load_corpus(&a.corpus)?;
            let held_out = a.held_out.as_deref().map(load_corpus).transpose()?;
            let (params, log) = train(&corpus, held_out.as_ref(), &cfg)?;
            for e in &log.epochs {
                let held = e
                    .held_out
                    .as_ref()
                    .map(|r| format!(" held-out type_avo {:.2}", r.segment.type_avo))
                    .unwrap_or_default();
                eprintln!(
                    "epoch {:>3} lr {:.2e} loss {:.4}{held}",
                    e.epoch, e.learning_rate, e.loss.total
                );
            }
            if let Some(p) = &a.log {
                save_json(&log, p)?;
            }
            save_model(
                &ModelFile {
                    config: cfg,
                    params,
                },
                &a.out,
            )
        }
        Command::Predict(a) => {
            let model = load_model(&a.model)?;
            let corpus = load_corpus(&a.corpus)?;
            let preds = predict(
                &model.params,
                &corpus,
                &PredictOptions::from_config(&model.config, a.branch),
            )?;
            save_predictions(&preds, &a.out)
        }
        Command::Eval(a) => {
            let cfg = train_config(a.config.as_deref(), None)?;
            let threshold = a.threshold.unwrap_or(cfg.eval_threshold.clone());
            let preds = load_predictions(&a.pred)?;
            let gt = load_corpus(&a.gt)?;
            let report = evaluate(&preds, &gt, &threshold, &cfg.eval())?;
            let text = report.to_text();
            print!("{text}");
            if let Some(p) = &a.out {
                write_text(p, &text)?;
            }
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = train_config(a.config.as_deref(), a.seed)?;
            let train_set = load_corpus(&a.train)?;
            let test_set = load_corpus(&a.test)?;
            let rows = ablate(&train_set, &test_set, &cfg, &a.axes)?;
            let csv = ablation_csv(&rows);
            print!("{csv}");
            if let Some(p) = &a.out {
                write_text(p, &csv)?;
            }
            Ok(())
        }
    }
}
