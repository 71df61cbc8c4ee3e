//! `qpi`: train, evaluate and inspect question paraphrase models.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod run_config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use qpi::autodiff::set_corrupt_backward;
use qpi::checkpoint::{load_checkpoint, load_pretrained_encoder, save_checkpoint, CheckpointMeta};
use qpi::dataset::{load_pairs_tsv, load_standard_splits, Dataset, Split};
use qpi::diagnostics::{pipeline_gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
use qpi::encoder::ModelRng;
use qpi::pipelines::{ParaphraseModel, Pipeline, Prediction, QuestionPair};
use qpi::synthetic::vocab_for;
use qpi::tokenizer::Vocab;
use qpi::training::{count_trainable_params, count_trainable_params_for, error_overlap, evaluate, train, EvalReport};
use qpi::{HeadKind, Precision, Setup};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use run_config::{ConfigFile, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "qpi",
    version,
    about = "Question paraphrase identification with a transformer encoder and CNN head"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct GlobalArgs {
    /// Preset name (`base`, `tiny`) or path to a TOML run configuration.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Directory with train.tsv, dev.tsv and test.tsv.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `siamese` or `ma`.
    #[arg(long, global = true)]
    setup: Option<Setup>,
    /// `cnn` or `mean`.
    #[arg(long, global = true)]
    head: Option<HeadKind>,
    /// Number of top encoder layers to fine-tune.
    #[arg(long, global = true, value_name = "K")]
    trainable_encoders: Option<usize>,
    /// Require the 10,000-pair balanced test split.
    #[arg(long, global = true)]
    strict_split: bool,
    /// Parameter storage precision, `f32` or `f64`.
    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on --data-dir and write checkpoint, history and summary to --out.
    Train,
    /// Evaluate a checkpoint on a TSV file and write per-example predictions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV file; defaults to the test split under --data-dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify one question pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        question_a: String,
        question_b: String,
    },
    /// Trainable parameter count for every number of fine-tuned layers.
    Params,
    /// Compare analytic and numeric gradients of both pipelines on a tiny model.
    Gradcheck {
        /// Deliberately break one backward rule (negative control).
        #[arg(long)]
        corrupt_backward: bool,
        #[arg(long, default_value_t = GRADCHECK_TOL)]
        tol: f64,
    },
    /// Fraction of the first model's errors that the second model gets right.
    Overlap {
        predictions_a: PathBuf,
        predictions_b: PathBuf,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            data_dir: self.data_dir.clone(),
            seed: self.seed,
            setup: self.setup,
            head: self.head,
            trainable_encoders: self.trainable_encoders,
            strict_split: self.strict_split,
            precision: self.precision,
        }
    }

    fn run_config(&self, default_source: Option<&str>) -> anyhow::Result<RunConfig> {
        let file = ConfigFile::from_source(self.config.as_deref().or(default_source))?;
        RunConfig::resolve(file, &self.overrides())
    }

    fn out_dir(&self, default: &str) -> anyhow::Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).map_err(|e| qpi::Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(dir)
    }
}

/// One line of a predictions file.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    index: usize,
    question_a: String,
    question_b: String,
    label: Option<u8>,
    predicted: u8,
    confidence: f64,
    p_duplicate: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<qpi::Error>() {
            return e.exit_code() as u8;
        }
        if cause.is::<toml::de::Error>() {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Train => cmd_train(g),
        Command::Eval { checkpoint, data } => cmd_eval(g, &checkpoint, data.as_deref()),
        Command::Predict {
            checkpoint,
            question_a,
            question_b,
        } => cmd_predict(&checkpoint, question_a, question_b),
        Command::Params => cmd_params(g),
        Command::Gradcheck { corrupt_backward, tol } => cmd_gradcheck(g, corrupt_backward, tol),
        Command::Overlap {
            predictions_a,
            predictions_b,
        } => cmd_overlap(&predictions_a, &predictions_b),
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).map_err(|e| qpi::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_predictions(path: &Path, data: &Dataset, report: &EvalReport) -> anyhow::Result<()> {
    let mut out = String::new();
    for (index, (pair, p)) in data.pairs().iter().zip(&report.predictions).enumerate() {
        let record = PredictionRecord {
            index,
            question_a: pair.question_a.clone(),
            question_b: pair.question_b.clone(),
            label: pair.label,
            predicted: p.label,
            confidence: p.confidence,
            p_duplicate: p.probabilities[1],
        };
        out += &serde_json::to_string(&record)?;
        out.push('\n');
    }
    write_file(path, &out)
}

fn cmd_train(g: &GlobalArgs) -> anyhow::Result<()> {
    let rc = g.run_config(None)?;
    let (train_set, val_set, test_set) = load_standard_splits(rc.data_dir()?, rc.strict_split)?;
    let mut model_config = rc.model.clone();
    let vocab = match &rc.vocab {
        Some(path) => Vocab::load(path)?,
        None => {
            // a vocabulary built here defines the embedding table size
            let v = vocab_for(&[&train_set], rc.min_freq)?;
            model_config.encoder.vocab_size = v.len();
            v
        }
    };
    let mut rng = ModelRng::seed_from_u64(rc.seed);
    let model = ParaphraseModel::new(model_config, &mut rng)?;
    if let Some(path) = &rc.pretrained_encoder {
        let report = load_pretrained_encoder(&model, path)?;
        log::info!(
            "loaded encoder weights from {} ({} unused tensors)",
            path.display(),
            report.extra.len()
        );
    }
    let pipeline = Pipeline::new(model, vocab)?;
    let trainable = count_trainable_params(&pipeline.model);
    log::info!(
        "training {} / {} with {trainable} trainable parameters on {} pairs",
        rc.model.setup,
        rc.model.head,
        train_set.len()
    );

    let start = Instant::now();
    let history = train(&pipeline, &train_set, &val_set, &rc.train, &mut rng)?;
    let wall = start.elapsed().as_secs_f64();
    let best = history.best_epoch.and_then(|b| history.epochs.get(b - 1));
    let test = evaluate(&pipeline, &test_set)?;

    let out = g.out_dir("runs/qpi")?;
    write_file(&out.join("history.jsonl"), &history.to_jsonl())?;
    write_predictions(&out.join("predictions_test.jsonl"), &test_set, &test)?;
    pipeline.vocab.save(out.join("vocab.txt"))?;
    let mut meta = CheckpointMeta {
        seed: Some(rc.seed),
        epoch: history.best_epoch,
        ..CheckpointMeta::default()
    };
    if let Some(b) = best {
        meta.metrics.insert("val_accuracy".into(), b.val_accuracy);
        meta.metrics.insert("val_f1".into(), b.val_f1);
    }
    meta.metrics.insert("test_accuracy".into(), test.accuracy);
    meta.metrics.insert("test_f1".into(), test.f1);
    save_checkpoint(&pipeline.model, Some(&pipeline.vocab), &meta, out.join("model.ckpt"))?;
    let summary = serde_json::json!({
        "seed": rc.seed,
        "setup": rc.model.setup,
        "head": rc.model.head,
        "trainable_encoders": rc.model.trainable_encoders,
        "trainable_params": trainable,
        "epochs_run": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "val_accuracy": best.map(|b| b.val_accuracy),
        "val_f1": best.map(|b| b.val_f1),
        "test_accuracy": test.accuracy,
        "test_f1": test.f1,
        "epoch_wall_time_s": history.epochs.iter().map(|e| e.wall_time_s).collect::<Vec<_>>(),
        "wall_time_s": wall,
    });
    write_file(
        &out.join("summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    println!("test accuracy {:.4}  F1 {:.4}", test.accuracy, test.f1);
    println!("wrote {}", out.display());
    Ok(())
}

fn load_pipeline(checkpoint: &Path) -> anyhow::Result<Pipeline> {
    let loaded = load_checkpoint(checkpoint)?;
    let Some(vocab) = loaded.vocab else {
        bail!(qpi::Error::Config(format!(
            "{} carries no vocabulary",
            checkpoint.display()
        )));
    };
    Ok(Pipeline::new(loaded.model, vocab)?)
}

fn cmd_eval(g: &GlobalArgs, checkpoint: &Path, data: Option<&Path>) -> anyhow::Result<()> {
    let pipeline = load_pipeline(checkpoint)?;
    let path = match (data, &g.data_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => dir.join("test.tsv"),
        (None, None) => bail!(qpi::Error::Usage("pass --data FILE or --data-dir DIR".into())),
    };
    let dataset = load_pairs_tsv(&path, Split::Test)?;
    let report = evaluate(&pipeline, &dataset)?;
    let out = g.out_dir(".")?;
    write_predictions(&out.join("predictions.jsonl"), &dataset, &report)?;
    println!("accuracy {:.4}", report.accuracy);
    println!("F1 {:.4}", report.f1);
    Ok(())
}

fn cmd_predict(checkpoint: &Path, a: String, b: String) -> anyhow::Result<()> {
    let pipeline = load_pipeline(checkpoint)?;
    let Prediction { label, confidence, .. } = pipeline.predict(&QuestionPair::new(a, b, None)?)?;
    println!("{label} {confidence:.4}");
    Ok(())
}

fn cmd_params(g: &GlobalArgs) -> anyhow::Result<()> {
    let rc = g.run_config(None)?;
    let c = &rc.model;
    println!("# {} / {}, {} layers", c.setup, c.head, c.encoder.num_layers);
    println!("k\ttrainable\tmillions");
    let mut stdout = std::io::stdout().lock();
    for k in 0..=c.encoder.num_layers {
        let n = count_trainable_params_for(c, k);
        writeln!(stdout, "{k}\t{n}\t{:.2}", n as f64 / 1e6)?;
    }
    Ok(())
}

fn cmd_gradcheck(g: &GlobalArgs, corrupt: bool, tol: f64) -> anyhow::Result<()> {
    let rc = g.run_config(Some("tiny"))?;
    set_corrupt_backward(corrupt);
    let mut failed = Vec::new();
    for setup in [Setup::Siamese, Setup::MatchedAggregation] {
        let mut config = rc.model.clone();
        config.setup = setup;
        let report = pipeline_gradcheck(&config, rc.seed, GRADCHECK_STEP, tol)?;
        println!(
            "# {setup} / {}: max relative error {:.3e} (tol {tol:.0e})",
            config.head,
            report.max_error()
        );
        for p in &report.params {
            let status = match (p.trainable, p.max_rel_error <= tol) {
                (false, _) => "frozen",
                (true, true) => "ok",
                (true, false) => "FAIL",
            };
            println!("{status}\t{}\t{}\t{:.3e}", p.name, p.numel, p.max_rel_error);
        }
        if !report.passed() {
            failed.extend(
                report
                    .worst(5)
                    .into_iter()
                    .map(|p| format!("{setup}:{} ({:.2e})", p.name, p.max_rel_error)),
            );
        }
    }
    set_corrupt_backward(false);
    if !failed.is_empty() {
        bail!(qpi::Error::Numeric(format!(
            "gradient check failed; worst: {}",
            failed.join(", ")
        )));
    }
    println!("gradient check passed");
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| qpi::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| qpi::Error::Data(format!("{} line {}: {e}", path.display(), i + 1)).into())
        })
        .collect()
}

fn cmd_overlap(a: &Path, b: &Path) -> anyhow::Result<()> {
    let (ra, rb) = (read_predictions(a)?, read_predictions(b)?);
    if ra.len() != rb.len() {
        bail!(qpi::Error::Data(format!(
            "prediction files differ in length: {} vs {}",
            ra.len(),
            rb.len()
        )));
    }
    let mut labels = Vec::with_capacity(ra.len());
    for (x, y) in ra.iter().zip(&rb) {
        match (x.label, y.label) {
            (Some(l), Some(m)) if l == m => labels.push(l),
            _ => bail!(qpi::Error::Data(format!(
                "example {} has missing or disagreeing gold labels",
                x.index
            ))),
        }
    }
    let pa: Vec<u8> = ra.iter().map(|r| r.predicted).collect();
    let pb: Vec<u8> = rb.iter().map(|r| r.predicted).collect();
    match error_overlap(&pa, &pb, &labels)? {
        Some(f) => println!("error overlap {f:.4}"),
        None => println!("error overlap undefined (first model makes no errors)"),
    }
    Ok(())
}
