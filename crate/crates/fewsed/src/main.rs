//! Command-line interface for the few-shot sound event detection pipeline.

use clap::{Args, Parser, Subcommand};
use fewsed::audio::{dump_features, NormStats};
use fewsed::encoder::{load_checkpoint, save_checkpoint};
use fewsed::error::Error;
use fewsed::eval::{read_event_csv, score, EventList, ScoreReport};
use fewsed::pipeline::{
    adapt_detection, run_detection, synth_corpus, train_base_from_manifest, CorpusManifest,
    RunConfig, SynthSpec,
};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fewsed", version, about = "Few-shot sound event detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus key=value overrides shared by the pipeline commands.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file; flags and --set win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set lr_w=1e-2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Lift the epochs_w range guard.
    #[arg(long = "override")]
    override_guard: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.override_guard {
            cfg.override_guard = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (WAVs, annotations, manifest).
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        base_files: usize,
        #[arg(long, default_value_t = 8)]
        test_files: usize,
        /// Number of tonal base classes.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10.0)]
        snr_db: f64,
        /// Approximate events per second.
        #[arg(long, default_value_t = 0.7)]
        event_rate: f64,
        /// Rate of unannotated distractor sounds in test files.
        #[arg(long, default_value_t = 0.5)]
        distractor_rate: f64,
        #[arg(long, default_value_t = 15.0)]
        base_duration: f64,
        #[arg(long, default_value_t = 20.0)]
        test_duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the encoder on the manifest's base split.
    TrainBase {
        #[arg(long)]
        manifest: PathBuf,
        /// Encoder checkpoint to write.
        #[arg(long)]
        encoder: PathBuf,
        /// Normalization stats JSON to write.
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Transductive adaptation only; emits per-episode JSON records.
    Adapt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Report JSON to write.
        #[arg(long)]
        report: PathBuf,
        /// Classifier update epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Classifier learning rate.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        lambda_ce: Option<f64>,
        /// Score raw prototypes without any update.
        #[arg(long)]
        no_update: bool,
        /// Loss: none, ce, mi or ce+mi.
        #[arg(long)]
        loss: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Full detection run: episode, transductive inference, mutual learning,
    /// event extraction, scoring.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Report JSON to write.
        #[arg(long)]
        report: PathBuf,
        /// Mutual-learning iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Pseudo-label confidence threshold.
        #[arg(long)]
        tau: Option<f64>,
        /// Contrastive negatives cap per step.
        #[arg(long)]
        negatives_cap: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a prediction CSV against a reference CSV.
    Score {
        /// Predictions (Audiofilename,Starttime,Endtime CSV).
        #[arg(long)]
        pred: PathBuf,
        /// Reference (same format).
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        iou_min: f64,
        /// Report JSON to write.
        #[arg(long)]
        report: PathBuf,
    },
    /// Feature utilities.
    Features {
        #[command(subcommand)]
        command: FeaturesCommand,
    },
}

#[derive(Subcommand)]
enum FeaturesCommand {
    /// Dump the log-mel features of one WAV to a binary matrix file.
    Dump {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Optional normalization stats JSON.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn init_workers() {
    if let Ok(n) = std::env::var("FEWSED_WORKERS") {
        if let Ok(n) = n.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        } else {
            eprintln!("warning: ignoring non-numeric FEWSED_WORKERS='{n}'");
        }
    }
}

/// 0 = success, 1 = failure (including any per-file failure), 2 = config error.
fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Synth {
            out,
            base_files,
            test_files,
            classes,
            snr_db,
            event_rate,
            distractor_rate,
            base_duration,
            test_duration,
            seed,
        } => {
            let spec = SynthSpec {
                n_base_files: base_files,
                n_test_files: test_files,
                class_count: classes,
                event_rate,
                distractor_rate,
                snr_db,
                base_duration_s: base_duration,
                test_duration_s: test_duration,
                sample_rate: 22050,
                seed,
            };
            let manifest = synth_corpus(&spec, &out)?;
            println!(
                "wrote {} files under {}",
                manifest.entries.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainBase {
            manifest,
            encoder,
            stats,
            config,
        } => {
            let cfg = config.build()?;
            let manifest = CorpusManifest::load(&manifest)?;
            let out = train_base_from_manifest(&manifest, &cfg)?;
            save_checkpoint(&encoder, &out.encoder)?;
            out.stats.save(&stats)?;
            for (i, loss) in out.epoch_losses.iter().enumerate() {
                println!("epoch {:2}: loss {loss:.6}", i + 1);
            }
            println!(
                "trained on classes {:?} (+background); checkpoint {}",
                out.class_names,
                encoder.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Adapt {
            manifest,
            encoder,
            stats,
            report,
            epochs,
            lr,
            lambda_ce,
            no_update,
            loss,
            config,
        } => {
            let mut cfg = config.build()?;
            if let Some(e) = epochs {
                cfg.epochs_w = e;
            }
            if let Some(lr) = lr {
                cfg.lr_w = lr;
            }
            if let Some(l) = lambda_ce {
                cfg.lambda_ce = l;
            }
            if let Some(loss) = loss {
                cfg.loss = loss.parse()?;
            }
            if no_update {
                cfg.loss = fewsed::pipeline::TiMode::None;
            }
            cfg.validate()?;
            let manifest = CorpusManifest::load(&manifest)?;
            let enc = load_checkpoint(&encoder)?;
            let stats = NormStats::load(&stats)?;
            let out = adapt_detection(&cfg, &manifest, &enc, &stats)?;
            write_json(&report, &out)?;
            let failures = out.episodes.iter().filter(|e| e.error.is_some()).count();
            for ep in &out.episodes {
                match &ep.error {
                    Some(err) => println!("{}: FAILED: {err}", ep.file),
                    None => println!(
                        "{}: {} support / {} query, marginal P(pos) {:.3}",
                        ep.file, ep.n_support, ep.n_query, ep.marginal[0]
                    ),
                }
            }
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Run {
            manifest,
            encoder,
            stats,
            report,
            iterations,
            tau,
            negatives_cap,
            config,
        } => {
            let mut cfg = config.build()?;
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            if let Some(t) = tau {
                cfg.tau = t;
            }
            if let Some(n) = negatives_cap {
                cfg.negatives_cap = n;
            }
            cfg.validate()?;
            let manifest = CorpusManifest::load(&manifest)?;
            let enc = load_checkpoint(&encoder)?;
            let stats = NormStats::load(&stats)?;
            let out = run_detection(&cfg, &manifest, &enc, &stats)?;
            write_json(&report, &out)?;
            let failures = out.files.iter().filter(|f| f.error.is_some()).count();
            for f in &out.files {
                match (&f.error, &f.score) {
                    (Some(err), _) => println!("{}: FAILED: {err}", f.file),
                    (None, Some(s)) => println!(
                        "{}: P {:.3} R {:.3} F {:.3} ({} pred / {} ref)",
                        f.file, s.precision, s.recall, s.f_score, f.n_pred_events, f.n_ref_events
                    ),
                    _ => {}
                }
            }
            let a = &out.aggregate;
            println!(
                "aggregate: P {:.3} R {:.3} F {:.3} (tp {} fp {} fn {})",
                a.precision, a.recall, a.f_score, a.tp, a.fp, a.fn_
            );
            Ok(if failures == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Score {
            pred,
            reference,
            iou_min,
            report,
        } => {
            let pred_files = read_event_csv(&pred)?;
            let ref_files = read_event_csv(&reference)?;

            #[derive(Serialize)]
            struct ScoreOutput {
                files: Vec<(String, ScoreReport)>,
                aggregate: ScoreReport,
            }
            let mut files = Vec::new();
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (name, ref_events) in &ref_files {
                let empty = EventList::empty();
                let pred_events = pred_files
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, e)| e)
                    .unwrap_or(&empty);
                let s = score(pred_events, ref_events, iou_min);
                tp += s.tp;
                fp += s.fp;
                fn_ += s.fn_;
                files.push((name.clone(), s));
            }
            // predictions for files absent from the reference are all false positives
            for (name, pred_events) in &pred_files {
                if !ref_files.iter().any(|(n, _)| n == name) {
                    let s = score(pred_events, &EventList::empty(), iou_min);
                    fp += s.fp;
                    files.push((name.clone(), s));
                }
            }
            let aggregate = ScoreReport::from_counts(tp, fp, fn_);
            println!("{:<24} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}", "file", "tp", "fp", "fn", "prec", "rec", "f");
            for (name, s) in &files {
                println!(
                    "{:<24} {:>6} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3}",
                    name, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f_score
                );
            }
            println!(
                "{:<24} {:>6} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3}",
                "aggregate",
                aggregate.tp,
                aggregate.fp,
                aggregate.fn_,
                aggregate.precision,
                aggregate.recall,
                aggregate.f_score
            );
            write_json(&report, &ScoreOutput { files, aggregate })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Features { command } => match command {
            FeaturesCommand::Dump {
                input,
                output,
                stats,
                config,
            } => {
                let cfg = config.build()?;
                let stats = match stats {
                    Some(path) => Some(NormStats::load(&path)?),
                    None => None,
                };
                dump_features(&input, &output, &cfg.feature_config(), stats.as_ref())?;
                println!("wrote {}", output.display());
                Ok(ExitCode::SUCCESS)
            }
        },
    }
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
