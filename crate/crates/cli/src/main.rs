use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mirssl_core::config::RunConfig;
use mirssl_core::encoder::Paradigm;
use mirssl_core::metrics::MetricReport;
use mirssl_core::pipeline::{self, REPORT_JSON, REPORT_TEXT};
use mirssl_core::synth::{gen_corpus, SynthSpec, SynthTask};
use mirssl_core::CoreError;

#[derive(Parser)]
#[command(name = "mirssl", version, about = "Self-supervised music encoders: synthesis, pre-training, probing, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed; overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Threads for audio loading, features and embedding extraction.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus with its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// pitch, beat, key, tags or emotion
        #[arg(long)]
        task: SynthTask,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long, default_value_t = 16000)]
        sample_rate: u32,
    },
    /// Extract MFCC or chroma features for every manifest entry.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Fit a codebook and write pseudo-labels.
    Kmeans {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Feature directory (first iteration).
        #[arg(long, required_unless_present = "iter2", conflicts_with = "iter2")]
        features: Option<PathBuf>,
        /// Cluster a hidden layer of this checkpoint instead.
        #[arg(long)]
        iter2: Option<PathBuf>,
        /// Encoder output index for --iter2 (0 is the conv output).
        #[arg(long, requires = "iter2")]
        layer: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Pre-train an encoder; writes checkpoints and a loss log.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Pseudo-label directory (discrete paradigm).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Feature directory (multi-iteration discrete runs).
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// discrete or continuous
        #[arg(long)]
        paradigm: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train a probe on a frozen checkpoint and predict the test split.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Task name in reports; defaults to the label file's directory.
        #[arg(long)]
        task: Option<String>,
    },
    /// Score predictions against labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate despite configuration, label or manifest hash mismatches.
        #[arg(long)]
        force: bool,
    },
    /// Merge metric reports into one results table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CoreError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), CoreError> {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

fn run(cmd: Command) -> Result<(), CoreError> {
    match cmd {
        Command::Synth {
            common,
            task,
            n,
            duration,
            sample_rate,
        } => {
            let cfg = load_config(&common)?;
            let spec = SynthSpec {
                task,
                n_clips: n,
                duration,
                seed: cfg.seed,
                sample_rate,
            };
            let out = &common.out;
            let manifest = pipeline::guarded(out, || gen_corpus(&spec, out))?;
            println!("{}", manifest.display());
        }
        Command::Features { common, manifest } => {
            let cfg = load_config(&common)?;
            let n = pipeline::extract_features(&manifest, &cfg, &common.out, common.workers)?;
            println!("wrote features for {n} clips to {}", common.out.display());
        }
        Command::Kmeans {
            common,
            manifest,
            features,
            iter2,
            layer,
            k,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.quantize.k = k;
            }
            cfg.validate()?;
            let s = match (features, iter2) {
                (_, Some(ck)) => pipeline::fit_codebook_from_checkpoint(
                    &manifest,
                    &ck,
                    layer,
                    &cfg,
                    &common.out,
                    common.workers,
                )?,
                (Some(f), None) => pipeline::fit_codebook(&manifest, &f, &cfg, &common.out)?,
                (None, None) => unreachable!("clap requires one input"),
            };
            println!("codebook k={} after {} iterations", s.k, s.iterations);
        }
        Command::Pretrain {
            common,
            manifest,
            labels,
            features,
            resume,
            paradigm,
            steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = paradigm {
                cfg.pretrain.paradigm = match p.as_str() {
                    "discrete" => Paradigm::Discrete,
                    "continuous" => Paradigm::Continuous,
                    other => {
                        return Err(CoreError::Config {
                            path: "pretrain.paradigm".into(),
                            detail: format!("unknown paradigm `{other}`"),
                        })
                    }
                };
            }
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            cfg.validate()?;
            let ck = pipeline::pretrain(
                &manifest,
                labels.as_deref(),
                features.as_deref(),
                &cfg,
                &common.out,
                resume.as_deref(),
                common.workers,
            )?;
            println!("{}", ck.display());
        }
        Command::Probe {
            common,
            checkpoint,
            manifest,
            labels,
            task,
        } => {
            let cfg = load_config(&common)?;
            let task = task.unwrap_or_else(|| pipeline::task_name(&labels));
            let out = pipeline::probe(
                &checkpoint,
                &manifest,
                &labels,
                &task,
                &cfg,
                &common.out,
                common.workers,
            )?;
            println!("best validation score {:.4}", out.best_valid);
            println!("{}", out.predictions.display());
        }
        Command::Eval {
            common,
            predictions,
            labels,
            manifest,
            force,
        } => {
            let cfg = load_config(&common)?;
            let report = pipeline::evaluate(&predictions, &labels, manifest.as_deref(), &cfg, force)?;
            pipeline::write_report(&report, &common.out)?;
            print!("{}", report.to_text());
        }
        Command::Report { common, reports } => {
            let parsed = reports
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
                    MetricReport::from_json(&text).map_err(|e| CoreError::format(p, e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let table = pipeline::consolidate(&parsed);
            let out = &common.out;
            pipeline::guarded(out, || {
                std::fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
                write(&out.join(REPORT_TEXT), &table.to_text())?;
                write(&out.join(REPORT_JSON), &(table.to_json() + "\n"))
            })?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
