use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vqmir_core::datalab::SynthCorpusSpec;
use vqmir_core::evalkit::read_report;
use vqmir_core::numerics::Precision;
use vqmir_core::pipeline::{
    run_grid, run_pipeline, self_checks, DataSource, ExperimentConfig, RunOptions, Stage,
    VariantKind,
};
use vqmir_core::Error;

#[derive(Parser)]
#[command(
    name = "vqmir",
    version,
    about = "Spectrogram and VQ-token transformer genre classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Output directory for stage artifacts and run manifests.
    #[arg(long)]
    out: Option<PathBuf>,
    /// spectro, token or codebook.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<VariantKind>,
    /// Run name; defaults to the configured one.
    #[arg(long)]
    name: Option<String>,
    /// Finetune from random initialisation instead of the pretrained encoder.
    #[arg(long)]
    scratch: bool,
    /// Comma-separated stages to execute, e.g. `data,preprocess`.
    #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
    stages: Option<Vec<Stage>>,
    /// Re-run stages whose configuration changed instead of refusing.
    #[arg(long)]
    rebuild: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic genre corpus, split it and verify the split.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Convert FMA metadata into the native layout, split it and verify the split.
    ImportFma {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tracks_csv: PathBuf,
        #[arg(long)]
        genres_csv: PathBuf,
        /// Directory holding `NNN/NNNNNN.wav` files.
        #[arg(long)]
        audio_root: PathBuf,
        /// small, medium or large.
        #[arg(long)]
        subset: Option<String>,
    },
    /// Cache Mel spectrograms.
    Preprocess {
        #[command(flatten)]
        common: Common,
    },
    /// Train the audio codec and cache token sequences.
    TrainVqvae {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-prediction pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised finetuning with model selection on validation macro-F1.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the finetuned model and print its report.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage (or those given by --stages).
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the six-configuration grid and print the comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Split, gradient, metric and quantizer checks.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(p) = c.precision {
        cfg.precision = p;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    let renamed = c.variant.is_some() || c.scratch;
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if c.scratch {
        cfg.pretrain = false;
    }
    match &c.name {
        Some(n) => cfg.name = n.clone(),
        None if renamed => {
            cfg.name = format!(
                "{}-{}",
                cfg.variant.name(),
                if cfg.pretrain {
                    "pretrained"
                } else {
                    "scratch"
                }
            )
        }
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn options(c: &Common, default_stages: Option<Vec<Stage>>) -> RunOptions {
    RunOptions {
        stages: c.stages.clone().or(default_stages),
        rebuild: c.rebuild,
    }
}

fn stage_command(c: &Common, cfg: &ExperimentConfig, stage: Stage) -> Result<(), Error> {
    let m = run_pipeline(cfg, &options(c, Some(vec![stage])))?;
    println!("{stage}: {}", m.stage_dir(stage)?.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthData { common } => {
            let mut cfg = load_config(&common)?;
            if !matches!(cfg.data.source, DataSource::Synthetic(_)) {
                cfg.data.source = DataSource::Synthetic(SynthCorpusSpec::default());
            }
            stage_command(&common, &cfg, Stage::Data)
        }
        Command::ImportFma {
            common,
            tracks_csv,
            genres_csv,
            audio_root,
            subset,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.data.source = DataSource::Fma {
                tracks_csv,
                genres_csv,
                audio_root,
                subset,
            };
            stage_command(&common, &cfg, Stage::Data)
        }
        Command::Preprocess { common } => {
            stage_command(&common, &load_config(&common)?, Stage::Preprocess)
        }
        Command::TrainVqvae { common } => {
            stage_command(&common, &load_config(&common)?, Stage::TrainVqvae)
        }
        Command::Pretrain { common } => {
            stage_command(&common, &load_config(&common)?, Stage::Pretrain)
        }
        Command::Finetune { common } => {
            stage_command(&common, &load_config(&common)?, Stage::Finetune)
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let m = run_pipeline(&cfg, &options(&common, Some(vec![Stage::Evaluate])))?;
            print_report(&m.report_path()?)
        }
        Command::Run { common } => {
            let cfg = load_config(&common)?;
            let m = run_pipeline(&cfg, &options(&common, None))?;
            for r in &m.stages {
                let dir = r
                    .dir
                    .as_ref()
                    .map_or(String::new(), |d| d.display().to_string());
                println!(
                    "{:<12} {:<10} {dir}",
                    r.stage.name(),
                    format!("{:?}", r.status).to_lowercase()
                );
            }
            if m.is_complete(Stage::Evaluate) {
                print_report(&m.report_path()?)?;
            }
            Ok(())
        }
        Command::Compare { common } => {
            let cfg = load_config(&common)?;
            let table = run_grid(&cfg, &options(&common, None))?;
            print!("{table}");
            Ok(())
        }
        Command::Verify { common } => {
            let report = self_checks(&load_config(&common)?)?;
            print!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Verification("one or more checks failed".into()))
            }
        }
        Command::ShowConfig { common } => {
            print!("{}", load_config(&common)?.resolved().to_toml_string()?);
            Ok(())
        }
    }
}

fn print_report(path: &std::path::Path) -> Result<(), Error> {
    let r = read_report(path)?;
    print!("{}", r.confusion);
    println!(
        "macro-F1 {:.4} at epoch {} (overfit gap {:+.4})",
        r.macro_f1, r.best_epoch, r.overfit_gap
    );
    if let Some(t) = r.test_macro_f1 {
        println!("test macro-F1 {t:.4}");
    }
    println!(
        "chance macro-F1 {:.4} +/- {:.4} (reference {:.2})",
        r.chance.mean, r.chance.std_err, r.chance.reference
    );
    println!("report: {}", path.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::StaleFingerprint { .. } => 2,
        Error::Verification(_) => 3,
        Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::StaleFingerprint { .. }) {
                eprintln!("pass --rebuild to re-run the affected stages");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
