use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use signal_reid::config::EvalFeature;
use signal_reid::error::{Error, Result};
use signal_reid::eval::{evaluate_model, report_json};
use signal_reid::run::Output;
use signal_reid::{ablate, gradcheck, run, synth, RunConfig, SynthConfig};

#[derive(Parser)]
#[command(name = "signal", version, about = "Tri-modal re-identification on synthetic token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (SGT1 tensors plus manifest.json).
    GenData {
        /// JSON generator config; an optional "preset" key picks easy or hard.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and evaluate it on the query/gallery splits.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides the config's `data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the report JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// "frnt" or "frnt+cls"; defaults to the checkpoint's config.
        #[arg(long)]
        feature: Option<String>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adds a case with a deliberately wrong backward pass.
        #[arg(long, hide = true)]
        corrupt_fixture: bool,
    },
    /// Train baseline, +SIM, +SIM+GAM and full models on several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base config shared by all presets.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn parse_feature(s: &str) -> Result<EvalFeature> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown eval feature {s:?} (expected frnt or frnt+cls)")))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    SynthConfig::from_json(&text)?
                }
                None => SynthConfig::default(),
            };
            let data = synth::generate(&cfg)?;
            let manifest = synth::save_dataset(&data, &out)?;
            println!("{}", serde_json::json!({"manifest": manifest, "samples": data.records.len()}));
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if data.is_some() {
                cfg.data = data;
            }
            if out.is_some() {
                cfg.out = out;
            }
            let data_dir = cfg.data.clone().ok_or_else(|| Error::Config("no dataset: pass --data".into()))?;
            let out_dir = cfg.out.clone().ok_or_else(|| Error::Config("no output directory: pass --out".into()))?;
            let dataset = synth::load_dataset(&data_dir)?;
            let output = Output::new(&out_dir)?;
            let trainer = run::train(&cfg, &dataset, Some(&output), resume.as_deref(), &mut |log| {
                println!("{}", serde_json::to_string(log).expect("plain struct"));
            })?;
            if !dataset.split(synth::Split::Query).is_empty() {
                let report = report_json(&evaluate_model(&trainer.model, &dataset, cfg.eval_feature)?);
                write_json(&out_dir.join("report.json"), &report)?;
                println!("{}", serde_json::json!({"eval": {"mAP": report["mAP"], "cmc": report["cmc"]}}));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            feature,
            report,
        } => {
            let ck = signal_reid::checkpoint::Checkpoint::load(&checkpoint)?;
            let dataset = synth::load_dataset(&data)?;
            let feature = match feature {
                Some(f) => parse_feature(&f)?,
                None => ck.model.config.eval_feature,
            };
            let json = report_json(&evaluate_model(&ck.model, &dataset, feature)?);
            if let Some(path) = report {
                write_json(&path, &json)?;
            }
            println!("{json}");
        }
        Command::Gradcheck { seed, corrupt_fixture } => {
            let rows = gradcheck::run(seed, corrupt_fixture)?;
            print!("{}", gradcheck::table(&rows));
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Ablate {
            data,
            out,
            config,
            seeds,
        } => {
            let base = load_config(config.as_deref())?;
            let dataset = synth::load_dataset(&data)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let seeds: Vec<u64> = (0..seeds).map(|s| base.seed + s).collect();
            let report = ablate::run(&base, &dataset, &seeds, &mut |r| {
                println!("{}", serde_json::to_string(r).expect("plain struct"));
            })?;
            print!("{}", ablate::table(&report));
            write_json(&out.join("ablation.json"), &serde_json::to_value(&report).expect("plain struct"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
