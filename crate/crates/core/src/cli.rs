//! Command-line front end. `run` takes the full argument list (program
//! name first) and returns the process exit code.

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use std::path::PathBuf;

use std::ffi::OsString;

use crate::channel::Domain;
use crate::config::{ExperimentConfig, Preset};
use crate::pipeline::{self, Layout, TargetOutcome};
use crate::{Error, Result};

/// One-bit ADC mmWave channel estimation: cGAN coarse stage + RIDNet refinement.
#[derive(Parser)]
#[command(name = "onebit-ce", version)]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration file (TOML); defaults to the preset alone.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Domain the RIDNet works in (overrides `domain`).
    #[arg(long, global = true, value_enum)]
    domain: Option<DomainArg>,

    /// Base preset the configuration file is layered on.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Require bit-reproducible kernels. Every kernel here is already
    /// deterministic, so this only records the request.
    #[arg(long, global = true)]
    strict_determinism: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and test corpora.
    GenData,
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Continue from the existing checkpoint for another epoch budget.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained checkpoints.
    Eval {
        #[arg(value_enum)]
        kind: EvalKind,
    },
    /// Run the full pipeline for one figure or table.
    Reproduce {
        #[arg(value_enum)]
        target: Target,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Cgan,
    Ridnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Nmse,
    Sumrate,
    Timing,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Fig3,
    Fig4,
    Fig5,
    Table1,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Spatial,
    Angular,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

/// Exit code of a failed command: 2 configuration, 3 I/O or corrupt
/// artifact, 4 missing prerequisite, 1 anything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Checksum { .. }
        | Error::Truncated { .. }
        | Error::VersionMismatch { .. } => 3,
        Error::MissingPrerequisite(_) => 4,
        _ => 1,
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let preset = g.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                field: "--config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            ExperimentConfig::from_toml_str_with_preset(&text, preset)?
        }
        None => ExperimentConfig::for_preset(preset.unwrap_or(Preset::Desk)),
    };
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.master_seed = seed;
    }
    if let Some(d) = g.domain {
        cfg.domain = match d {
            DomainArg::Spatial => Domain::Spatial,
            DomainArg::Angular => Domain::Angular,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_target(name: &str, t: &TargetOutcome) {
    println!("{name}: {} report rows", t.report.rows.len());
    for e in &t.report.errors {
        println!("cell error {} Q={}: {}", e.estimator, e.num_pilots, e.message);
    }
    for c in &t.checks {
        println!("{c}");
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if cli.global.strict_determinism {
        info!("strict determinism requested; all kernels are deterministic single-threaded code");
    }
    let layout = Layout::new(&cfg.output_dir);
    match cli.command {
        Command::GenData => {
            pipeline::write_resolved_config(&cfg, &layout)?;
            let (train, test) = pipeline::generate_data(&cfg, &layout)?;
            for m in [&train, &test] {
                println!(
                    "{:?}: {} samples, N={} K={} Q={}, scale {:.6}, hash {}",
                    m.role,
                    m.num_samples,
                    m.num_antennas,
                    m.num_users,
                    m.num_pilots,
                    m.normalization_scale,
                    m.hash()
                );
            }
        }
        Command::Train { stage, resume } => {
            pipeline::write_resolved_config(&cfg, &layout)?;
            let (train, _) = pipeline::load_data(&cfg, &layout)?;
            match stage {
                Stage::Cgan => {
                    let o = pipeline::train_cgan_stage(&cfg, &layout, &train, resume)?;
                    println!(
                        "cgan: {} epochs, best epoch {} with validation NMSE {:.3} dB -> {}",
                        o.epochs_completed,
                        o.best_epoch,
                        o.best_validation_nmse_db,
                        layout.cgan().display()
                    );
                }
                Stage::Ridnet => {
                    let cgan = pipeline::require_cgan(&cfg, &layout)?;
                    let o = pipeline::train_ridnet_stage(&cfg, &layout, &train, &cgan, cfg.domain, resume)?;
                    println!(
                        "ridnet ({}): {} epochs, best epoch {} with validation L1 {:.5} (untrained {:.5}) -> {}",
                        cfg.domain,
                        o.epochs_completed,
                        o.best_epoch,
                        o.best_validation_l1,
                        o.initial_validation_l1,
                        layout.ridnet(cfg.domain).display()
                    );
                }
            }
        }
        Command::Eval { kind } => match kind {
            EvalKind::Nmse => {
                let r = pipeline::eval_nmse(&cfg, &layout)?;
                print!("{}", r.to_csv());
                for e in &r.errors {
                    eprintln!("cell error {}: {}", e.estimator, e.message);
                }
            }
            EvalKind::Sumrate => print!("{}", pipeline::eval_sum_rate(&cfg, &layout)?.to_csv()),
            EvalKind::Timing => {
                let t = pipeline::eval_timing(&cfg, &layout, cfg.domain)?;
                print!("{}", t.to_report(cfg.num_antennas, cfg.num_users, cfg.num_pilots).to_csv());
                println!("ridnet/cgan ratio {:.4}, additivity gap {:.4}", t.ridnet_to_cgan_ratio(), t.additivity_gap());
            }
        },
        Command::Reproduce { target } => {
            if cfg.preset != Preset::Desk {
                return Err(Error::Config {
                    field: "preset".into(),
                    message: "reproduce runs the desk preset only".into(),
                });
            }
            let (name, outcome) = match target {
                Target::Fig3 => ("fig3", pipeline::reproduce_fig3(&cfg)?),
                Target::Fig4 => ("fig4", pipeline::reproduce_fig4(&cfg)?),
                Target::Fig5 => ("fig5", pipeline::reproduce_fig5(&cfg)?),
                Target::Table1 => ("table1", pipeline::reproduce_table1(&cfg)?),
            };
            print_target(name, &outcome);
        }
    }
    Ok(())
}

pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{line}");
            code
        }
    }
}
