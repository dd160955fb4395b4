use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use otfs_scma_core::scma::{codebook_metrics, load_codebook, ScmaSystem};
use otfs_scma_core::sim::{
    frame_log_csv, results_csv, run_se_report, se_report_csv, timing_json, write_text, Experiment,
    ExperimentConfig, SchemeKind,
};

#[derive(Parser)]
#[command(
    name = "otfs-scma",
    version,
    about = "Monte Carlo experiments for downlink OTFS-SCMA"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config. Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides)
                .with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::from_toml("", &self.overrides)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured schemes over the Eb/N0 list.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-frame CSV with channel fingerprints and bit errors.
        #[arg(long)]
        frame_log: Option<PathBuf>,
    },
    /// Run all four schemes on common random numbers.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frame_log: Option<PathBuf>,
    },
    /// Simulated vs predicted MSE per iteration.
    SeReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// MED and MPD of a codebook file (or the built-in one).
    CodebookMetrics {
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Check a config and print it with all defaults filled in.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn simulate(
    cfg: ExperimentConfig,
    schemes: &[SchemeKind],
    out: &Path,
    frame_log: Option<&Path>,
) -> Result<()> {
    let exp = Experiment::new(cfg)?;
    let (rows, log) = exp.run(schemes)?;
    write_text(out, &results_csv(&rows)?)?;
    let mut meta = out.as_os_str().to_owned();
    meta.push(".meta.json");
    write_text(Path::new(&meta), &timing_json(&rows)?)?;
    if let Some(p) = frame_log {
        write_text(p, &frame_log_csv(&log)?)?;
    }
    for r in &rows {
        eprintln!(
            "{:>10} {:>6.1} dB  frames {:>6}  errors {:>6}  ber {:.3e} (+/- {:.1e})  {:.1}s",
            r.scheme, r.eb_n0_db, r.frames, r.bit_errors, r.ber, r.ber_std_err, r.wall_time_s
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Simulate {
            cfg,
            out,
            frame_log,
        } => {
            let cfg = cfg.load()?;
            let schemes = cfg.schemes.clone();
            simulate(cfg, &schemes, &out, frame_log.as_deref())
        }
        Cmd::Compare {
            cfg,
            out,
            frame_log,
        } => simulate(cfg.load()?, &SchemeKind::ALL, &out, frame_log.as_deref()),
        Cmd::SeReport { cfg, out } => {
            let rows = run_se_report(&cfg.load()?)?;
            write_text(&out, &se_report_csv(&rows)?)?;
            for r in &rows {
                eprintln!(
                    "{:>6.1} dB  iter {}  sim {:.3e}  se {:.3e}  ratio {:.2}",
                    r.eb_n0_db, r.iteration, r.sim_mse, r.se_mse, r.mse_ratio
                );
            }
            Ok(())
        }
        Cmd::CodebookMetrics { codebook } => {
            let sys = match codebook {
                Some(p) => {
                    let (g, cb) =
                        load_codebook(&p).with_context(|| format!("loading {}", p.display()))?;
                    ScmaSystem::new(g, cb, true)?
                }
                None => ScmaSystem::standard(),
            };
            let m = codebook_metrics(&sys.codebook, &sys.graph)?;
            println!(
                "{{\"med\": {}, \"mpd\": {}, \"scale\": {}, \"hash\": \"{}\"}}",
                m.med,
                m.mpd,
                sys.scale,
                sys.raw.hash_hex()
            );
            Ok(())
        }
        Cmd::ValidateConfig { cfg } => {
            let cfg = cfg.load()?;
            Experiment::new(cfg.clone())?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}
