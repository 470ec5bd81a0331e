//! Config-driven calibration pipeline: fit the boundary model, carve out the
//! prior coefficient space, design, simulate, history-match, report.
//!
//! Every failure exits with a class-specific code and a machine-readable
//! JSON error on stderr. Reruns with the same config and seed are
//! byte-identical.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use icecal::config::PipelineConfig;
use icecal::error::{Error, Result};
use icecal::history_match::lhs_design;
use icecal::pipeline::{
    fit_boundary_model, obs_error_factor, prior_stage, run_waves, simulate_design,
    write_run_artifacts,
};
use icecal::synthetic::N_PHYSICS_PARAMS;

#[derive(Parser)]
#[command(name = "icecal", version, about = "Boundary-condition calibration pipeline")]
struct Cli {
    /// Pipeline configuration file (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the boundary model and write the temporal part of the manifest.
    FitTemporal,
    /// Fit the full boundary model (temporal + spatial) and write it.
    FitSpatial,
    /// Generate the truth, evaluate the prior coefficient space, write the
    /// acceptance report.
    PriorSpace,
    /// Write the initial Latin-hypercube design.
    Design,
    /// Run the simulator over the initial design and write per-run volumes.
    Simulate,
    /// Run history-matching waves 1..=index and write the wave report.
    Wave {
        #[arg(long, default_value_t = 1)]
        index: usize,
    },
    /// Run the full pipeline and write all artifacts.
    Report,
    /// Print the effective configuration (defaults merged with the file).
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(path) => icecal::io::read_json(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}

#[derive(Serialize)]
struct TemporalManifest<'a> {
    periods: &'a [icecal::boundary::Period],
    n_temporal: usize,
    temporal: &'a [icecal::boundary::TemporalVector],
    mu: &'a icecal::kron::FieldVector,
}

#[derive(Serialize)]
struct PriorManifest<'a> {
    prior_bounds: &'a [(f64, f64)],
    design_bounds: &'a [(f64, f64)],
    report: &'a icecal::history_match::PriorSpaceReport,
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = ensure_out_dir(&cfg)?;
    match &cli.command {
        Command::FitTemporal => {
            let fitted = fit_boundary_model(&cfg)?;
            let manifest = TemporalManifest {
                periods: &fitted.model.periods,
                n_temporal: fitted.model.n_temporal(),
                temporal: &fitted.model.temporal,
                mu: &fitted.model.mu,
            };
            write_and_log(&out.join("model_temporal.json"), &manifest)?;
        }
        Command::FitSpatial => {
            let fitted = fit_boundary_model(&cfg)?;
            write_and_log(&out.join("model.json"), &fitted.model)?;
        }
        Command::PriorSpace => {
            let stage = prior_stage(&cfg)?;
            let manifest = PriorManifest {
                prior_bounds: &stage.prior_bounds,
                design_bounds: &stage.bounds,
                report: &stage.report,
            };
            write_and_log(&out.join("prior.json"), &manifest)?;
        }
        Command::Design => {
            let stage = prior_stage(&cfg)?;
            let design = lhs_design(
                &stage.bounds,
                N_PHYSICS_PARAMS,
                cfg.n_design,
                cfg.seed.wrapping_add(4),
            )?;
            let path = out.join("design_wave_1.csv");
            icecal::io::write_design_csv(&path, &design)?;
            println!("wrote {}", path.display());
        }
        Command::Simulate => {
            let stage = prior_stage(&cfg)?;
            let design = lhs_design(
                &stage.bounds,
                N_PHYSICS_PARAMS,
                cfg.n_design,
                cfg.seed.wrapping_add(4),
            )?;
            let sigma_t_obs =
                obs_error_factor(&stage.truth.boundary_obs, cfg.simulator.n_timesteps)?;
            let runs = simulate_design(
                &cfg,
                &stage.fitted.model,
                &stage.truth.boundary_obs,
                &stage.fitted.covs,
                &sigma_t_obs,
                &stage.c_box,
                &design,
            )?;
            let volumes = nalgebra::DMatrix::from_fn(runs.len(), cfg.simulator.n_timesteps, |i, t| {
                runs[i][t].sum() * cfg.simulator.cell_area
            });
            let dpath = out.join("design_wave_1.csv");
            icecal::io::write_design_csv(&dpath, &design)?;
            let vpath = out.join("volumes_wave_1.csv");
            icecal::io::write_matrix_csv(&vpath, &volumes)?;
            println!("wrote {}", dpath.display());
            println!("wrote {}", vpath.display());
        }
        Command::Wave { index } => {
            let run = run_waves(&cfg, Some(*index))?;
            let paths = write_run_artifacts(&cfg, &run, &out)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            let last = run.reports.last().unwrap();
            println!(
                "wave {}: NROY fraction {:.6}, truth retained: {}",
                last.wave_index, last.fraction, last.truth_retained
            );
        }
        Command::Report => {
            let run = run_waves(&cfg, None)?;
            let paths = write_run_artifacts(&cfg, &run, &out)?;
            for p in &paths {
                println!("wrote {}", p.display());
            }
            for r in &run.reports {
                println!(
                    "wave {}: NROY fraction {:.6}, truth retained: {}",
                    r.wave_index, r.fraction, r.truth_retained
                );
            }
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn write_and_log<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    icecal::io::write_json(path, value)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    code: i32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = ErrorReport {
                error: e.to_string(),
                code,
            };
            eprintln!(
                "{}",
                serde_json::to_string(&report).unwrap_or_else(|_| e.to_string())
            );
            ExitCode::from(code as u8)
        }
    }
}
