//! `pik`: certify, simulate, sweep and verify prioritized inverse kinematics scenarios.
//!
//! Exit codes: 0 success (certified / contained / all suites pass), 1 error or failed
//! suite, 2 infeasible certificate or singular region, 3 containment violation or
//! divergence during simulation.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pik_core::certify::CertifyError;
use pik_core::simlab::Trajectory;
use serde::Serialize;

use commands::{CommandError, SweepParam, SweepTable, SWEEP_COLUMNS};
use config::{ConfigError, ScenarioConfig, Setup};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_VIOLATION: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "pik", version, about = "Prioritized inverse kinematics certificates and simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Directory for output files; without it the main document goes to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// csv for time series and sweep tables; certificates and verify reports are always JSON.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Overrides the sampling seed of the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate constants and emit the step bounds, rates and assumption flags.
    Certify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the Euler-hold loop (and optionally the RK4 oracle) from q0.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        oracle: bool,
    },
    /// One row per value of the swept parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        values: Vec<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        oracle: bool,
    },
    /// Run the seeded property suites of every module and print a pass/fail matrix.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Setup, ConfigError> {
    let mut setup = ScenarioConfig::load(path)?.setup()?;
    if let Some(s) = seed {
        setup.sampling.seed = s;
    }
    Ok(setup)
}

fn json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Write `body` to `out/name`, or to stdout when no directory was given.
fn emit(out: Option<&Path>, name: &str, body: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn csv_number(x: f64) -> String {
    format!("{x:e}")
}

/// Columns t, q_1…q_n, phi_1…phi_l, u_1…u_n and, with the oracle, oracle_distance.
pub fn trajectory_csv(traj: &Trajectory, oracle_distance: Option<&[f64]>) -> anyhow::Result<String> {
    let n = traj.q.first().map_or(0, Vec::len);
    let l = traj.phi.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("q_{i}")));
    header.extend((1..=l).map(|a| format!("phi_{a}")));
    header.extend((1..=n).map(|i| format!("u_{i}")));
    if oracle_distance.is_some() {
        header.push("oracle_distance".into());
    }
    w.write_record(&header)?;
    for i in 0..traj.len() {
        let mut rec = vec![csv_number(traj.times[i])];
        rec.extend(traj.q[i].iter().chain(&traj.phi[i]).chain(&traj.u[i]).map(|x| csv_number(*x)));
        if let Some(d) = oracle_distance {
            rec.push(csv_number(d[i]));
        }
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn sweep_csv(table: &SweepTable) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_COLUMNS)?;
    let opt = |x: Option<f64>| x.map(csv_number).unwrap_or_default();
    for r in &table.rows {
        w.write_record([
            csv_number(r.value),
            r.certified.to_string(),
            csv_number(r.eta_inf),
            csv_number(r.step),
            r.contained.to_string(),
            r.diverged.to_string(),
            csv_number(r.sup_phi_over_theta),
            opt(r.sup_oracle_distance),
            opt(r.certified_bound),
            opt(r.dn_c),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn json_only(format: Option<Format>, what: &str) -> anyhow::Result<()> {
    if format == Some(Format::Csv) {
        bail!("{what} reports are JSON only; --format csv applies to simulate and sweep");
    }
    Ok(())
}

fn exit_for_command_error(e: &CommandError) -> u8 {
    match e {
        CommandError::Certify(CertifyError::Singularity { .. }) | CommandError::Infeasible(_) => EXIT_INFEASIBLE,
        _ => EXIT_ERROR,
    }
}

fn execute(cli: &Cli) -> anyhow::Result<u8> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Certify { config } => {
            json_only(cli.format, "certificate")?;
            let setup = load(config, cli.seed)?;
            let cert = match commands::certify_setup(&setup) {
                Ok(c) => c,
                Err(e) => {
                    let code = exit_for_command_error(&CommandError::from(e.clone()));
                    eprintln!("{e}");
                    return Ok(code);
                }
            };
            emit(out, "certificate.json", &json(&cert)?)?;
            if out.is_some() {
                println!("certified: {} eta_inf: {:e}", cert.certified, cert.eta_inf);
            }
            for reason in &cert.infeasible {
                eprintln!("infeasible: {reason}");
            }
            Ok(if cert.certified { EXIT_OK } else { EXIT_INFEASIBLE })
        }
        Command::Simulate { config, step, oracle } => {
            let setup = load(config, cli.seed)?;
            let sim = match commands::simulate(&setup, *step, *oracle) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(exit_for_command_error(&e));
                }
            };
            if let Some(dir) = out {
                let (name, body) = match cli.format.unwrap_or(Format::Csv) {
                    Format::Csv => ("trajectory.csv", trajectory_csv(&sim.trajectory, sim.oracle_distance.as_deref())?),
                    Format::Json => ("trajectory.json", json(&sim.trajectory)?),
                };
                emit(Some(dir), name, &body)?;
                emit(Some(dir), "simulation.json", &json(&sim.report)?)?;
                println!(
                    "contained: {} converged: {} samples: {}",
                    sim.report.tube.contained_outer, sim.report.tube.converged, sim.report.samples
                );
            } else {
                emit(None, "", &json(&sim.report)?)?;
            }
            if let Some(d) = &sim.report.divergence {
                eprintln!("divergence: {d}");
            } else if !sim.report.tube.contained_outer {
                eprintln!("containment violation at t = {:?}", sim.report.tube.exit_time);
            }
            Ok(if sim.report.ok() { EXIT_OK } else { EXIT_VIOLATION })
        }
        Command::Sweep { config, param, values, step, oracle } => {
            let setup = load(config, cli.seed)?;
            let table = match commands::sweep(&setup, *param, values, *step, *oracle) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{e}");
                    return Ok(exit_for_command_error(&e));
                }
            };
            match cli.format.unwrap_or(Format::Csv) {
                Format::Csv => emit(out, "sweep.csv", &sweep_csv(&table)?)?,
                Format::Json => emit(out, "sweep.json", &json(&table)?)?,
            }
            Ok(EXIT_OK)
        }
        Command::Verify { config } => {
            json_only(cli.format, "verify")?;
            let setup = config.as_deref().map(|p| load(p, cli.seed)).transpose()?;
            let report = commands::verify(cli.seed.unwrap_or(0), setup.as_ref());
            print!("{}", report.matrix());
            if out.is_some() {
                emit(out, "verify.json", &json(&report)?)?;
            }
            for s in report.suites.iter().filter(|s| !s.passed) {
                for note in &s.notes {
                    eprintln!("{}: {note}", s.id);
                }
            }
            Ok(if report.passed { EXIT_OK } else { EXIT_ERROR })
        }
    }
}

pub fn run(cli: &Cli) -> ExitCode {
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
