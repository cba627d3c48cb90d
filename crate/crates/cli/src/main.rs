//! `pvlab`: run point-vortex experiments and checks from a TOML config.
//!
//! Exit status is 0 when every check passes, 1 on a failed check or a
//! runtime failure, and 2 on a configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vortex_lab::experiments::{self, CheckResult, ExperimentConfig, Trace};
use vortex_lab::Error;

#[derive(Parser)]
#[command(name = "pvlab", version, about = "Mean-field point-vortex laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Co-evolve vortices and the Euler field; write traces and summaries.
    Simulate(Common),
    /// Modulated-energy diagnostics of the initial configurations.
    Energy(Common),
    /// Derivative, stress-energy and renormalization identity checks.
    Verify(Common),
    /// Convergence sweep over N with slope and constant fits.
    Converge(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => load(c).and_then(|(cfg, out)| simulate(&cfg, &out)),
        Command::Energy(c) => load(c).and_then(|(cfg, out)| energy(&cfg, &out)),
        Command::Verify(c) => load(c).and_then(|(cfg, out)| verify(&cfg, &out)),
        Command::Converge(c) => load(c).and_then(|(cfg, out)| converge(&cfg, &out)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.run.seed = seed;
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    experiments::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn report(checks: &[CheckResult]) -> bool {
    for c in checks {
        let tag = if c.pass { "PASS" } else { "FAIL" };
        println!("{tag} {:<32} measured {:>12.5e}  reference {:>12.5e}  error {:.3e} (tol {:.1e})", c.name, c.measured, c.reference, c.error, c.tolerance);
    }
    checks.iter().all(|c| c.pass)
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let outcomes = experiments::run_scenario(cfg)?;
    experiments::write_outputs(cfg, &outcomes, out)?;
    let mut ok = true;
    for o in &outcomes {
        match &o.result {
            Ok(tr) => {
                let floor = if tr.floor_violated() { "VIOLATED" } else { "held" };
                ok &= !tr.floor_violated();
                println!(
                    "N={:<6} seed={:<4} F_avg(0)={:>12.5e} F_avg(T)={:>12.5e} sup H^s={:>10.4e} floor {floor}",
                    o.n,
                    o.seed,
                    tr.first().f_avg,
                    tr.last().f_avg,
                    tr.sup_hs()
                );
            }
            Err(e) => {
                ok = false;
                println!("N={:<6} seed={:<4} failed: {e}", o.n, o.seed);
            }
        }
    }
    Ok(ok)
}

fn energy(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let snaps = experiments::energy_snapshots(cfg)?;
    for s in &snaps {
        let r = &s.report;
        println!(
            "N={:<6} seed={:<4} F_avg={:>12.5e} (pairs {:>11.4e} cross {:>11.4e} continuum {:>10.4e}) eps3={:.3e} close pairs {}",
            s.n, s.seed, r.f_avg, r.pair_sum, r.cross, r.continuum, s.eps3, s.close_pairs
        );
    }
    write_json(&out.join("energy.json"), &snaps)?;
    Ok(true)
}

fn verify(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let rep = experiments::verify_identities(cfg)?;
    write_json(&out.join("verify.json"), &rep)?;
    Ok(report(&rep.checks))
}

#[derive(Serialize)]
struct ConvergeOutput<'a> {
    table: &'a experiments::ConvergenceTable,
    checks: &'a [CheckResult],
}

fn converge(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let outcomes = experiments::run_scenario(cfg)?;
    experiments::write_outputs(cfg, &outcomes, out)?;
    let mut traces: Vec<Trace> = Vec::new();
    for o in outcomes {
        match o.result {
            Ok(t) => traces.push(t),
            Err(e) => return Err(Failure::Runtime(format!("run N={} seed={} failed: {e}", o.n, o.seed))),
        }
    }
    let bcfg = cfg.bound_config(cfg.initial_field()?.as_ref());
    let table = experiments::convergence_table(&traces, &bcfg, cfg.diagnostics.s)?;
    for r in &table.rows {
        println!("N={:<6} runs={:<3} |F(0)|={:.4e} |F(T)|={:.4e} sup H^s={:.4e}", r.n, r.runs, r.f_initial, r.f_final, r.sup_hs);
    }
    println!("slope |F(T)| {:.3}  slope sup H^s {:.3}  fitted C_s {:.3e}", table.slope_f_final, table.slope_sup_hs, table.fitted_c_s);
    let checks = table.checks();
    write_json(&out.join("convergence.json"), &ConvergeOutput { table: &table, checks: &checks })?;
    Ok(report(&checks))
}
