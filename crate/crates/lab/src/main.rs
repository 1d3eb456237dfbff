use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moshpit_lab::config::{ExperimentConfig, Overrides};
use moshpit_lab::report::{write_json, write_sidecar, BUILD_ID};
use moshpit_lab::{average, balance, sgd, theory_suite, LabError, LabResult, EXIT_CHECKS_FAILED, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "moshpit-lab", version = BUILD_ID, about = "Averaging and training experiments on simulated peers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rounds-to-threshold matrix for the averaging protocols.
    Average(Common),
    /// Moshpit SGD runs.
    Sgd(Common),
    /// Closed-form checks against sampling and enumeration.
    Theory(Common),
    /// Balanced partition weights for a bandwidth list.
    Balance(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; overrides MOSHPIT_SEED and the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; results go to stdout when neither this nor the file sets one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn load(&self) -> LabResult<ExperimentConfig> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            jobs: self.jobs,
            env_seed: None,
        }
        .with_env();
        ExperimentConfig::load(&self.config)?.apply(&overrides)
    }
}

fn stdout_write(f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> LabResult<()> {
    let mut out = std::io::stdout().lock();
    f(&mut out).map_err(|source| LabError::Output {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn run(cli: Cli) -> LabResult<bool> {
    match cli.command {
        Command::Average(c) => {
            let cfg = c.load()?;
            let res = average::run_experiment(&cfg)?;
            match &cfg.out {
                Some(path) => {
                    average::write_outputs(&res, path)?;
                    let json = write_sidecar(path, "average", &cfg, serde_json::json!({ "rows": res.rows }))?;
                    eprintln!("wrote {} and {}", path.display(), json.display());
                }
                None => stdout_write(|w| average::write_csv(&res.rows, w).map_err(Into::into))?,
            }
            Ok(true)
        }
        Command::Sgd(c) => {
            let cfg = c.load()?;
            let res = sgd::run_sgd_experiment(&cfg)?;
            match &cfg.out {
                Some(path) => {
                    let to_err = |e: csv::Error| LabError::Output {
                        path: path.clone(),
                        source: e.into(),
                    };
                    sgd::write_csv(&res.rows, moshpit_lab::report::create_file(path)?).map_err(to_err)?;
                    let json = write_sidecar(path, "sgd", &cfg, &res.summaries)?;
                    eprintln!("wrote {} and {}", path.display(), json.display());
                }
                None => stdout_write(|w| sgd::write_csv(&res.rows, w).map_err(Into::into))?,
            }
            Ok(true)
        }
        Command::Theory(c) => {
            let cfg = c.load()?;
            let pool = cfg.pool()?;
            let report = pool.install(|| theory_suite::run_theory_suite(&cfg.theory, cfg.seed))?;
            for check in &report.checks {
                eprintln!("{} {}", if check.passed { "PASS" } else { "FAIL" }, check.name);
            }
            let doc = serde_json::json!({ "build": BUILD_ID, "seed": cfg.seed, "report": report });
            match &cfg.out {
                Some(path) => write_json(&doc, path)?,
                None => stdout_write(|w| {
                    serde_json::to_writer_pretty(&mut *w, &doc)?;
                    writeln!(w)
                })?,
            }
            Ok(report.passed())
        }
        Command::Balance(c) => {
            let cfg = c.load()?;
            let res = balance::balance(&cfg.balance()?.bandwidths)?;
            match &cfg.out {
                Some(path) => {
                    let to_err = |e: csv::Error| LabError::Output {
                        path: path.clone(),
                        source: e.into(),
                    };
                    balance::write_csv(&res, moshpit_lab::report::create_file(path)?).map_err(to_err)?;
                    write_sidecar(path, "balance", &cfg, &res)?;
                }
                None => stdout_write(|w| balance::write_csv(&res, w).map_err(Into::into))?,
            }
            eprintln!(
                "completion time {} (uniform split {})",
                moshpit_lab::format::g6(res.objective),
                moshpit_lab::format::g6(res.uniform_objective)
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECKS_FAILED as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
