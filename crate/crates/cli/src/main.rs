//! Experiment runner: `run`, `sweep`, `check-assumptions`, and `verify`
//! subcommands over the flat key-value config format.
//!
//! Exit codes: 0 success; 2 config errors (missing/unknown/invalid keys);
//! 3 stepsize condition violations; 4 rank-deficient aggregation;
//! 5 singular chains; 6 I/O failures; 7 failed verification. Errors print one
//! machine-parsable line: `error: <Class>: <detail>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pfedac::config::{parse_config, ConfigError, Mode, RunConfig};
use pfedac::env::uniform_policy;
use pfedac::oracle::check_assumptions;
use pfedac::server::{execute, resolve_u_omega, ServerError};
use pfedac::verify::run_verification;

#[derive(Parser)]
#[command(name = "pfedac", version, about = "Personalized federated actor-critic simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (pfedac, local_only, or fedavg_full mode).
    Run(RunArgs),
    /// Run the linear-speedup sweep (sweep mode config).
    Sweep(RunArgs),
    /// Print the assumption diagnostics JSON for the configured federation
    /// at the initial (uniform) policy.
    CheckAssumptions(RunArgs),
    /// Run the seeded identity and invariant suite and print pass/fail.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file path.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (fallback: the PFEDAC_WORKERS environment variable,
    /// then the config's `workers` key).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Force per-round invariant checking on.
    #[arg(long)]
    debug_invariants: bool,
}

fn class_and_code(err: &ServerError) -> (&'static str, u8) {
    match err {
        ServerError::Config(c) => match c {
            ConfigError::MissingKey(_) => ("MissingKey", 2),
            ConfigError::UnknownKey(_) => ("UnknownKey", 2),
            ConfigError::InvalidValue { .. } => ("InvalidValue", 2),
            ConfigError::StepsizeConditionViolated(_) => ("StepsizeConditionViolated", 3),
            ConfigError::Io(_) => ("Io", 6),
        },
        ServerError::RankDeficientAggregate(_) => ("RankDeficientAggregate", 4),
        ServerError::Oracle(_) => ("SingularChain", 5),
        ServerError::Env(_) => ("EnvError", 2),
        ServerError::DimensionMismatch(_) => ("DimensionMismatch", 4),
        ServerError::Io(_) => ("Io", 6),
    }
}

fn fail(err: ServerError) -> ExitCode {
    let (class, code) = class_and_code(&err);
    let detail = err.to_string();
    // Config errors already start with the class name; avoid repeating it.
    let detail = detail
        .strip_prefix(&format!("{class}: "))
        .unwrap_or(&detail);
    eprintln!("error: {class}: {}", detail.replace('\n', " "));
    ExitCode::from(code)
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, String), ServerError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| ServerError::Config(ConfigError::Io(e)))?;
    let mut cfg = RunConfig::parse_str(&text).map_err(ServerError::Config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    } else if let Ok(env_workers) = std::env::var("PFEDAC_WORKERS") {
        cfg.workers = env_workers
            .parse()
            .map_err(|_| {
                ServerError::Config(ConfigError::InvalidValue {
                    key: "PFEDAC_WORKERS".into(),
                    detail: format!("cannot parse `{env_workers}`"),
                })
            })?;
    }
    if let Some(output) = &args.output {
        cfg.output_dir = output.clone();
    }
    if args.debug_invariants {
        cfg.debug_invariants = true;
    }
    Ok((cfg, text))
}

fn run_mode(args: &RunArgs, want_sweep: bool) -> Result<(), ServerError> {
    let (cfg, text) = load_config(args)?;
    let is_sweep = cfg.mode == Mode::Sweep;
    if is_sweep != want_sweep {
        return Err(ServerError::Config(ConfigError::InvalidValue {
            key: "mode".into(),
            detail: if want_sweep {
                "the sweep subcommand needs mode = sweep".into()
            } else {
                "use the sweep subcommand for mode = sweep".into()
            },
        }));
    }
    let report = execute(&cfg, Some(&text))?;
    println!(
        "wrote {} under {}",
        if want_sweep { "summary.json" } else { "metrics.csv" },
        report.output_dir.display()
    );
    if !want_sweep {
        println!("metrics rows: {}", report.metrics_rows);
    }
    if cfg.debug_invariants {
        println!("invariant violations: {}", report.invariant_violations);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report.summary).expect("summary json")
    );
    Ok(())
}

fn run_check_assumptions(args: &RunArgs) -> Result<(), ServerError> {
    let (cfg, _) = load_config(args)?;
    let fed = cfg.build_federation(cfg.num_agents)?;
    let u_omega = resolve_u_omega(&cfg, &fed)?;
    cfg.validate_stepsizes(u_omega)?;
    let policies = vec![uniform_policy(fed.num_states(), fed.num_actions()); fed.num_agents()];
    let report = check_assumptions(&fed, &policies, cfg.l)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report json")
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match run_mode(&args, false) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Sweep(args) => match run_mode(&args, true) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::CheckAssumptions(args) => match run_check_assumptions(&args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(e),
        },
        Command::Verify { seed } => match run_verification(seed) {
            Ok(report) => {
                println!("{report}");
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(7)
                }
            }
            Err(e) => fail(e),
        },
    }
}
