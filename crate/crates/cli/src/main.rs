use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ffl_core::config::{ExperimentConfig, Scheme};
use ffl_core::federation::{prepare, run_prepared, write_artifacts, RunResult};
use ffl_core::{selftest, FflError};

#[derive(Parser)]
#[command(name = "ffl", version, about = "Federated SGD simulator with adaptive local updates and gradient compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Scheme (overrides `scheme`).
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Run several schemes on the same data and seed and tabulate time-to-target.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Schemes to compare, at least two.
        #[arg(long = "scheme", num_args = 1.., required = true)]
        schemes: Vec<String>,
    },
    /// Quick property checks of the estimator, gradients and schedule.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, FflError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(common: &Common, scheme: Option<&str>) -> Result<(), FflError> {
    let mut cfg = load(common)?;
    if let Some(name) = scheme {
        cfg.scheme = Scheme::parse(name)?;
    }
    let prep = prepare(&cfg)?;
    let result = run_prepared(&cfg, &prep)?;
    write_artifacts(&result, &cfg.output_dir)?;
    report(&result);
    Ok(())
}

fn report(r: &RunResult) {
    let s = &r.summary;
    let ttt = s.time_to_target_s.map_or("inf".to_string(), |t| format!("{t:.3} s"));
    println!(
        "{}: {} rounds, {:.3} s simulated, final accuracy {:.4}, time to {:.2} accuracy {ttt}",
        s.scheme, s.rounds, s.sim_time_s, s.final_acc, s.target_accuracy
    );
}

fn fmt_time(t: Option<f64>) -> String {
    t.map_or("inf".to_string(), |t| t.to_string())
}

fn cmd_compare(common: &Common, names: &[String]) -> Result<(), FflError> {
    if names.len() < 2 {
        return Err(FflError::config("scheme", "compare needs at least two schemes"));
    }
    let mut schemes = Vec::with_capacity(names.len());
    let mut seen = HashSet::new();
    for n in names {
        let s = Scheme::parse(n)?;
        if !seen.insert(s) {
            return Err(FflError::config("scheme", format!("`{n}` listed twice")));
        }
        schemes.push(s);
    }
    let base = load(common)?;
    let prep = prepare(&base)?;
    let mut results = Vec::with_capacity(schemes.len());
    for &scheme in &schemes {
        let cfg = ExperimentConfig {
            scheme,
            output_dir: base.output_dir.join(scheme.name()),
            ..base.clone()
        };
        let r = run_prepared(&cfg, &prep)?;
        write_artifacts(&r, &cfg.output_dir)?;
        report(&r);
        results.push(r);
    }

    let mut csv = String::from("scheme,time_to_target_s,final_acc,rounds,total_atoms\n");
    for r in &results {
        let s = &r.summary;
        writeln!(
            csv,
            "{},{},{},{},{}",
            s.scheme,
            fmt_time(s.time_to_target_s),
            s.final_acc,
            s.rounds,
            s.total_atoms
        )
        .expect("writing to a String");
    }
    std::fs::create_dir_all(&base.output_dir)?;
    std::fs::write(base.output_dir.join("compare.csv"), &csv)?;

    let reference = results
        .iter()
        .find(|r| r.summary.scheme == Scheme::Ffl)
        .and_then(|r| r.summary.time_to_target_s);
    let speedups: serde_json::Map<String, serde_json::Value> = results
        .iter()
        .map(|r| {
            let v = match (reference, r.summary.time_to_target_s) {
                (Some(f), Some(t)) if f > 0.0 => serde_json::json!(t / f),
                _ => serde_json::json!("n/a"),
            };
            (r.summary.scheme.name().to_string(), v)
        })
        .collect();
    let doc = serde_json::json!({ "reference": "ffl", "time_to_target_ratio": speedups });
    std::fs::write(
        base.output_dir.join("speedups.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_selftest(seed: u64) -> bool {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn exit_for(result: Result<(), FflError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("FFL_LOG", "warn");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { common, scheme } => exit_for(cmd_run(&common, scheme.as_deref())),
        Command::Compare { common, schemes } => exit_for(cmd_compare(&common, &schemes)),
        Command::Selftest { seed } => {
            if cmd_selftest(seed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
