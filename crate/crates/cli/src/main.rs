use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use boundbench_core::activation::{certify_h_smooth, Activation, ActivationKind, GridSpec};
use boundbench_core::harness::{self, Mode};

#[derive(Parser)]
#[command(name = "boundbench", version, about = "Gradient descent runs checked against convergence bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run configuration and write its trajectory and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use seeds k, k+1, k+2 for init, data and probes.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Sample-check the smoothness conditions of an activation.
    CertifyActivation {
        #[arg(long)]
        kind: ActivationKind,
        #[arg(long)]
        h: f64,
    },
    /// Report initialization concentration statistics for a configuration.
    Diagnostics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BOUNDBENCH_THREADS") {
        let n: usize = v.parse().with_context(|| format!("BOUNDBENCH_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(config: PathBuf, out: Option<PathBuf>, seed_override: Option<u64>, force_mode: Option<Mode>) -> Result<bool> {
    let mut cfg = harness::load_config(&config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(k) = seed_override {
        cfg.override_seeds(k);
    }
    if let Some(mode) = force_mode {
        cfg.mode = mode;
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    let (log, artifacts) = harness::run(&cfg)?;
    for path in artifacts.csv.iter().chain(&artifacts.json) {
        println!("wrote {}", path.display());
    }
    for v in &log.summary.invariants {
        if v.applicable > 0 {
            println!(
                "{:<13} {:<4} worst slack {:>12} first violation {}",
                v.name,
                v.verdict().as_str(),
                v.worst_slack.map_or("-".to_string(), |s| format!("{s:.3e}")),
                v.first_violation.map_or("-".to_string(), |t| t.to_string())
            );
        }
    }
    for p in &log.properties {
        println!("{:<24} {} worst {:.3e}", p.name, if p.passed { "pass" } else { "fail" }, p.worst);
    }
    if let Some(d) = &log.diagnostics {
        for (l, s) in d.hidden_norms.iter().enumerate() {
            println!("layer {} |x| in [{:.4}, {:.4}], op norm {:.4}", l + 1, s.min, s.max, d.hidden_operator_norms[l]);
        }
        println!("outer |V|/sqrt(p) = {:.4}", d.outer_ratio);
        for w in &d.warnings {
            println!("warning: {w}");
        }
    }
    Ok(log.passed())
}

fn certify(kind: ActivationKind, h: f64) -> Result<bool> {
    let act = Activation::new(kind, h)?;
    let r = certify_h_smooth(&act, &GridSpec::default())?;
    println!("{}", describe(&r));
    Ok(r.pass)
}

fn describe(r: &boundbench_core::SmoothnessReport) -> String {
    format!(
        "kind={} h={:e} value_at_zero={:e} max_abs_deriv={:e} max_lipschitz_quotient={:e} (limit {:e}) \
         max_taylor_gap={:e} (limit {:e}) samples={} pass={}",
        r.kind,
        r.h,
        r.value_at_zero,
        r.max_abs_deriv,
        r.max_lipschitz_quotient,
        1.0 / r.h,
        r.max_taylor_gap,
        r.h / 2.0,
        r.samples_used,
        r.pass
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Run {
            config,
            out,
            seed_override,
        } => run(config, out, seed_override, None),
        Command::CertifyActivation { kind, h } => certify(kind, h),
        Command::Diagnostics { config, out } => run(config, out, None, Some(Mode::Diagnostics)),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
