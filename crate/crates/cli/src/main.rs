use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kp_core::comm::{FailureEvent, FailureScript, Phase};
use kp_core::harness::{emit_report, plan_dump, run_experiment_set, ExperimentConfig, MatrixSource, SEED_ENV};
use kp_core::solvers::Method;
use kp_core::sparse::PrecondKind;

#[derive(Parser)]
#[command(name = "kp", version, about = "Fault-tolerant pipelined Krylov solvers on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run baseline, redundancy-only and failure sets and write results.json/results.csv
    Solve(SolveArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Matrix Market file or generator (gen:poisson2d:<k>, gen:tridiag:<n>); repeatable
    #[arg(long, required = true)]
    matrix: Vec<String>,
    /// pcg, ppcg, ppcr or 2ppcg; comma separated for several
    #[arg(long, default_value = "ppcg", value_delimiter = ',')]
    method: Vec<Method>,
    #[arg(long, default_value_t = 32)]
    nodes: usize,
    /// Tolerated simultaneous node failures
    #[arg(long = "nredu", default_value_t = 0)]
    n_redu: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Residual replacement period; 0 disables it
    #[arg(long, default_value_t = 50)]
    rr_period: usize,
    #[arg(long)]
    max_iters: Option<usize>,
    /// identity, jacobi, block-jacobi or explicit-sparse
    #[arg(long, default_value = "block-jacobi")]
    precond: PrecondKind,
    /// Failure point as a fraction of the failure-free iteration count
    #[arg(long, conflicts_with_all = ["fail_iter", "failure_script"])]
    fail_at: Option<f64>,
    /// Failure point as an iteration number
    #[arg(long, conflicts_with = "failure_script")]
    fail_iter: Option<usize>,
    /// before or after
    #[arg(long, default_value = "after", value_parser = parse_phase)]
    fail_phase: Phase,
    /// Failing ranks, comma separated
    #[arg(long, value_delimiter = ',', default_value = "0")]
    victims: Vec<usize>,
    /// JSON file with one event or a list of events
    #[arg(long)]
    failure_script: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// RNG seed for the right-hand side (KP_SEED overrides)
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write redundancy_plan.json with |S_jk| and |R_jk| per node and level
    #[arg(long)]
    dump_redundancy_plan: bool,
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    Phase::parse(s).ok_or_else(|| format!("unknown phase '{s}' (expected before or after)"))
}

impl SolveArgs {
    fn failure(&self) -> Result<FailureScript> {
        if let Some(path) = &self.failure_script {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return FailureScript::from_json(&text).with_context(|| format!("parsing {}", path.display()));
        }
        let event = match (self.fail_at, self.fail_iter) {
            (Some(f), _) => FailureEvent::at_progress(f, self.fail_phase, self.victims.clone()),
            (None, Some(i)) => FailureEvent::at_iteration(i, self.fail_phase, self.victims.clone()),
            (None, None) => return Ok(FailureScript::default()),
        };
        Ok(FailureScript::single(event))
    }

    fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let failure = self.failure()?;
        if !failure.is_empty() && self.n_redu == 0 {
            bail!("a failure needs --nredu >= 1");
        }
        let mut out = Vec::new();
        for m in &self.matrix {
            let source: MatrixSource = m.parse()?;
            for &method in &self.method {
                let mut c = ExperimentConfig::new(source.clone(), method);
                c.nodes = self.nodes;
                c.n_redu = self.n_redu;
                c.precond = self.precond;
                c.rel_tol = self.tol;
                c.rr_period = self.rr_period;
                c.max_iters = self.max_iters;
                c.failure = failure.clone();
                c.reps = self.reps;
                c.seed = self.seed;
                let c = c.with_env_seed()?;
                c.validate()?;
                out.push(c);
            }
        }
        Ok(out)
    }
}

fn solve(args: SolveArgs) -> Result<()> {
    let configs = args.configs()?;
    if std::env::var_os(SEED_ENV).is_some() {
        eprintln!("seed from {SEED_ENV}: {}", configs[0].seed);
    }
    if args.dump_redundancy_plan {
        if args.n_redu == 0 {
            bail!("--dump-redundancy-plan needs --nredu >= 1");
        }
        let mut plans = serde_json::Map::new();
        for m in &args.matrix {
            let source: MatrixSource = m.parse()?;
            let rows = plan_dump(&source.load()?, args.nodes, args.n_redu)?;
            plans.insert(source.to_string(), serde_json::to_value(rows)?);
        }
        fs::create_dir_all(&args.out)?;
        let path = args.out.join("redundancy_plan.json");
        fs::write(&path, serde_json::to_string_pretty(&plans)?)?;
        println!("wrote {}", path.display());
    }
    let mut records = Vec::new();
    for c in &configs {
        let r = run_experiment_set(c).with_context(|| format!("{} / {}", c.matrix, c.method))?;
        let mut line = format!(
            "{} {}: {} iterations{}, t0 {:.3e} s",
            r.matrix,
            r.method,
            r.baseline.iterations,
            if r.baseline.converged { "" } else { " (not converged)" },
            r.t0
        );
        if let Some(p) = r.redundancy_overhead_pct {
            line += &format!(", redundancy {p:+.2}%");
        }
        if let Some(f) = &r.failure {
            match (&f.error, r.failure_overhead_pct) {
                (Some(e), _) => line += &format!(", failure run failed: {e}"),
                (None, Some(p)) => line += &format!(", failure {p:+.2}% ({} iterations)", f.iterations),
                _ => {}
            }
        }
        println!("{line}");
        records.push(r);
    }
    let (json, csv) = emit_report(&records, &args.out)?;
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Solve(args) => solve(args),
    }
}
