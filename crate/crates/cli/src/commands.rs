use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use decbandit::graph::{assumption_report, compute_mixing_rounds, CommScheme};
use decbandit::sim::{aggregate, run_many, substream, Channel, ExperimentConfig, TopologySpec};
use serde_json::{json, Value};

use crate::config::{config_from_json, parse_scheme, Overrides};
use crate::output::{
    prepare_dir, summarize, sweep_csv, write_file, write_results, Summary, SweepRow, SUMMARY_FILE,
    SWEEP_FILE, TRACE_FILE,
};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(name = "decbandit", version, about = "Decentralized linear bandit experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run every realization of one config.
    Run(RunArgs),
    /// Run a config once per value of one parameter.
    Sweep(SweepArgs),
    /// Print spectral facts about a communication graph.
    GraphInfo(GraphInfoArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: Overrides,
    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    /// Worker threads (default: host parallelism).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "T")]
    T,
    #[value(name = "N")]
    N,
    Algorithm,
    Topology,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::T => "T",
            Axis::N => "N",
            Axis::Algorithm => "algorithm",
            Axis::Topology => "topology",
        }
    }

    fn value(self, raw: &str) -> Result<Value, CliError> {
        let bad = |e: String| CliError::Config(format!("sweep value {raw:?} for {}: {e}", self.key()));
        Ok(match self {
            Axis::T | Axis::N => json!(raw.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            Axis::Algorithm => Value::String(raw.to_string()),
            Axis::Topology => serde_json::to_value(raw.parse::<TopologySpec>().map_err(bad)?)?,
        })
    }
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GraphInfoArgs {
    #[arg(long)]
    pub topology: TopologySpec,
    #[arg(long = "agents", short = 'N')]
    pub n: usize,
    #[arg(long, value_parser = parse_scheme, default_value = "laplacian")]
    pub scheme: CommScheme,
    /// Consensus accuracy; defaults to 1/21.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Seed for random graphs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit JSON instead of `key: value` lines.
    #[arg(long)]
    pub json: bool,
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs all realizations and writes results into `dir`.
pub fn execute(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<Summary, CliError> {
    let traces = run_many(cfg, workers)?;
    let agg = aggregate(&traces)?;
    let summary = summarize(cfg, &traces, &agg);
    write_results(dir, &summary, &agg)?;
    Ok(summary)
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let cfg = args.cfg.resolve()?;
    prepare_dir(&args.out, args.overwrite, &[TRACE_FILE, SUMMARY_FILE])?;
    let s = execute(&cfg, &args.out, workers(args.workers))?;
    println!(
        "{}: R_T = {:.3} ± {:.3} over {} realizations -> {}",
        cfg.algorithm,
        s.final_regret.mean,
        s.final_regret.std,
        s.realizations,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if args.values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    let base = args.run.cfg.merged_json()?;
    let mut points = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let mut m = base.clone();
        m.insert(args.axis.key().to_string(), args.axis.value(raw)?);
        points.push((raw.clone(), config_from_json(Value::Object(m))?));
    }
    prepare_dir(&args.run.out, args.run.overwrite, &[SWEEP_FILE])?;
    let mut rows = Vec::with_capacity(points.len());
    for (raw, cfg) in &points {
        let dir = args.run.out.join(format!("{}={}", args.axis.key(), raw.replace(['/', ':'], "_")));
        prepare_dir(&dir, args.run.overwrite, &[TRACE_FILE, SUMMARY_FILE])?;
        let s = execute(cfg, &dir, workers(args.run.workers))?;
        println!("{}={raw}: R_T = {:.3} ± {:.3}", args.axis.key(), s.final_regret.mean, s.final_regret.std);
        rows.push(SweepRow {
            axis: args.axis.key().into(),
            value: raw.clone(),
            final_regret_mean: s.final_regret.mean,
            final_regret_std: s.final_regret.std,
            per_agent_regret_mean: s.per_agent_final_regret_mean,
            total_comm: s.total_comm,
            phase_count_mean: s.phase_count,
            violations: s.violations,
            bound_mean: s.theoretical_bound.map(|b| b.mean),
        });
    }
    write_file(&args.run.out.join(SWEEP_FILE), &sweep_csv(&rows)?)
}

/// Graph facts as ordered `(key, value)` pairs.
pub fn graph_info(args: &GraphInfoArgs) -> Result<Vec<(&'static str, Value)>, CliError> {
    let eps = args.epsilon.unwrap_or(1.0 / 21.0);
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CliError::Config(format!("epsilon {eps} must lie in (0, 1)")));
    }
    let mut rng = substream(args.seed, 0, 0, 0, Channel::Graph);
    let g = args
        .topology
        .build(args.n, &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report = assumption_report(&g, args.scheme);
    let pass = report.passes();
    let lambda2 = report.lambda2_abs.filter(|_| pass);
    Ok(vec![
        ("N", json!(g.n_nodes())),
        ("edges", json!(g.edge_count())),
        ("delta_max", json!(g.max_degree())),
        ("scheme", json!(args.scheme.to_string())),
        ("epsilon", json!(eps)),
        ("lambda2_abs", json!(lambda2)),
        ("S", json!(lambda2.map(|l| compute_mixing_rounds(g.n_nodes(), eps, l)))),
        ("comm_matrix_check", json!(if pass { "PASS" } else { "FAIL" })),
        ("max_row_sum_deviation", json!(report.max_row_sum_deviation)),
    ])
}

pub fn cmd_graph_info(args: &GraphInfoArgs) -> Result<(), CliError> {
    let info = graph_info(args)?;
    if args.json {
        let obj: serde_json::Map<String, Value> = info.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        println!("{}", serde_json::to_string_pretty(&obj)?);
    } else {
        for (k, v) in info {
            match v {
                Value::Null => println!("{k}: n/a"),
                Value::String(s) => println!("{k}: {s}"),
                v => println!("{k}: {v}"),
            }
        }
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GraphInfo(a) => cmd_graph_info(a),
    }
}
