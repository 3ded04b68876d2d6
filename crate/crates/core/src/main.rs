use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use hcs_sim::config::load_scenario;
use hcs_sim::experiment::{self, ExperimentError};
use hcs_sim::metrics::{fmt_sig, EmitOptions};
use hcs_sim::placement::PlacementPolicy;
use hcs_sim::sim::Scenario;

#[derive(Parser)]
#[command(name = "hcs-sim", version, about = "Simulates cost-aware placement of batch pipelines on an edge cluster with cloud overflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single run.
    Run(Args),
    /// One run per placement policy on a shared arrival schedule.
    Sweep(Args),
    /// Hybrid run paired with a cloud-only run on identical arrivals.
    Baseline(Args),
    /// Baseline pairs for several arrival seeds, with mean and stddev.
    Replicate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: the config's `output`, else `out`].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
    /// Comma-separated arrival seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Also write downsampled series for plotting.
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Ff,
    Bf,
    Rr,
    Wf,
    All,
}

impl PlacementArg {
    fn policies(self) -> Vec<PlacementPolicy> {
        match self {
            PlacementArg::Ff => vec![PlacementPolicy::FirstFit],
            PlacementArg::Bf => vec![PlacementPolicy::BestFit],
            PlacementArg::Rr => vec![PlacementPolicy::RoundRobin],
            PlacementArg::Wf => vec![PlacementPolicy::WorstFit],
            PlacementArg::All => PlacementPolicy::ALL.to_vec(),
        }
    }
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}%", 100.0 * v)).unwrap_or_else(|| "n/a".into())
}

fn execute(command: &Command, args: &Args, scenario: Scenario, out: PathBuf) -> Result<(), ExperimentError> {
    let emit = EmitOptions {
        plot_data: args.emit_plot_data,
        plot_bucket: scenario.scheduler.round_length,
    };
    match command {
        Command::Run(_) => {
            let r = experiment::run_single(&scenario, &out, emit)?;
            println!(
                "{}: cost {} | utilization {} | deadlines met {}/{} -> {}",
                r.placement,
                fmt_sig(r.total_cost),
                pct(r.mean_utilization),
                r.met_count(),
                r.outcomes.len(),
                out.join("run").display()
            );
        }
        Command::Sweep(_) => {
            let policies = args.placement.unwrap_or(PlacementArg::All).policies();
            for (p, r) in experiment::sweep(&scenario, &policies, &out, emit)? {
                println!(
                    "{}: cost {} | utilization {} | deadlines met {}/{}",
                    p.short_name(),
                    fmt_sig(r.total_cost),
                    pct(r.mean_utilization),
                    r.met_count(),
                    r.outcomes.len()
                );
            }
        }
        Command::Baseline(_) => {
            let (c, _, _) = experiment::baseline(&scenario, &out, emit)?;
            println!(
                "hybrid cost {} vs cloud-only {}: {:.2}% of baseline ({:.2}% reduction)",
                fmt_sig(c.hybrid_cost),
                fmt_sig(c.cloud_only_cost),
                c.cost_percentage,
                c.cost_reduction_percentage
            );
        }
        Command::Replicate(_) => {
            let s = experiment::replicate(&scenario, &args.seeds, &out, emit)?;
            for r in &s.seeds {
                println!("seed {}: {:.2}% of baseline", r.seed, r.cost_percentage);
            }
            if let Some(a) = s.cost_percentage {
                println!("mean {:.2}% (stddev {:.2}) over {} seeds", a.mean, a.stddev, a.n);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HCS_SIM_LOG", "warn")).init();
    let cli = Cli::parse();
    let args = match &cli.command {
        Command::Run(a) | Command::Sweep(a) | Command::Baseline(a) | Command::Replicate(a) => a,
    };

    let config = match load_scenario(&args.config) {
        Ok(c) => c,
        Err(e) => {
            for line in e.diagnostics() {
                eprintln!("error: {line}");
            }
            return ExitCode::from(1);
        }
    };
    let mut scenario = config.to_scenario();
    if !matches!(cli.command, Command::Sweep(_)) {
        if let Some(p) = args.placement {
            match p.policies()[..] {
                [one] => scenario.scheduler.placement = one,
                _ => {
                    eprintln!("error: --placement all is only valid with sweep");
                    return ExitCode::from(1);
                }
            }
        }
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    match execute(&cli.command, args, scenario, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_invalid_input() { 1 } else { 2 })
        }
    }
}
