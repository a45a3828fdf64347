use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rrsynth::eval::Direction;
use rrsynth::io::{
    check_gradients, eval_strategy, run_optimize, run_sweep, RunManifest, SweepSpec, EXIT_IO, EXIT_USAGE,
};
use rrsynth::optimizer::OptimizerConfig;

#[derive(Parser)]
#[command(name = "rrsynth", version, about = "Randomized strategy synthesis for recurrent reachability objectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run independent optimization trials and export the best strategy.
    Optimize(RunArgs),
    /// Repeat `optimize` for every value of a builtin objective parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        param: String,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Compare reverse-mode gradients with central differences.
    CheckGradients {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Evaluate a strategy file against an objective.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        objective: PathBuf,
        #[arg(long, default_value_t = 1)]
        memory: usize,
        #[arg(long)]
        strategy: PathBuf,
        #[arg(long, value_enum)]
        direction: Option<DirectionArg>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DirectionArg {
    Minimize,
    Maximize,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Minimize => Direction::Minimize,
            DirectionArg::Maximize => Direction::Maximize,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    objective: PathBuf,
    #[arg(long, default_value_t = 1)]
    memory: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum)]
    direction: Option<DirectionArg>,
    /// Record per-trial wall-clock time in trials.csv.
    #[arg(long)]
    timing: bool,
}

impl RunArgs {
    fn manifest(&self) -> RunManifest {
        let d = OptimizerConfig::default();
        RunManifest {
            graph_path: self.graph.clone(),
            objective_path: self.objective.clone(),
            memory_count: self.memory,
            direction: self.direction.map(Into::into),
            optimizer: OptimizerConfig {
                steps: self.steps.unwrap_or(d.steps),
                learning_rate: self.lr.unwrap_or(d.learning_rate),
                cutoff_threshold: self.cutoff.unwrap_or(d.cutoff_threshold),
                seed: self.seed,
                ..d
            },
            n_trials: self.trials,
            out_dir: self.out.clone(),
            timing: self.timing,
        }
    }
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Optimize(run) => {
            if run.trials == 0 {
                return usage("--trials must be positive");
            }
            run_optimize(&run.manifest()).map(|(code, summary)| {
                println!("best_value {}", summary["best_value"]);
                code
            })
        }
        Command::Sweep { run, param, values } => {
            if values.is_empty() {
                return usage("--values needs at least one value");
            }
            if run.trials == 0 {
                return usage("--trials must be positive");
            }
            let spec = SweepSpec {
                param: param.clone(),
                values: values.clone(),
                trials_per_value: run.trials,
            };
            run_sweep(&run.manifest(), &spec).map(|(code, points)| {
                for p in points {
                    println!("{} {} {}", param, p.param_value, rrsynth::io::value_text(p.best_value));
                }
                code
            })
        }
        Command::CheckGradients {
            run,
            samples,
            corrupt_adjoint,
        } => {
            if *samples == 0 {
                return usage("--samples must be positive");
            }
            check_gradients(&run.manifest(), *samples, *corrupt_adjoint).map(|(code, r)| {
                println!("max_relative_error {:e}", r.max_relative_error);
                println!("unresolved_components {} of {}", r.unresolved, r.components);
                code
            })
        }
        Command::Eval {
            graph,
            objective,
            memory,
            strategy,
            direction,
        } => eval_strategy(graph, objective, *memory, direction.map(Into::into), strategy).map(|(code, report)| {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            code
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_IO)
        }
    }
}
