use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odfcl::cost::{self, CostConfig};
use odfcl::harness::{self, ExperimentConfig, MetricsReport};
use odfcl::model::HeadShape;
use odfcl::{continual, federation, oracle, Error, Result};

#[derive(Parser)]
#[command(name = "odfcl", version, about = "Federated continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json / report.txt
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-strategy network traces and final checkpoints
        #[arg(long)]
        trace: bool,
    },
    /// Print the table of a finished run
    Report { dir: PathBuf },
    /// Check head gradients against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Print the latency / energy / memory table
    Cost {
        /// Experiment config; its [cost], [head], [plan] and [loss] sections are used
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report as TOML
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize the synthetic dataset with a manifest
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out, trace } => run(&config, &out, trace),
        Command::Report { dir } => {
            let r = MetricsReport::load(&dir)?;
            print!("{}\n{}", r.table(), r.cost.table());
            Ok(())
        }
        Command::Gradcheck { seed, count } => gradcheck(seed, count),
        Command::Cost { config, out } => cost_table(config.as_deref(), out.as_deref()),
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (train, test) = harness::gen_synthetic(&cfg.synthetic_spec(), cfg.seed)?;
            let manifest = continual::write_dataset(&out, &train, &test)?;
            println!("{} train / {} test samples -> {}", train.len(), test.len(), manifest.display());
            Ok(())
        }
    }
}

fn run(config: &Path, out: &Path, trace: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let output = harness::run_experiment_detailed(&cfg)?;
    harness::emit_report(&output.report, out)?;
    if trace {
        output.backbone.save(&out.join("backbone.fcb"))?;
        for (strategy, head) in &output.final_heads {
            head.save(&out.join(format!("head_{}.fch", strategy.name())))?;
        }
        for (strategy, events) in &output.traces {
            let path = out.join(format!("trace_{}.csv", strategy.name()));
            std::fs::write(&path, federation::trace_csv(events)).map_err(|e| Error::io(&path, e))?;
        }
    }
    print!("{}", output.report.table());
    Ok(())
}

fn gradcheck(seed: u64, count: usize) -> Result<()> {
    let cases = oracle::gradcheck_suite(seed, count)?;
    let mut failed = 0;
    for c in &cases {
        println!(
            "seed {:>4}  {:<8}  params {:>3}  max rel {:.2e}  max abs {:.2e}  {}",
            c.seed,
            format!("{:?}", c.branch),
            c.parameter_count,
            c.comparison.max_rel_error,
            c.comparison.max_abs_error,
            if c.comparison.passed { "ok" } else { "FAIL" }
        );
        failed += usize::from(!c.comparison.passed);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", cases.len())));
    }
    println!("all {} gradient checks passed", cases.len());
    Ok(())
}

fn cost_table(config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cost_cfg, shape, nodes, batch) = match config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let plan = cfg.plan.build()?;
            let shape = HeadShape::new(cfg.backbone.feature_dim, cfg.head.hidden_dim, plan.num_classes());
            (cfg.cost, shape, plan.num_nodes(), cfg.loss.batch_size)
        }
        None => {
            let cfg = ExperimentConfig::default();
            let shape = HeadShape::new(cfg.backbone.feature_dim, cfg.head.hidden_dim, cfg.plan.classes);
            (CostConfig::default(), shape, cfg.plan.nodes, cfg.loss.batch_size)
        }
    };
    let report = cost::cost_report(&cost_cfg, shape, nodes, batch)?;
    print!("{}", report.table());
    if let Some(path) = out {
        std::fs::write(path, report.to_toml()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
