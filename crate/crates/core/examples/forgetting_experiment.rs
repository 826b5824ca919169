//! Full three-strategy run (naive, odfcl, joint) with the default desk
//! configuration or a TOML file given as the first argument.
//!
//! cargo run --release --example forgetting_experiment [config.toml]

use odfcl::harness::{run_experiment, ExperimentConfig};

fn main() -> odfcl::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => ExperimentConfig::load(path.as_ref())?,
        None => ExperimentConfig::default(),
    };
    let report = run_experiment(&cfg)?;
    print!("{}", report.table());
    println!();
    println!("Accuracy [%] on the base classes only");
    for r in &report.results {
        let row: Vec<String> = r.base_accuracy.iter().map(|a| format!("{:>8.1}", 100.0 * a)).collect();
        println!("{:<10}{}   sim {:.1} s", r.strategy.name(), row.join(""), r.sim_time_s);
    }
    Ok(())
}
