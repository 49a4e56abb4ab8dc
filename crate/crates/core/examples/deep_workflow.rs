//! The 35-turn coding conversation, stateful vs baseline, with per-turn CSV
//! output.
//!
//! `cargo run --example deep_workflow -- out.csv` writes the stateful run's
//! metrics to `out.csv`; without an argument the CSV goes to stdout.

use deltaserve::cost::{fill_deltas, totals, write_csv};
use deltaserve::workload::{deep_coding, median, speedups};
use deltaserve::{Engine, EngineConfig, Features};

fn run(features: Features) -> Result<Vec<deltaserve::cost::TurnMetrics>, Box<dyn std::error::Error>> {
    let cfg = EngineConfig {
        features,
        ..EngineConfig::default()
    };
    let report = deep_coding("example").run(&Engine::new(cfg)?)?;
    let mut m = report.metrics(0);
    fill_deltas(&mut m);
    Ok(m)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fast = run(Features::default())?;
    let slow = run(Features::baseline())?;
    let s = speedups(&fast, &slow);
    let (standard, cached) = totals(&fast)?;
    eprintln!("turns {}, final prompt {} tokens", fast.len(), fast.last().map_or(0, |t| t.n_t));
    eprintln!("tokens through prefill: {standard} without reuse vs {cached} with it");
    eprintln!("median simulated speedup {:.2}x (turn 1 {:.2}x, turn 35 {:.2}x)", median(&s), s[0], s[s.len() - 1]);

    match std::env::args().nth(1) {
        Some(path) => write_csv(std::fs::File::create(&path)?, &fast)?,
        None => write_csv(std::io::stdout().lock(), &fast)?,
    }
    Ok(())
}
