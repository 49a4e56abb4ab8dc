//! Three agents sharing one server under each dispatch order, plus the
//! 8-way burst.

use deltaserve::workload::{burst, multi_agent, Dispatch};
use deltaserve::{Engine, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut scenarios: Vec<_> = [Dispatch::Sequential, Dispatch::Interleaved, Dispatch::RoundRobin]
        .into_iter()
        .map(|d| multi_agent(d, "example"))
        .collect();
    scenarios.push(burst("example", 8, 5));

    for s in scenarios {
        let engine = Engine::new(EngineConfig::default())?;
        let report = s.run(&engine)?;
        let prefill: u64 = report.turns.iter().map(|t| t.metrics.prefill_tokens).sum();
        let prompt: u64 = report.turns.iter().map(|t| t.metrics.n_t).sum();
        let sim: f64 = report.turns.iter().map(|t| t.metrics.simulated_ms).sum();
        println!(
            "{:<24} {:>3} requests, prefilled {:>5} of {:>6} prompt tokens, simulated {:>8.1}ms",
            report.name,
            report.turns.len(),
            prefill,
            prompt,
            sim
        );
    }
    Ok(())
}
