//! Exact-repeat requests are answered from the response cache without any
//! model work.

use std::time::Instant;

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::{Engine, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Engine::new(EngineConfig::default())?;
    let req = ChatRequest::new(vec![WireMessage::user("What does the retry policy do?")]).max_tokens(32);

    for attempt in 1..=3 {
        let calls = engine.ledger().snapshot().forward_calls;
        let t0 = Instant::now();
        let out = engine.chat(&req)?;
        println!(
            "attempt {attempt}: cache_hit={:<5} {:>9.3?} forward calls +{} body {} bytes",
            out.cache_hit,
            t0.elapsed(),
            engine.ledger().snapshot().forward_calls - calls,
            out.body.len()
        );
    }

    // Any sampling change is a different key.
    let warmer = engine.chat(&req.clone().temperature(0.7))?;
    println!("temperature 0.7: cache_hit={}", warmer.cache_hit);
    println!("{:?}", engine.metrics().caches);
    Ok(())
}
