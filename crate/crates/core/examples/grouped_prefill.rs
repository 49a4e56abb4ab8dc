//! Four cold requests sharing a long preamble, with and without grouped
//! prefill.

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::{Engine, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let preamble: String = (0..180).map(|i| format!(" rule{i}")).collect();
    let reqs: Vec<ChatRequest> = ["parse the log", "fix the test", "rename the module", "bump the version"]
        .iter()
        .map(|task| {
            ChatRequest::new(vec![WireMessage::system(preamble.clone()), WireMessage::user(*task)])
                .max_tokens(8)
        })
        .collect();

    for grouping in [true, false] {
        let mut cfg = EngineConfig::default();
        cfg.features.grouping = grouping;
        let engine = Engine::new(cfg)?;
        let before = engine.ledger().snapshot();
        let outs = engine.chat_many(&reqs);
        let spent = engine.ledger().snapshot().since(&before);
        let grouped: usize = outs.iter().flatten().map(|o| o.stats.grouped_cells).sum();
        println!(
            "grouping={grouping:<5} prefill tokens {:>5}, forward calls {:>3}, cells shared from a leader {grouped}",
            spent.prefill_tokens, spent.forward_calls
        );
    }
    Ok(())
}
