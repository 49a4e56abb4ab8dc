//! Serve one tool-calling request in-process and print the response.

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::workload::{agent_tools, demonstration};
use deltaserve::{Engine, EngineConfig};
use serde_json::json;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Engine::new(EngineConfig::default())?;

    // The mock model copies recurring context, so a demonstrated call in the
    // prompt is what it will emit.
    let call = ("read_file".to_string(), json!({"path": "src/main.rs"}));
    let content = format!("Show me the entry point.{}", demonstration(Some(&call), " Reading it now."));
    let req = ChatRequest::new(vec![
        WireMessage::system("You are a coding agent."),
        WireMessage::user(content),
    ])
    .with_tools(agent_tools());

    let out = engine.chat(&req)?;
    println!("{}", serde_json::to_string_pretty(&out.response)?);
    println!(
        "prefill {} tokens, {} decode passes, {} completion tokens",
        out.stats.prefill_tokens, out.stats.decode_passes, out.stats.completion_tokens
    );
    Ok(())
}
