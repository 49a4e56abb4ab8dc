//! A named session keeps its sequence resident between turns.

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::{Engine, EngineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let engine = Engine::new(EngineConfig::default())?;
    let id = engine.create_session()?;
    println!("session {id}");

    let mut messages = vec![WireMessage::system("You are a release assistant.")];
    for ask in ["List the open blockers.", "Which one is oldest?", "Draft a status note."] {
        messages.push(WireMessage::user(ask));
        let out = engine.chat(&ChatRequest::new(messages.clone()).session(&id).max_tokens(24))?;
        let u = &out.response.usage;
        println!(
            "prompt {:>3} tokens, {:>3} restored from the session, {:>3} prefilled",
            u.prompt_tokens, u.cached_prompt_tokens, out.stats.prefill_tokens
        );
        messages.push(WireMessage::from_response(&out.response.choices[0].message));
    }

    engine.delete_session(&id)?;
    let gone = engine.chat(&ChatRequest::new(messages).session(&id));
    println!("after delete: {}", gone.err().map_or("ok".into(), |e| e.to_string()));
    Ok(())
}
