//! Starts the HTTP server on an ephemeral port and talks to it.

use std::sync::Arc;

use deltaserve::server::ServerHandle;
use deltaserve::{Engine, EngineConfig};
use serde_json::{json, Value};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let srv = ServerHandle::start(Arc::new(Engine::new(EngineConfig::default())?), "127.0.0.1:0")?;
    println!("listening on {}", srv.addr());
    let client = reqwest::blocking::Client::new();

    let body = json!({
        "messages": [{"role": "user", "content": "Give me a one-line summary of the build."}],
        "max_tokens": 16
    });
    for _ in 0..2 {
        let resp = client.post(srv.url("/v1/chat/completions")).json(&body).send()?;
        let cache = resp.headers()["x-cache"].to_str()?.to_string();
        let v: Value = resp.json()?;
        println!("x-cache={cache} content={}", v["choices"][0]["message"]["content"]);
    }

    let flags: Value = client.post(srv.url("/admin/config")).json(&json!({"speculation": false})).send()?.json()?;
    println!("features now {flags}");
    let m: Value = client.get(srv.url("/metrics")).send()?.json()?;
    println!("requests {} / forward calls {}", m["counters"]["requests"], m["ledger"]["forward_calls"]);
    Ok(())
}
