//! Streaming tool-call validation: brace tracking, early stop and the
//! declared-tool filter.

use std::collections::HashSet;

use deltaserve::validator::{Signal, Validator, ValidatorConfig};

fn run(label: &str, pieces: &[&str], declared: &HashSet<String>) {
    let mut v = Validator::new(&ValidatorConfig::default());
    v.on_piece("<|tool_call|>", true);
    let mut consumed = 0;
    for p in pieces {
        consumed += 1;
        if v.on_piece(p, false) == Signal::EarlyStop {
            break;
        }
    }
    let done = v.finalize(declared);
    println!("{label}: stopped after {consumed}/{} pieces -> {:?}", pieces.len(), done.verdict);
}

fn main() {
    let declared: HashSet<String> = ["get_weather".to_string()].into();
    let tail = [" I", " will", " now", " explain", " what", " the", " weather", " tool", " does", "."];

    let mut good = vec![r#"{"name": "get_"#, r#"weather", "parameters""#, r#": {"city": "Oslo"}}"#];
    good.extend(tail);
    run("declared", &good, &declared);

    let mut bad = vec![r#"{"name": "book_flight", "#, r#""parameters": {}}"#];
    bad.extend(tail);
    run("hallucinated", &bad, &declared);

    run("broken json", &[r#"{"name": get_weather}"#, " trailing"], &declared);
}
