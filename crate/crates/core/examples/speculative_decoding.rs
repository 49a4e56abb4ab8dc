//! Prompt-lookup drafting: n-gram matches against the context, verified in
//! one forward pass.

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::speculator::lookup_ngram;
use deltaserve::{Engine, EngineConfig, Token};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ctx: Vec<Token> = [5, 6, 7, 8, 9, 10, 11, 1, 2, 5, 6, 7].map(Token).to_vec();
    let draft = lookup_ngram(&ctx, &ctx[ctx.len() - 3..], 2, 4);
    println!("tail [5 6 7] earlier continued with {:?}", draft.iter().map(|t| t.0).collect::<Vec<_>>());

    let req = ChatRequest::new(vec![WireMessage::user(
        "Copy this line twice: let total = items.iter().map(|i| i.price * i.qty).sum::<u64>();\n\
         <|assistant|>\nlet total = items.iter().map(|i| i.price * i.qty).sum::<u64>();",
    )])
    .max_tokens(40);

    let mut transcripts = Vec::new();
    for speculation in [true, false] {
        let mut cfg = EngineConfig::default();
        cfg.features.speculation = speculation;
        let out = Engine::new(cfg)?.chat(&req)?;
        println!(
            "speculation={speculation:<5} {} tokens in {} decode passes ({} drafts accepted of {})",
            out.stats.completion_tokens, out.stats.decode_passes, out.stats.spec_accepted, out.stats.spec_proposed
        );
        transcripts.push(out.completion);
    }
    println!("identical output: {}", transcripts[0] == transcripts[1]);
    Ok(())
}
