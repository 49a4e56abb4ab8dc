//! Metadata-only prefix sharing in the unified KV cache.

use deltaserve::kv::{estimate_bytes, SpanSource, UnifiedKvCache};
use deltaserve::SeqId;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut kv = UnifiedKvCache::new(16_384);
    let donor = SeqId(0);
    kv.append_cells(donor, 10_000)?;

    for (dest, len) in [(SeqId(1), 100), (SeqId(2), 10_000)] {
        let before = kv.stats().span_insertions;
        kv.seq_alias(donor, dest, 0, len)?;
        println!(
            "alias {len:>6} positions -> {dest}: {} span(s), {} insertion(s), occupancy {}",
            kv.span_count(dest),
            kv.stats().span_insertions - before,
            kv.occupancy()
        );
    }

    // Appending to an alias allocates only the new cells.
    kv.append_cells(SeqId(1), 50)?;
    let layout: Vec<String> = kv
        .spans(SeqId(1))
        .iter()
        .map(|sp| format!("[{}..{}) {}", sp.start, sp.start + sp.len, match sp.source { SpanSource::Alias(_) => "aliased", SpanSource::Owned(_) => "owned" }))
        .collect();
    println!("{} after 50 appended: {}", SeqId(1), layout.join(", "));

    kv.clear(donor);
    kv.clear(SeqId(2));
    println!("after clearing donor and seq2: occupancy {} (the donor table stays live while seq1 aliases it)", kv.occupancy());
    kv.check_invariants()?;

    let bytes = estimate_bytes(32, 4096, 1000, 2);
    println!("1000 tokens on a 32-layer, 4096-wide fp16 model: {bytes} bytes (~{} MB)", bytes / 1_000_000);
    Ok(())
}
