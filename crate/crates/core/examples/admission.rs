//! Cell-budget admission and batch planning under memory pressure.

use deltaserve::fnv::fnv1a64_tokens;
use deltaserve::scheduler::{chunk_size, plan_iteration, Admission, SchedulerConfig, SlotView};
use deltaserve::Token;

fn main() {
    let mut adm = Admission::new(10_000);
    for (id, cost) in [(1, 4_000), (2, 5_000), (3, 2_000), (4, 20_000)] {
        println!("request {id} costing {cost:>6} cells: {:?} (committed {})", adm.try_admit(id, cost), adm.committed());
    }
    adm.update(1, 500);
    println!("request 1 now needs 500 more: request 3 -> {:?}", adm.try_admit(3, 2_000));

    let cfg = SchedulerConfig::default();
    for (prefilling, ls) in [(1, false), (4, false), (16, false), (2, true)] {
        println!("chunk with {prefilling:>2} prefilling slots (latency sensitive: {ls}): {}", chunk_size(&cfg, prefilling, ls));
    }

    let long: Vec<Token> = (0..3000).map(Token).collect();
    let short: Vec<Token> = (0..200).map(Token).collect();
    let views = [
        SlotView { prompt: &long, cursor: 0, prefill_end: 2999, decode_len: None, latency_sensitive: false },
        SlotView { prompt: &short, cursor: 199, prefill_end: 199, decode_len: Some(4), latency_sensitive: false },
    ];
    for occupancy in [50_000, 99_000] {
        let plan = plan_iteration(&views, occupancy, 100_000, true, &cfg, &fnv1a64_tokens);
        println!(
            "occupancy {occupancy}: {} entries, {} forward tokens, prefill deferred {}",
            plan.entries.len(),
            plan.forward_tokens(),
            plan.prefill_deferred
        );
    }
}
