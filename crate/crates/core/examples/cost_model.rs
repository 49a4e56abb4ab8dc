//! The analytic latency model: per-turn predictions for each serving regime
//! and the delta speedup bound.

use deltaserve::cost::{decode_passes, predict_turn, speedup, CostParams, Regime};

fn main() {
    let p = CostParams::default();
    let (delta, m, k) = (150u64, 60u64, 4.0);
    println!("params: {p:?}");
    println!("{:>5} {:>12} {:>12} {:>9} {:>14}", "n_t", "conventional", "radix+pld", "speedup", "prefill bound");
    for turn in [1u64, 6, 12, 24, 35] {
        let n = 400 + delta * (turn - 1);
        let conv = predict_turn(Regime::Conventional, n, n, m, 0.0, &p);
        let fast = if turn == 1 {
            predict_turn(Regime::Conventional, n, n, decode_passes(m, k), 0.0, &p)
        } else {
            predict_turn(Regime::RadixPld, n, delta, m, k, &p)
        };
        let bound = speedup(n, if turn == 1 { 0 } else { n - delta }).expect("growing prompt");
        println!("{n:>5} {conv:>10.1}ms {fast:>10.1}ms {:>8.2}x {bound:>13.2}x", conv / fast);
    }
    println!("cache hit: {:.1}ms", predict_turn(Regime::CacheHit, 0, 0, 0, 0.0, &p));
    println!("{m} tokens at k={k}: {} passes", decode_passes(m, k));
}
