//! Analytic per-turn latency model and speedup arithmetic.
//!
//! A conventional server re-prefills the whole prompt every turn and decodes
//! one token per pass. With prefix restore and prompt-lookup drafts a turn
//! pays one restore, the new tokens, and `⌈m/(k+1)⌉` decode passes. A
//! response-cache hit pays only HTTP overhead.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub t_prefill_per_token_ms: f64,
    pub t_restore_ms: f64,
    pub t_decode_ms: f64,
    pub t_http_ms: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            t_prefill_per_token_ms: 0.5,
            t_restore_ms: 0.5,
            t_decode_ms: 25.0,
            t_http_ms: 1.0,
        }
    }
}

impl CostParams {
    /// Simulated generation time from measured work counters.
    pub fn simulate(&self, restored: bool, prefill_tokens: u64, decode_passes: u64) -> f64 {
        let restore = if restored { self.t_restore_ms } else { 0.0 };
        restore
            + prefill_tokens as f64 * self.t_prefill_per_token_ms
            + decode_passes as f64 * self.t_decode_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Conventional,
    RadixPld,
    CacheHit,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("speedup undefined: n_t = {n_t} does not exceed n_prev = {n_prev}")]
    NoNewTokens { n_t: u64, n_prev: u64 },
    #[error("no turns to total")]
    Empty,
}

/// Decode passes for `m` tokens when every draft of length `k` is accepted.
/// `k` may be fractional (a mean accepted length).
pub fn decode_passes(m: u64, k: f64) -> u64 {
    if m == 0 {
        return 0;
    }
    (m as f64 / (k.max(0.0) + 1.0) - 1e-9).ceil().max(1.0) as u64
}

/// Predicted generation time in milliseconds.
pub fn predict_turn(regime: Regime, n_t: u64, delta_t: u64, m: u64, k: f64, p: &CostParams) -> f64 {
    match regime {
        Regime::Conventional => n_t as f64 * p.t_prefill_per_token_ms + m as f64 * p.t_decode_ms,
        Regime::RadixPld => {
            p.t_restore_ms
                + delta_t as f64 * p.t_prefill_per_token_ms
                + decode_passes(m, k) as f64 * p.t_decode_ms
        }
        Regime::CacheHit => p.t_http_ms,
    }
}

/// `n_t / (n_t - n_prev)`; the first turn (`n_prev = 0`) is 1.
pub fn speedup(n_t: u64, n_prev: u64) -> Result<f64, CostError> {
    if n_prev == 0 && n_t > 0 {
        return Ok(1.0);
    }
    if n_t <= n_prev {
        return Err(CostError::NoNewTokens { n_t, n_prev });
    }
    Ok(n_t as f64 / (n_t - n_prev) as f64)
}

/// Measured counters for one turn of a conversation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    pub turn: u32,
    pub n_t: u64,
    pub delta_t: u64,
    pub prefill_tokens: u64,
    pub completion_tokens: u64,
    pub forward_passes: u64,
    pub decode_passes: u64,
    pub spec_proposed: u64,
    pub spec_accepted: u64,
    pub aliased_cells: u64,
    pub simulated_ms: f64,
    pub wall_ms: f64,
}

/// `(Σ n_t, n_1 + Σ_{t≥2} Δ_t)` over a conversation.
pub fn totals(turns: &[TurnMetrics]) -> Result<(u64, u64), CostError> {
    let first = turns.first().ok_or(CostError::Empty)?;
    let standard = turns.iter().map(|t| t.n_t).sum();
    let cached = first.n_t + turns[1..].iter().map(|t| t.delta_t).sum::<u64>();
    Ok((standard, cached))
}

/// Fills `delta_t` from consecutive prompt lengths.
pub fn fill_deltas(turns: &mut [TurnMetrics]) {
    let mut prev = 0;
    for t in turns {
        t.delta_t = t.n_t.saturating_sub(prev);
        prev = t.n_t;
    }
}

pub fn write_csv<W: Write>(out: W, turns: &[TurnMetrics]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for t in turns {
        w.serialize(t)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(n: u64) -> TurnMetrics {
        TurnMetrics {
            n_t: n,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_radix_is_conventional_plus_restore() {
        let p = CostParams::default();
        let conv = predict_turn(Regime::Conventional, 950, 950, 20, 0.0, &p);
        let radix = predict_turn(Regime::RadixPld, 950, 950, 20, 0.0, &p);
        assert!((radix - conv - p.t_restore_ms).abs() < 1e-9);
    }

    #[test]
    fn pld_decode_term() {
        assert_eq!(decode_passes(20, 11.0), 2);
        assert_eq!(decode_passes(20, 0.0), 20);
        assert_eq!(decode_passes(24, 11.0), 2);
        assert_eq!(decode_passes(25, 11.0), 3);
        let p = CostParams::default();
        let t = predict_turn(Regime::RadixPld, 950, 0, 20, 11.0, &p);
        assert!((t - p.t_restore_ms - 2.0 * p.t_decode_ms).abs() < 1e-9);
    }

    #[test]
    fn cache_hit_is_http_only() {
        let p = CostParams::default();
        for n in [1, 1000, 100_000] {
            assert_eq!(predict_turn(Regime::CacheHit, n, n, 128, 0.0, &p), p.t_http_ms);
        }
    }

    #[test]
    fn speedup_values() {
        assert!((speedup(950, 800).unwrap() - 950.0 / 150.0).abs() < 1e-12);
        assert!((speedup(950, 800).unwrap() - 6.33).abs() < 0.01);
        assert_eq!(speedup(200, 100).unwrap(), 2.0);
        assert_eq!(speedup(500, 0).unwrap(), 1.0);
        assert!(speedup(100, 100).is_err());
        assert!(speedup(90, 100).is_err());
    }

    #[test]
    fn totals_for_growing_conversation() {
        let mut turns: Vec<_> = [200, 350, 500, 650, 800].into_iter().map(turn).collect();
        fill_deltas(&mut turns);
        assert_eq!(totals(&turns).unwrap(), (2500, 800));
        assert_eq!(totals(&turns[..1]).unwrap(), (200, 200));
        assert!(totals(&[]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[turn(10), turn(20)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("turn,n_t,delta_t,"));
        assert_eq!(s.lines().count(), 3);
    }
}
