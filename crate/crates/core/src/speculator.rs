//! Prompt-lookup speculative decoding.
//!
//! Drafts come from the request's own recent tokens: find the longest
//! suffix of the current tail that occurred earlier, and propose what
//! followed it. A whole draft is checked in one forward pass; the model's
//! own choice at the first mismatch is committed as a bonus, so every pass
//! commits at least one token and the output is exactly what plain decoding
//! would have produced.

use serde::{Deserialize, Serialize};

use crate::kv::{KvError, UnifiedKvCache};
use crate::model::{ForwardPass, MockModel};
use crate::{SeqId, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecConfig {
    /// Recent-token buffer length.
    pub buffer: usize,
    pub min_match: usize,
    pub max_lookahead: usize,
    /// Longest tail suffix considered when matching.
    pub max_tail: usize,
    pub ema_init: f64,
    pub ema_decay: f64,
    pub gate_threshold: f64,
    pub base_cap: usize,
    /// Active-decoder count below which the cap is not halved.
    pub decoders_per_halving: usize,
    pub floor_cap: usize,
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self {
            buffer: 2048,
            min_match: 3,
            max_lookahead: 16,
            max_tail: 64,
            ema_init: 0.5,
            ema_decay: 0.9,
            gate_threshold: 0.30,
            base_cap: 16,
            decoders_per_halving: 4,
            floor_cap: 2,
        }
    }
}

/// Draft length allowed for one slot this iteration.
pub fn spec_cap(active_decoders: usize, ema: f64, cfg: &SpecConfig) -> usize {
    if ema < cfg.gate_threshold {
        return cfg.floor_cap;
    }
    let ratio = active_decoders as f64 / cfg.decoders_per_halving.max(1) as f64;
    let halvings = if ratio <= 1.0 {
        0
    } else {
        ratio.log2().ceil() as u32
    };
    cfg.base_cap.checked_shr(halvings).unwrap_or(0)
}

/// Z-array: `z[i]` is the longest common prefix of `s` and `s[i..]`.
fn z_array(s: &[u64]) -> Vec<usize> {
    let n = s.len();
    let mut z = vec![0; n];
    if n == 0 {
        return z;
    }
    z[0] = n;
    let (mut l, mut r) = (0, 0);
    for i in 1..n {
        if i < r {
            z[i] = z[i - l].min(r - i);
        }
        while i + z[i] < n && s[z[i]] == s[i + z[i]] {
            z[i] += 1;
        }
        if i + z[i] > r {
            l = i;
            r = i + z[i];
        }
    }
    z
}

/// Continuation of the longest suffix of `tail` (at least `min_match`
/// tokens) that occurs in `recent` with a token after it. The most recent
/// occurrence wins ties. Returns at most `n` tokens.
pub fn lookup_ngram(recent: &[Token], tail: &[Token], min_match: usize, n: usize) -> Vec<Token> {
    if n == 0 || tail.len() < min_match || recent.len() < 2 || min_match == 0 {
        return Vec::new();
    }
    // Reverse both so suffix matches become prefix matches.
    let mut s: Vec<u64> = Vec::with_capacity(tail.len() + 1 + recent.len());
    s.extend(tail.iter().rev().map(|t| u64::from(t.0)));
    s.push(u64::MAX);
    s.extend(recent.iter().rev().map(|t| u64::from(t.0)));
    let z = z_array(&s);
    let base = tail.len() + 1;
    let mut best: Option<(usize, usize)> = None;
    // Occurrence ends at `e` (exclusive) and needs recent[e] to exist.
    for e in (1..recent.len()).rev() {
        let len = z[base + recent.len() - e].min(tail.len());
        if len >= min_match && best.is_none_or(|(b, _)| len > b) {
            best = Some((len, e));
        }
    }
    match best {
        Some((_, e)) => recent[e..(e + n).min(recent.len())].to_vec(),
        None => Vec::new(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SpecOutcome {
    pub proposed: usize,
    pub accepted: usize,
    pub forward_passes_used: usize,
}

/// Per-slot acceptance tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecState {
    pub ema: f64,
    pub proposed: u64,
    pub accepted: u64,
    pub passes: u64,
    decay: f64,
}

impl SpecState {
    pub fn new(cfg: &SpecConfig) -> Self {
        Self {
            ema: cfg.ema_init,
            proposed: 0,
            accepted: 0,
            passes: 0,
            decay: cfg.ema_decay,
        }
    }

    pub fn update(&mut self, outcome: &SpecOutcome) {
        self.passes += outcome.forward_passes_used as u64;
        if outcome.proposed == 0 {
            return;
        }
        self.proposed += outcome.proposed as u64;
        self.accepted += outcome.accepted as u64;
        let rate = outcome.accepted as f64 / outcome.proposed as f64;
        self.ema = self.decay * self.ema + (1.0 - self.decay) * rate;
    }
}

/// Draft for one slot given its full token history.
pub fn propose(history: &[Token], cfg: &SpecConfig, limit: usize) -> Vec<Token> {
    let limit = limit.min(cfg.max_lookahead);
    if limit == 0 {
        return Vec::new();
    }
    let recent = &history[history.len().saturating_sub(cfg.buffer)..];
    let tail = &recent[recent.len().saturating_sub(cfg.max_tail)..];
    lookup_ngram(recent, tail, cfg.min_match, limit)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verified {
    /// Accepted drafts followed by the bonus token.
    pub committed: Vec<Token>,
    pub outcome: SpecOutcome,
}

/// Runs `[last, draft..]` through one forward pass on top of `context`
/// (the tokens resident in `seq`), accepting drafts while they equal the
/// token `choose` picks at that position. The KV is trimmed so that it holds
/// `context`, `last` and the accepted drafts; the bonus token is not yet
/// resident.
pub fn verify(
    model: &MockModel,
    kv: &mut UnifiedKvCache,
    seq: SeqId,
    context: &[Token],
    last: Token,
    draft: &[Token],
    choose: impl Fn(&ForwardPass<'_>, usize) -> Token,
) -> Result<Verified, KvError> {
    let old_len = kv.len(seq);
    debug_assert_eq!(old_len, context.len());
    let mut batch = Vec::with_capacity(draft.len() + 1);
    batch.push(last);
    batch.extend_from_slice(draft);
    kv.append_cells(seq, batch.len())?;
    let pass = model.forward(context, &batch);
    let mut committed = Vec::with_capacity(batch.len());
    let mut accepted = 0;
    for s in 0..batch.len() {
        let tok = choose(&pass, s);
        committed.push(tok);
        if s < draft.len() && draft[s] == tok {
            accepted += 1;
        } else {
            break;
        }
    }
    kv.trim(seq, old_len + 1 + accepted)?;
    Ok(Verified {
        committed,
        outcome: SpecOutcome {
            proposed: draft.len(),
            accepted,
            forward_passes_used: 1,
        },
    })
}
