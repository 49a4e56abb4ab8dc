//! Deterministic stand-in for the served model.
//!
//! The greedy choice at each position follows a copy rule: if the trailing
//! `copy_min_match`-gram of the preceding sequence occurred earlier, the top
//! logit goes to the token that followed its most recent earlier occurrence;
//! otherwise it goes to `FNV-1a(preceding sequence) mod V`.

pub mod template;
pub mod tokenizer;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fnv::Fnv64;
use crate::Token;

pub use template::{
    render_chat, render_prompt, structural_digest, tool_digest, Message, RenderedCall, Role,
    TemplateError, ToolSchema, GENERATION_PROMPT,
};
pub use tokenizer::{DecodeTable, Tokenized, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: u32,
    pub hidden: u32,
    pub vocab: u32,
    pub copy_min_match: usize,
    pub bytes_per_value: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 32,
            hidden: 4096,
            vocab: 32_768,
            copy_min_match: 3,
            bytes_per_value: 2,
        }
    }
}

const TOP_LOGIT: f32 = 8.0;

/// Scores for one position.
#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    Dense(Vec<f32>),
    /// One dominant entry over hash-derived noise in `[0, 1)`; values are
    /// computed on demand so a position never materializes `V` floats
    /// unless it is sampled at non-zero temperature.
    Peaked { vocab: u32, top: Token, noise_seed: u64 },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl Logits {
    pub fn len(&self) -> usize {
        match self {
            Logits::Dense(v) => v.len(),
            Logits::Peaked { vocab, .. } => *vocab as usize,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: u32) -> f32 {
        match self {
            Logits::Dense(v) => v[id as usize],
            Logits::Peaked {
                top, noise_seed, ..
            } => {
                if id == top.0 {
                    TOP_LOGIT
                } else {
                    (splitmix64(noise_seed ^ u64::from(id)) >> 40) as f32 / (1u64 << 24) as f32
                }
            }
        }
    }

    /// Argmax with lowest-id tie-break.
    pub fn argmax(&self) -> Token {
        match self {
            Logits::Peaked { top, .. } => *top,
            Logits::Dense(v) => {
                let mut best = 0usize;
                for (i, &x) in v.iter().enumerate().skip(1) {
                    if x > v[best] {
                        best = i;
                    }
                }
                Token(best as u32)
            }
        }
    }
}

/// Draws a token. Temperature 0 is argmax; otherwise a softmax draw from a
/// ChaCha8 stream seeded with `seed`.
pub fn sample(logits: &Logits, temperature: f64, seed: u32) -> Token {
    if temperature <= 0.0 || logits.len() <= 1 {
        return logits.argmax();
    }
    let n = logits.len() as u32;
    let max = f64::from(logits.value(logits.argmax().0));
    let weight = |id: u32| ((f64::from(logits.value(id)) - max) / temperature).exp();
    let total: f64 = (0..n).map(weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let mut target = rng.gen::<f64>() * total;
    for id in 0..n {
        target -= weight(id);
        if target <= 0.0 {
            return Token(id);
        }
    }
    Token(n - 1)
}

/// Per-position sampler seed derived from the request seed.
pub fn position_seed(seed: u32, position: usize) -> u32 {
    let mut h = crate::fnv::Fnv32::new();
    h.write(&seed.to_le_bytes());
    h.write(&(position as u64).to_le_bytes());
    h.finish()
}

/// Run-wide work counters. Forward calls record batch sizes; callers
/// attribute those tokens to prefill or decode.
#[derive(Debug, Default)]
pub struct CostLedger {
    forward_calls: AtomicU64,
    tokens_processed: AtomicU64,
    prefill_tokens: AtomicU64,
    decode_tokens: AtomicU64,
    decode_passes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub forward_calls: u64,
    pub tokens_processed: u64,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub decode_passes: u64,
}

impl LedgerSnapshot {
    pub fn since(&self, earlier: &LedgerSnapshot) -> LedgerSnapshot {
        LedgerSnapshot {
            forward_calls: self.forward_calls - earlier.forward_calls,
            tokens_processed: self.tokens_processed - earlier.tokens_processed,
            prefill_tokens: self.prefill_tokens - earlier.prefill_tokens,
            decode_tokens: self.decode_tokens - earlier.decode_tokens,
            decode_passes: self.decode_passes - earlier.decode_passes,
        }
    }
}

impl CostLedger {
    pub fn charge_prefill(&self, tokens: usize) {
        self.prefill_tokens
            .fetch_add(tokens as u64, Ordering::Relaxed);
    }

    pub fn charge_decode(&self, tokens: usize) {
        self.decode_tokens.fetch_add(tokens as u64, Ordering::Relaxed);
        self.decode_passes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            forward_calls: self.forward_calls.load(Ordering::Relaxed),
            tokens_processed: self.tokens_processed.load(Ordering::Relaxed),
            prefill_tokens: self.prefill_tokens.load(Ordering::Relaxed),
            decode_tokens: self.decode_tokens.load(Ordering::Relaxed),
            decode_passes: self.decode_passes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
pub struct MockModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    ledger: Arc<CostLedger>,
}

impl MockModel {
    pub fn new(config: ModelConfig) -> Self {
        assert!(config.layers > 0 && config.hidden > 0 && config.vocab > 0);
        assert!(config.copy_min_match > 0);
        let tokenizer = Tokenizer::new(config.vocab);
        Self {
            config,
            tokenizer,
            ledger: Arc::new(CostLedger::default()),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn ledger(&self) -> &Arc<CostLedger> {
        &self.ledger
    }

    /// One forward pass of `batch` on top of the resident `context`.
    /// Logits per position are evaluated lazily through the returned pass.
    pub fn forward<'a>(&'a self, context: &'a [Token], batch: &'a [Token]) -> ForwardPass<'a> {
        assert!(!batch.is_empty(), "forward on empty batch");
        self.ledger.forward_calls.fetch_add(1, Ordering::Relaxed);
        self.ledger
            .tokens_processed
            .fetch_add(batch.len() as u64, Ordering::Relaxed);
        ForwardPass {
            model: self,
            context,
            batch,
            context_hash: OnceLock::new(),
        }
    }
}

pub struct ForwardPass<'a> {
    model: &'a MockModel,
    context: &'a [Token],
    batch: &'a [Token],
    context_hash: OnceLock<Fnv64>,
}

impl ForwardPass<'_> {
    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    /// Logits predicting the token after `batch[i]`.
    pub fn logits(&self, i: usize) -> Logits {
        assert!(i < self.batch.len());
        let mut h = *self.context_hash.get_or_init(|| {
            let mut h = Fnv64::new();
            h.write_tokens(self.context);
            h
        });
        h.write_tokens(&self.batch[..=i]);
        let seq = Joined {
            a: self.context,
            b: &self.batch[..=i],
        };
        let vocab = self.model.config.vocab;
        let hash = h.finish();
        let top = copy_rule(&seq, self.model.config.copy_min_match)
            .unwrap_or(Token((hash % u64::from(vocab)) as u32));
        Logits::Peaked {
            vocab,
            top,
            noise_seed: hash,
        }
    }

    pub fn argmax(&self, i: usize) -> Token {
        self.logits(i).argmax()
    }
}

/// Greedy next token of `seq` under the mock model.
pub fn greedy_next(model: &MockModel, seq: &[Token]) -> Token {
    assert!(!seq.is_empty());
    let (ctx, last) = seq.split_at(seq.len() - 1);
    let pass = ForwardPass {
        model,
        context: ctx,
        batch: last,
        context_hash: OnceLock::new(),
    };
    pass.argmax(0)
}

struct Joined<'a> {
    a: &'a [Token],
    b: &'a [Token],
}

impl Joined<'_> {
    fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    #[inline]
    fn at(&self, i: usize) -> Token {
        if i < self.a.len() {
            self.a[i]
        } else {
            self.b[i - self.a.len()]
        }
    }
}

/// Token following the most recent earlier occurrence of the trailing
/// `n`-gram, if one exists.
fn copy_rule(seq: &Joined<'_>, n: usize) -> Option<Token> {
    let len = seq.len();
    if len <= n {
        return None;
    }
    let tail = len - n;
    let last = seq.at(len - 1);
    // Occurrence at [j, j+n) needs a follower at j+n < len.
    (0..tail).rev().find_map(|j| {
        (seq.at(j + n - 1) == last && (0..n - 1).all(|o| seq.at(j + o) == seq.at(tail + o)))
            .then(|| seq.at(j + n))
    })
}
