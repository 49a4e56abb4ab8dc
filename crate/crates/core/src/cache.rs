//! CPU-side caches in front of the KV machinery.
//!
//! * Response cache: full outputs keyed by prompt hash, token count and a
//!   sampling fingerprint. Sampling is seeded from the prompt, so a repeat
//!   request is answered without touching the model.
//! * Render cache: rendered prompt text keyed by the structural digest of
//!   the message list.
//! * Tokenize cache: token ids keyed by rendered text. A miss whose text
//!   extends a cached entry lexes only the new suffix.

use std::hash::Hash;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::fnv::fnv1a64_tokens;
use crate::model::{Tokenized, Tokenizer};
use crate::Token;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub response_entries: usize,
    pub render_entries: usize,
    pub tokenize_entries: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            response_entries: 1024,
            render_entries: 256,
            tokenize_entries: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
    pub capacity: usize,
}

/// Thread-safe LRU with hit/miss counters.
pub struct CountedLru<K: Hash + Eq, V> {
    inner: Mutex<LruCache<K, V>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<K: Hash + Eq, V: Clone> CountedLru<K, V> {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        Self {
            inner: Mutex::new(LruCache::new(cap)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn get(&self, key: &K) -> Option<V> {
        let v = self.inner.lock().get(key).cloned();
        let counter = if v.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        v
    }

    /// Lookup that neither counts nor promotes.
    pub fn peek(&self, key: &K) -> Option<V> {
        self.inner.lock().peek(key).cloned()
    }

    pub fn put(&self, key: K, value: V) {
        self.inner.lock().put(key, value);
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.inner.lock().clear();
    }

    pub fn counters(&self) -> CacheCounters {
        let inner = self.inner.lock();
        CacheCounters {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: inner.len(),
            capacity: inner.cap().get(),
        }
    }
}

/// Everything besides the prompt that changes the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplingFingerprint {
    pub temperature_bits: u64,
    pub max_tokens: u32,
    pub tool_digest: u64,
    pub seed: Option<u64>,
    pub early_stop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResponseKey {
    pub prompt_hash: u64,
    pub token_count: usize,
    pub sampling: SamplingFingerprint,
}

impl ResponseKey {
    pub fn new(tokens: &[Token], sampling: SamplingFingerprint) -> Self {
        Self {
            prompt_hash: fnv1a64_tokens(tokens),
            token_count: tokens.len(),
            sampling,
        }
    }
}

pub type ResponseCache<V> = CountedLru<ResponseKey, Arc<V>>;

pub type RenderCache = CountedLru<u64, Arc<str>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizeSource {
    Hit,
    /// Lexed only past a cached prefix.
    Extended,
    Full,
}

/// Tokenize cache with prefix-delta lexing.
pub struct TokenizeCache {
    lru: CountedLru<Arc<str>, Arc<Tokenized>>,
    pieces_lexed: AtomicU64,
}

impl TokenizeCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            lru: CountedLru::new(capacity),
            pieces_lexed: AtomicU64::new(0),
        }
    }

    /// Tokenizes `text`, lexing only what no cached entry already covers.
    /// Returns the tokens, how they were obtained, and the pieces lexed.
    pub fn tokenize(
        &self,
        tokenizer: &Tokenizer,
        text: Arc<str>,
    ) -> (Arc<Tokenized>, TokenizeSource, usize) {
        if let Some(hit) = self.lru.get(&text) {
            return (hit, TokenizeSource::Hit, 0);
        }
        let base = {
            let inner = self.lru.inner.lock();
            inner
                .iter()
                .filter(|(k, v)| k.len() < text.len() && tokenizer.boundary_ok(v, &text))
                .max_by_key(|(k, _)| k.len())
                .map(|(_, v)| Arc::clone(v))
        };
        let (tokenized, source, lexed) = match base {
            Some(prefix) => {
                let (t, lexed) = tokenizer.tokenize_extending(&prefix, Arc::clone(&text));
                (t, TokenizeSource::Extended, lexed)
            }
            None => {
                let t = tokenizer.tokenize_full(Arc::clone(&text));
                let n = t.len();
                (t, TokenizeSource::Full, n)
            }
        };
        self.pieces_lexed.fetch_add(lexed as u64, Ordering::Relaxed);
        let tokenized = Arc::new(tokenized);
        self.lru.put(text, Arc::clone(&tokenized));
        (tokenized, source, lexed)
    }

    pub fn pieces_lexed(&self) -> u64 {
        self.pieces_lexed.load(Ordering::Relaxed)
    }

    pub fn counters(&self) -> CacheCounters {
        self.lru.counters()
    }

    pub fn clear(&self) {
        self.lru.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(temp: f64) -> SamplingFingerprint {
        SamplingFingerprint {
            temperature_bits: temp.to_bits(),
            max_tokens: 128,
            tool_digest: 0,
            seed: None,
            early_stop: true,
        }
    }

    #[test]
    fn response_key_fields_all_matter() {
        let toks = [Token(1), Token(2)];
        assert_eq!(ResponseKey::new(&toks, fp(0.0)), ResponseKey::new(&toks, fp(0.0)));
        assert_ne!(ResponseKey::new(&toks, fp(0.0)), ResponseKey::new(&toks, fp(0.8)));
        assert_ne!(
            ResponseKey::new(&toks, fp(0.0)),
            ResponseKey::new(&toks[..1], fp(0.0))
        );
    }

    #[test]
    fn lru_evicts_oldest_after_capacity() {
        let c: ResponseCache<u32> = CountedLru::new(1024);
        let key = |i: u32| ResponseKey::new(&[Token(i)], fp(0.0));
        for i in 0..1025 {
            c.put(key(i), Arc::new(i));
        }
        assert!(c.get(&key(0)).is_none());
        assert_eq!(c.get(&key(1)).as_deref(), Some(&1));
        assert_eq!(c.len(), 1024);
    }

    #[test]
    fn lru_order_follows_access() {
        let c: CountedLru<u32, u32> = CountedLru::new(2);
        c.put(1, 1);
        c.put(2, 2);
        c.get(&1);
        c.put(3, 3);
        assert!(c.peek(&2).is_none());
        assert!(c.peek(&1).is_some());
        let k = c.counters();
        assert_eq!((k.hits, k.misses), (1, 0));
    }

    #[test]
    fn tokenize_extends_cached_prefix() {
        let tk = Tokenizer::new(32_768);
        let cache = TokenizeCache::new(64);
        let turn1: Arc<str> = "<|user|>\nread the file<|end|>\n".into();
        let (_, src, n) = cache.tokenize(&tk, Arc::clone(&turn1));
        assert_eq!(src, TokenizeSource::Full);
        assert_eq!(n, tk.tokenize(&turn1).len());
        let turn2: Arc<str> = format!("{turn1}<|tool|>\nok done<|end|>\n").into();
        let (t2, src, n) = cache.tokenize(&tk, Arc::clone(&turn2));
        assert_eq!(src, TokenizeSource::Extended);
        assert_eq!(t2.tokens, tk.tokenize(&turn2));
        assert_eq!(n, t2.len() - tk.tokenize(&turn1).len());
        let (_, src, n) = cache.tokenize(&tk, turn2);
        assert_eq!((src, n), (TokenizeSource::Hit, 0));
    }

    #[test]
    fn tokenize_refuses_mid_piece_prefix() {
        let tk = Tokenizer::new(32_768);
        let cache = TokenizeCache::new(8);
        cache.tokenize(&tk, "hel".into());
        let (t, src, _) = cache.tokenize(&tk, "hello".into());
        assert_eq!(src, TokenizeSource::Full);
        assert_eq!(t.tokens, tk.tokenize("hello"));
    }
}
