//! Fixed pool of sequence ids, split into a transient region for one-shot
//! requests and a session region for long-lived conversations.
//!
//! A [`SlotGuard`] owns a sequence id until it is dropped. Dropping runs the
//! pool's [`ReleasePolicy`] and pushes the id back on its region's free
//! list, so every exit path (normal completion, error return, panic unwind)
//! returns the id exactly once.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SeqId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Transient,
    Session,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub transient: u32,
    pub session: u32,
    #[serde(with = "millis", rename = "acquire_timeout_ms")]
    pub acquire_timeout: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            transient: 12,
            session: 4,
            acquire_timeout: Duration::from_secs(30),
        }
    }
}

impl PoolConfig {
    pub fn total(&self) -> u32 {
        self.transient + self.session
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("no {kind:?} sequence became free within {waited:?}")]
    AcquireTimeout { kind: SlotKind, waited: Duration },
    #[error("pool config needs at least one transient and one session sequence")]
    InvalidConfig,
}

/// What happens to a sequence's state as its guard is dropped.
pub trait ReleasePolicy: Send + Sync {
    fn on_release(&self, seq: SeqId, kind: SlotKind);
}

/// Releases ids without touching any other state.
#[derive(Debug, Default)]
pub struct NoopRelease;

impl ReleasePolicy for NoopRelease {
    fn on_release(&self, _: SeqId, _: SlotKind) {}
}

struct Region {
    free: Vec<SeqId>,
    size: usize,
}

struct Inner {
    transient: Mutex<Region>,
    transient_cv: Condvar,
    session: Mutex<Region>,
    session_cv: Condvar,
    transient_base: u32,
    session_base: u32,
    policy: Box<dyn ReleasePolicy>,
}

impl Inner {
    fn region(&self, kind: SlotKind) -> (&Mutex<Region>, &Condvar) {
        match kind {
            SlotKind::Transient => (&self.transient, &self.transient_cv),
            SlotKind::Session => (&self.session, &self.session_cv),
        }
    }
}

#[derive(Clone)]
pub struct SequencePool {
    inner: Arc<Inner>,
    timeout: Duration,
}

impl fmt::Debug for SequencePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SequencePool")
            .field("free_transient", &self.free(SlotKind::Transient))
            .field("free_session", &self.free(SlotKind::Session))
            .finish()
    }
}

impl SequencePool {
    pub fn new(config: &PoolConfig) -> Result<Self, PoolError> {
        Self::with_policy(config, Box::new(NoopRelease))
    }

    /// Transient ids are `0..transient`, session ids follow.
    pub fn with_policy(
        config: &PoolConfig,
        policy: Box<dyn ReleasePolicy>,
    ) -> Result<Self, PoolError> {
        if config.transient == 0 || config.session == 0 {
            return Err(PoolError::InvalidConfig);
        }
        let region = |base: u32, n: u32| Region {
            // Reverse so the lowest id is handed out first.
            free: (base..base + n).rev().map(SeqId).collect(),
            size: n as usize,
        };
        Ok(Self {
            inner: Arc::new(Inner {
                transient: Mutex::new(region(0, config.transient)),
                transient_cv: Condvar::new(),
                session: Mutex::new(region(config.transient, config.session)),
                session_cv: Condvar::new(),
                transient_base: 0,
                session_base: config.transient,
                policy,
            }),
            timeout: config.acquire_timeout,
        })
    }

    pub fn default_timeout(&self) -> Duration {
        self.timeout
    }

    pub fn acquire(&self, kind: SlotKind) -> Result<SlotGuard, PoolError> {
        self.acquire_timeout(kind, self.timeout)
    }

    /// Blocks until an id of `kind` is free or `timeout` elapses.
    pub fn acquire_timeout(&self, kind: SlotKind, timeout: Duration) -> Result<SlotGuard, PoolError> {
        let (lock, cv) = self.inner.region(kind);
        let deadline = Instant::now() + timeout;
        let mut region = lock.lock();
        loop {
            if let Some(seq) = region.free.pop() {
                return Ok(SlotGuard {
                    seq,
                    kind,
                    pool: Arc::clone(&self.inner),
                });
            }
            if cv.wait_until(&mut region, deadline).timed_out() && region.free.is_empty() {
                return Err(PoolError::AcquireTimeout {
                    kind,
                    waited: timeout,
                });
            }
        }
    }

    /// Non-blocking acquire.
    pub fn try_acquire(&self, kind: SlotKind) -> Option<SlotGuard> {
        self.acquire_timeout(kind, Duration::ZERO).ok()
    }

    pub fn free(&self, kind: SlotKind) -> usize {
        self.inner.region(kind).0.lock().free.len()
    }

    pub fn size(&self, kind: SlotKind) -> usize {
        self.inner.region(kind).0.lock().size
    }

    pub fn in_use(&self, kind: SlotKind) -> usize {
        let r = self.inner.region(kind).0.lock();
        r.size - r.free.len()
    }

    pub fn kind_of(&self, seq: SeqId) -> SlotKind {
        if seq.0 >= self.inner.session_base {
            SlotKind::Session
        } else {
            debug_assert!(seq.0 >= self.inner.transient_base);
            SlotKind::Transient
        }
    }
}

/// Exclusive ownership of one pooled sequence id.
pub struct SlotGuard {
    seq: SeqId,
    kind: SlotKind,
    pool: Arc<Inner>,
}

impl SlotGuard {
    pub fn seq(&self) -> SeqId {
        self.seq
    }

    pub fn kind(&self) -> SlotKind {
        self.kind
    }
}

impl fmt::Debug for SlotGuard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SlotGuard({}, {:?})", self.seq, self.kind)
    }
}

impl Drop for SlotGuard {
    fn drop(&mut self) {
        self.pool.policy.on_release(self.seq, self.kind);
        let (lock, cv) = self.pool.region(self.kind);
        let mut region = lock.lock();
        debug_assert!(!region.free.contains(&self.seq), "double release");
        region.free.push(self.seq);
        drop(region);
        cv.notify_one();
    }
}
