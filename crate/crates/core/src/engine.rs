//! The request pipeline.
//!
//! `chat` runs: response cache → render cache → tokenize cache → slot
//! acquisition → scheduler (radix restore, prefill, speculative decode,
//! validation, radix save) → response assembly. Everything that touches KV
//! state runs on the scheduler's coordination thread; request threads block
//! on a reply channel.

use std::collections::{HashMap, HashSet};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::{
    AssistantMessage, ChatRequest, ChatResponse, Choice, FinishReason, FunctionCall, Rejection,
    Usage, WireToolCall,
};
use crate::cache::{
    CacheConfig, CacheCounters, CountedLru, RenderCache, ResponseCache, ResponseKey,
    SamplingFingerprint, TokenizeCache,
};
use crate::cost::CostParams;
use crate::fnv::{prompt_seed, Fnv64};
use crate::kv::{KvStats, UnifiedKvCache};
use crate::metrics::{CounterSnapshot, Counters};
use crate::model::{
    render_prompt, structural_digest, tool_digest, CostLedger, LedgerSnapshot, MockModel,
    ModelConfig, TemplateError,
};
use crate::pool::{PoolConfig, PoolError, ReleasePolicy, SequencePool, SlotGuard, SlotKind};
use crate::radix::{RadixStats, RadixTrie};
use crate::scheduler::{
    CoreConfig, Coordinator, FailPoint, FinishKind, Generation, Job, JobResult, Msg, PieceSink,
    SchedulerConfig, SlotStats, Store,
};
use crate::speculator::SpecConfig;
use crate::validator::{Validator, ValidatorConfig, Verdict};
use crate::{SeqId, Token};

/// Feature switches; turning everything off gives the stateless baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Features {
    pub radix: bool,
    pub speculation: bool,
    pub response_cache: bool,
    pub grouping: bool,
    pub early_stop: bool,
}

impl Default for Features {
    fn default() -> Self {
        Self {
            radix: true,
            speculation: true,
            response_cache: true,
            grouping: true,
            early_stop: true,
        }
    }
}

impl Features {
    pub const NAMES: [&'static str; 5] =
        ["radix", "speculation", "response_cache", "grouping", "early_stop"];

    pub fn baseline() -> Self {
        Self {
            radix: false,
            speculation: false,
            response_cache: false,
            grouping: false,
            early_stop: false,
        }
    }

    /// Applies named flags; unknown names fail without changing anything.
    pub fn apply(&mut self, flags: &HashMap<String, bool>) -> Result<(), ServeError> {
        let mut next = *self;
        for (name, &on) in flags {
            let slot = match name.as_str() {
                "radix" => &mut next.radix,
                "speculation" => &mut next.speculation,
                "response_cache" => &mut next.response_cache,
                "grouping" => &mut next.grouping,
                "early_stop" => &mut next.early_stop,
                _ => return Err(ServeError::UnknownFlag(name.clone())),
            };
            *slot = on;
        }
        *self = next;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KvConfig {
    pub capacity_cells: usize,
}

impl Default for KvConfig {
    fn default() -> Self {
        Self {
            capacity_cells: 131_072,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub kv: KvConfig,
    pub scheduler: SchedulerConfig,
    pub speculation: SpecConfig,
    pub validator: ValidatorConfig,
    pub cache: CacheConfig,
    pub cost: CostParams,
    pub features: Features,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServeError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("request was not admitted before its deadline")]
    AdmissionTimeout,
    #[error("kv cache exhausted: {0}")]
    CapacityExhausted(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is serving another request")]
    SessionBusy(String),
    #[error("session pool exhausted")]
    SessionPoolExhausted,
    #[error("unknown feature flag `{0}`")]
    UnknownFlag(String),
    #[error("injected failure")]
    Injected,
    #[error("engine is shutting down")]
    ShuttingDown,
}

impl From<TemplateError> for ServeError {
    fn from(e: TemplateError) -> Self {
        ServeError::BadRequest(e.to_string())
    }
}

impl ServeError {
    pub fn status(&self) -> u16 {
        match self {
            ServeError::BadRequest(_) | ServeError::UnknownFlag(_) => 400,
            ServeError::UnknownSession(_) => 404,
            ServeError::SessionBusy(_) | ServeError::SessionPoolExhausted => 409,
            ServeError::Pool(_) | ServeError::AdmissionTimeout | ServeError::ShuttingDown => 503,
            ServeError::CapacityExhausted(_) | ServeError::Injected => 500,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServeError::BadRequest(_) => "invalid_request",
            ServeError::Pool(_) => "acquire_timeout",
            ServeError::AdmissionTimeout => "admission_timeout",
            ServeError::CapacityExhausted(_) => "capacity_exhausted",
            ServeError::UnknownSession(_) => "unknown_session",
            ServeError::SessionBusy(_) => "session_busy",
            ServeError::SessionPoolExhausted => "session_pool_exhausted",
            ServeError::UnknownFlag(_) => "unknown_flag",
            ServeError::Injected => "injected_failure",
            ServeError::ShuttingDown => "shutting_down",
        }
    }
}

/// A served request.
#[derive(Debug, Clone)]
pub struct ChatOutcome {
    pub response: ChatResponse,
    /// Serialized response; a cache hit returns the stored bytes.
    pub body: Arc<str>,
    pub cache_hit: bool,
    /// Generated token ids.
    pub completion: Arc<[Token]>,
    /// Work done for this request; zeroed on a cache hit.
    pub stats: SlotStats,
}

struct CachedResponse {
    response: ChatResponse,
    body: Arc<str>,
    completion: Arc<[Token]>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoolMetrics {
    pub transient_free: usize,
    pub transient_size: usize,
    pub session_free: usize,
    pub session_size: usize,
    pub sessions: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheMetrics {
    pub response: CacheCounters,
    pub render: CacheCounters,
    pub tokenize: CacheCounters,
    pub pieces_lexed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSnapshot {
    pub counters: CounterSnapshot,
    pub ledger: LedgerSnapshot,
    pub kv: KvStats,
    pub radix: RadixStats,
    pub pool: PoolMetrics,
    pub caches: CacheMetrics,
    pub features: Features,
}

struct SessionEntry {
    guard: Option<SlotGuard>,
    resident: Vec<Token>,
}

/// Clears transient sequences as their guards drop. Session state is kept
/// until the session is deleted.
struct ClearTransient {
    store: Arc<Mutex<Store>>,
}

impl ReleasePolicy for ClearTransient {
    fn on_release(&self, seq: SeqId, kind: SlotKind) {
        if kind == SlotKind::Transient {
            self.store.lock().kv.clear(seq);
        }
    }
}

struct Inner {
    cfg: EngineConfig,
    model: Arc<MockModel>,
    store: Arc<Mutex<Store>>,
    pool: SequencePool,
    counters: Arc<Counters>,
    features: Arc<RwLock<Features>>,
    responses: ResponseCache<CachedResponse>,
    renders: RenderCache,
    tokenizes: TokenizeCache,
    sessions: Mutex<HashMap<String, SessionEntry>>,
    session_serial: Mutex<u64>,
    tx: Mutex<Sender<Msg>>,
}

/// Everything a finished job needs to become a response.
struct Pending {
    req: ChatRequest,
    key: Option<ResponseKey>,
    declared: HashSet<String>,
    session: Option<String>,
    prompt_hash: u64,
    seed: u32,
    rx: mpsc::Receiver<JobResult>,
}

enum Prepared {
    Done(ChatOutcome),
    Queued(Box<Job>, Pending),
}

/// The inference engine. Dropping it stops the coordination thread.
pub struct Engine {
    inner: Arc<Inner>,
    worker: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("features", &*self.inner.features.read())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, ServeError> {
        let capacity = cfg.kv.capacity_cells;
        if capacity < 2 {
            return Err(ServeError::BadRequest("kv capacity must be at least 2".into()));
        }
        let budget = cfg.scheduler.cell_budget.unwrap_or(capacity / 2);
        let store = Arc::new(Mutex::new(Store {
            kv: UnifiedKvCache::new(capacity),
            radix: RadixTrie::new(capacity - budget.min(capacity)),
        }));
        let pool = SequencePool::with_policy(
            &cfg.pool,
            Box::new(ClearTransient {
                store: Arc::clone(&store),
            }),
        )?;
        let model = Arc::new(MockModel::new(cfg.model.clone()));
        let counters = Arc::new(Counters::default());
        let features = Arc::new(RwLock::new(cfg.features));
        let (tx, rx) = mpsc::channel();
        let coordinator = Coordinator::new(
            Arc::clone(&model),
            Arc::clone(&store),
            Arc::clone(&counters),
            Arc::clone(&features),
            CoreConfig {
                scheduler: cfg.scheduler.clone(),
                spec: cfg.speculation.clone(),
                budget,
            },
            rx,
        );
        let worker = std::thread::Builder::new()
            .name("deltaserve-scheduler".into())
            .spawn(move || coordinator.run())
            .expect("spawn scheduler thread");
        let inner = Inner {
            responses: CountedLru::new(cfg.cache.response_entries),
            renders: CountedLru::new(cfg.cache.render_entries),
            tokenizes: TokenizeCache::new(cfg.cache.tokenize_entries),
            cfg,
            model,
            store,
            pool,
            counters,
            features,
            sessions: Mutex::new(HashMap::new()),
            session_serial: Mutex::new(0),
            tx: Mutex::new(tx),
        };
        Ok(Self {
            inner: Arc::new(inner),
            worker: Some(worker),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.inner.cfg
    }

    pub fn model(&self) -> &MockModel {
        &self.inner.model
    }

    pub fn ledger(&self) -> &CostLedger {
        self.inner.model.ledger()
    }

    pub fn features(&self) -> Features {
        *self.inner.features.read()
    }

    pub fn set_features(&self, features: Features) {
        *self.inner.features.write() = features;
    }

    pub fn update_features(&self, flags: &HashMap<String, bool>) -> Result<Features, ServeError> {
        let mut f = self.inner.features.write();
        f.apply(flags)?;
        Ok(*f)
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.inner.counters.snapshot()
    }

    pub fn pool(&self) -> &SequencePool {
        &self.inner.pool
    }

    pub fn kv_stats(&self) -> KvStats {
        self.inner.store.lock().kv.stats()
    }

    pub fn radix_stats(&self) -> RadixStats {
        self.inner.store.lock().radix.stats()
    }

    /// Runs `f` with the KV store and radix trie locked.
    pub fn with_store<R>(&self, f: impl FnOnce(&mut UnifiedKvCache, &mut RadixTrie) -> R) -> R {
        let mut s = self.inner.store.lock();
        let Store { kv, radix } = &mut *s;
        f(kv, radix)
    }

    /// Drops every cached prefix and response.
    pub fn clear_caches(&self) {
        self.with_store(|kv, radix| radix.clear(kv));
        self.inner.responses.clear();
        self.inner.renders.clear();
        self.inner.tokenizes.clear();
    }

    pub fn metrics(&self) -> MetricsSnapshot {
        let i = &self.inner;
        let (kv, radix) = {
            let s = i.store.lock();
            (s.kv.stats(), s.radix.stats())
        };
        MetricsSnapshot {
            counters: i.counters.snapshot(),
            ledger: i.model.ledger().snapshot(),
            kv,
            radix,
            pool: PoolMetrics {
                transient_free: i.pool.free(SlotKind::Transient),
                transient_size: i.pool.size(SlotKind::Transient),
                session_free: i.pool.free(SlotKind::Session),
                session_size: i.pool.size(SlotKind::Session),
                sessions: i.sessions.lock().len(),
            },
            caches: CacheMetrics {
                response: i.responses.counters(),
                render: i.renders.counters(),
                tokenize: i.tokenizes.counters(),
                pieces_lexed: i.tokenizes.pieces_lexed(),
            },
            features: *i.features.read(),
        }
    }

    pub fn create_session(&self) -> Result<String, ServeError> {
        let guard = self
            .inner
            .pool
            .try_acquire(SlotKind::Session)
            .ok_or(ServeError::SessionPoolExhausted)?;
        let id = {
            let mut n = self.inner.session_serial.lock();
            *n += 1;
            format!("sess_{:x}_{}", guard.seq().0, *n)
        };
        self.inner.sessions.lock().insert(
            id.clone(),
            SessionEntry {
                guard: Some(guard),
                resident: Vec::new(),
            },
        );
        Ok(id)
    }

    /// Releases the session's sequence and drops its KV state.
    pub fn delete_session(&self, id: &str) -> Result<(), ServeError> {
        let mut sessions = self.inner.sessions.lock();
        match sessions.get(id) {
            None => Err(ServeError::UnknownSession(id.to_string())),
            Some(e) if e.guard.is_none() => Err(ServeError::SessionBusy(id.to_string())),
            Some(_) => {
                let entry = sessions.remove(id).expect("present");
                drop(sessions);
                let guard = entry.guard.expect("idle session");
                self.inner.store.lock().kv.clear(guard.seq());
                drop(guard);
                Ok(())
            }
        }
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatOutcome, ServeError> {
        self.run_one(req, None, None)
    }

    /// Like [`chat`](Self::chat), streaming prose to `sink` as it settles.
    pub fn chat_streaming(&self, req: &ChatRequest, sink: PieceSink) -> Result<ChatOutcome, ServeError> {
        self.run_one(req, Some(sink), None)
    }

    /// Serves a request that fails on purpose at `at`; a test hook for the
    /// release paths.
    pub fn chat_with_failure(&self, req: &ChatRequest, at: FailPoint) -> Result<ChatOutcome, ServeError> {
        self.run_one(req, None, Some(at))
    }

    /// Submits several requests in one scheduler message so they can be
    /// admitted and planned together.
    pub fn chat_many(&self, reqs: &[ChatRequest]) -> Vec<Result<ChatOutcome, ServeError>> {
        let mut out: Vec<Option<Result<ChatOutcome, ServeError>>> = Vec::new();
        let mut jobs = Vec::new();
        let mut pending = Vec::new();
        for (i, r) in reqs.iter().enumerate() {
            match self.prepare(r, None, None) {
                Ok(Prepared::Done(o)) => out.push(Some(Ok(o))),
                Ok(Prepared::Queued(job, p)) => {
                    out.push(None);
                    jobs.push(*job);
                    pending.push((i, p));
                }
                Err(e) => out.push(Some(Err(e))),
            }
        }
        if !jobs.is_empty() && self.inner.tx.lock().send(Msg::Submit(jobs)).is_err() {
            for (i, _) in pending.drain(..) {
                out[i] = Some(Err(ServeError::ShuttingDown));
            }
        }
        for (i, p) in pending {
            out[i] = Some(self.complete(p));
        }
        out.into_iter().map(|o| o.expect("every request answered")).collect()
    }

    fn run_one(
        &self,
        req: &ChatRequest,
        sink: Option<PieceSink>,
        fail: Option<FailPoint>,
    ) -> Result<ChatOutcome, ServeError> {
        match self.prepare(req, sink, fail)? {
            Prepared::Done(o) => Ok(o),
            Prepared::Queued(job, p) => {
                self.inner
                    .tx
                    .lock()
                    .send(Msg::Submit(vec![*job]))
                    .map_err(|_| ServeError::ShuttingDown)?;
                self.complete(p)
            }
        }
    }

    fn prepare(
        &self,
        req: &ChatRequest,
        mut sink: Option<PieceSink>,
        fail: Option<FailPoint>,
    ) -> Result<Prepared, ServeError> {
        let i = &self.inner;
        Counters::bump(&i.counters.requests);
        if req.messages.is_empty() {
            return Err(ServeError::BadRequest("messages must not be empty".into()));
        }
        if req.max_tokens == 0 {
            return Err(ServeError::BadRequest("max_tokens must be at least 1".into()));
        }
        if !req.temperature.is_finite() || req.temperature < 0.0 {
            return Err(ServeError::BadRequest("temperature must be a finite value ≥ 0".into()));
        }
        if let Some(id) = &req.session_id {
            if !i.sessions.lock().contains_key(id) {
                return Err(ServeError::UnknownSession(id.clone()));
            }
        }
        let features = *i.features.read();
        let (messages, tools) = req.to_template()?;

        let digest = structural_digest(&messages, &tools);
        let text = match i.renders.get(&digest) {
            Some(t) => t,
            None => {
                let t: Arc<str> = render_prompt(&messages, &tools)?.into();
                i.renders.put(digest, Arc::clone(&t));
                t
            }
        };
        let (prompt, _, _) = i.tokenizes.tokenize(i.model.tokenizer(), text);

        let key = features.response_cache.then(|| {
            ResponseKey::new(
                &prompt.tokens,
                SamplingFingerprint {
                    temperature_bits: req.temperature.to_bits(),
                    max_tokens: req.max_tokens,
                    tool_digest: tool_digest(&tools),
                    seed: req.seed,
                    early_stop: features.early_stop,
                },
            )
        });
        if let Some(hit) = key.as_ref().and_then(|k| i.responses.get(k)) {
            Counters::bump(&i.counters.response_cache_hits);
            let content = hit.response.choices[0].message.content.clone();
            if let (Some(sink), Some(c)) = (sink.as_mut(), content) {
                if !c.is_empty() {
                    sink(&c);
                }
            }
            return Ok(Prepared::Done(ChatOutcome {
                response: hit.response.clone(),
                body: Arc::clone(&hit.body),
                cache_hit: true,
                completion: Arc::clone(&hit.completion),
                stats: SlotStats {
                    prompt_tokens: prompt.len(),
                    ..SlotStats::default()
                },
            }));
        }

        let (guard, session_resident) = match &req.session_id {
            Some(id) => {
                let mut sessions = i.sessions.lock();
                let entry = sessions
                    .get_mut(id)
                    .ok_or_else(|| ServeError::UnknownSession(id.clone()))?;
                let guard = entry.guard.take().ok_or_else(|| ServeError::SessionBusy(id.clone()))?;
                (guard, Some(std::mem::take(&mut entry.resident)))
            }
            None => (i.pool.acquire(SlotKind::Transient)?, None),
        };
        if fail == Some(FailPoint::AfterAcquire) {
            Counters::bump(&i.counters.failed);
            self.return_session(req.session_id.as_deref(), guard, Vec::new());
            return Err(ServeError::Injected);
        }

        let declared: HashSet<String> = tools.iter().map(|t| t.name.clone()).collect();
        let prompt_hash = {
            let mut h = Fnv64::new();
            h.write_tokens(&prompt.tokens);
            h.finish()
        };
        let seed = match req.seed {
            Some(s) => (s ^ (s >> 32)) as u32,
            None => prompt_seed(&prompt.tokens),
        };
        let (tx, rx) = mpsc::channel();
        let job = Job {
            guard,
            decode: i.model.tokenizer().decode_table(&prompt),
            prompt,
            max_tokens: req.max_tokens as usize,
            temperature: req.temperature,
            seed,
            validator: (!tools.is_empty()).then(|| Validator::new(&i.cfg.validator)),
            features,
            session_resident,
            fail,
            sink,
            reply: tx,
            deadline: Instant::now() + Duration::from_millis(i.cfg.scheduler.admission_deadline_ms),
        };
        Ok(Prepared::Queued(
            Box::new(job),
            Pending {
                req: req.clone(),
                key,
                declared,
                session: req.session_id.clone(),
                prompt_hash,
                seed,
                rx,
            },
        ))
    }

    fn return_session(&self, session: Option<&str>, guard: SlotGuard, resident: Vec<Token>) {
        let Some(id) = session else {
            drop(guard);
            return;
        };
        let mut sessions = self.inner.sessions.lock();
        if let Some(entry) = sessions.get_mut(id) {
            entry.guard = Some(guard);
            entry.resident = resident;
        }
    }

    fn complete(&self, p: Pending) -> Result<ChatOutcome, ServeError> {
        let result = p.rx.recv().map_err(|_| ServeError::ShuttingDown)?;
        let generation = match result {
            Ok(g) => g,
            Err(failure) => {
                self.return_session(p.session.as_deref(), failure.guard, Vec::new());
                return Err(failure.error);
            }
        };
        let Generation {
            guard,
            generated,
            text,
            validator,
            finish,
            stats,
            resident,
        } = generation;
        self.return_session(p.session.as_deref(), guard, resident);

        let response = self.assemble(&p, &generated, text, validator, finish, &stats);
        let completion: Arc<[Token]> = generated.into();
        let body: Arc<str> = serde_json::to_string(&response)
            .expect("response serializes")
            .into();
        if let Some(key) = p.key {
            self.inner.responses.put(
                key,
                Arc::new(CachedResponse {
                    response: response.clone(),
                    body: Arc::clone(&body),
                    completion: Arc::clone(&completion),
                }),
            );
        }
        Ok(ChatOutcome {
            response,
            body,
            cache_hit: false,
            completion,
            stats,
        })
    }

    fn assemble(
        &self,
        p: &Pending,
        generated: &[Token],
        text: String,
        validator: Option<Validator>,
        finish: FinishKind,
        stats: &SlotStats,
    ) -> ChatResponse {
        let id = format!("chatcmpl-{:016x}", p.prompt_hash ^ u64::from(p.seed));
        let length = finish == FinishKind::Length;
        let (content, tool_calls, rejection) = match validator {
            None => (Some(text), None, None),
            Some(v) => {
                let fin = v.finalize(&p.declared);
                match fin.verdict {
                    Verdict::ValidatedCalls(calls) => {
                        let n = calls.len() as u64;
                        Counters::add(&self.inner.counters.tool_calls, n);
                        let wire = calls
                            .into_iter()
                            .enumerate()
                            .map(|(k, c)| {
                                let mut h = Fnv64::new();
                                h.write(id.as_bytes());
                                h.write(&(k as u64).to_le_bytes());
                                WireToolCall {
                                    id: format!("call_{:016x}", h.finish()),
                                    kind: "function".into(),
                                    function: FunctionCall {
                                        name: c.name,
                                        arguments: c.parameters.to_string(),
                                    },
                                }
                            })
                            .collect();
                        let lead = fin.leading_text.trim();
                        let content = (!lead.is_empty()).then(|| lead.to_string());
                        (content, Some(wire), None)
                    }
                    Verdict::TextResponse(t) => (Some(t), None, None),
                    Verdict::Rejected(reason) => {
                        Counters::bump(&self.inner.counters.tool_rejections);
                        let rejection = Rejection {
                            code: reason.code().to_string(),
                            message: reason.message(),
                        };
                        (Some(fin.leading_text), None, Some(rejection))
                    }
                }
            }
        };
        let finish_reason = if tool_calls.is_some() {
            FinishReason::ToolCalls
        } else if length {
            FinishReason::Length
        } else {
            FinishReason::Stop
        };
        let cost = &self.inner.cfg.cost;
        let cached = stats.restored + stats.grouped_cells;
        let usage = Usage {
            prompt_tokens: stats.prompt_tokens as u64,
            completion_tokens: generated.len() as u64,
            total_tokens: (stats.prompt_tokens + generated.len()) as u64,
            cached_prompt_tokens: cached as u64,
            rejected_speculative_tokens: stats.rejected_speculative as u64,
            decode_passes: stats.decode_passes as u64,
            simulated_latency_ms: cost.simulate(
                stats.restored > 0,
                stats.prefill_tokens as u64,
                stats.decode_passes as u64,
            ),
        };
        ChatResponse {
            id,
            object: "chat.completion".into(),
            created: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            model: p.req.model.clone(),
            choices: vec![Choice {
                index: 0,
                message: AssistantMessage {
                    role: "assistant".into(),
                    content,
                    tool_calls,
                },
                finish_reason,
            }],
            usage,
            rejection,
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        let _ = self.inner.tx.lock().send(Msg::Shutdown);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
