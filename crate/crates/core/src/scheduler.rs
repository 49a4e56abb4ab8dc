//! Continuous batching.
//!
//! One coordination thread owns all KV and radix mutation. Each iteration it
//! admits queued requests under a cell budget, drafts speculative tokens for
//! decoding slots on worker threads, plans a mixed prefill/decode batch and
//! runs it.
//!
//! Prefill covers prompt positions `[0, n-1)`. The final prompt token opens
//! the first decode batch, so a request with `m` restored positions pays
//! exactly `n - m` prompt tokens of forward work.

use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Features, ServeError};
use crate::fnv::fnv1a64_tokens;
use crate::kv::{KvError, UnifiedKvCache};
use crate::metrics::Counters;
use crate::model::{position_seed, sample, DecodeTable, MockModel, Tokenized};
use crate::pool::{SlotGuard, SlotKind};
use crate::radix::{RadixError, RadixTrie};
use crate::speculator::{propose, spec_cap, verify, SpecConfig, SpecState};
use crate::validator::{Signal, Validator};
use crate::{SeqId, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub n_batch: usize,
    pub chunk_min: usize,
    pub chunk_max: usize,
    pub fair_chunk: usize,
    pub high_water: f64,
    pub group_window: usize,
    /// Admission ceiling in cells; `None` means half the KV capacity.
    pub cell_budget: Option<usize>,
    pub latency_sensitive_max_tokens: u32,
    /// How long a request may wait for admission.
    pub admission_deadline_ms: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_batch: 4096,
            chunk_min: 128,
            chunk_max: 4096,
            fair_chunk: 1024,
            high_water: 0.95,
            group_window: 8,
            cell_budget: None,
            latency_sensitive_max_tokens: 32,
            admission_deadline_ms: 30_000,
        }
    }
}

/// Per-slot prefill chunk for `prefilling` slots with pending prompt work.
pub fn chunk_size(cfg: &SchedulerConfig, prefilling: usize, latency_sensitive: bool) -> usize {
    let chunk = (cfg.n_batch / prefilling.max(1)).clamp(cfg.chunk_min, cfg.chunk_max);
    if latency_sensitive && prefilling >= 2 {
        chunk.min(cfg.fair_chunk)
    } else {
        chunk
    }
}

/// What the planner needs to know about one slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotView<'a> {
    pub prompt: &'a [Token],
    /// Next unprocessed prompt position.
    pub cursor: usize,
    /// Prefill stops here (`n - 1`).
    pub prefill_end: usize,
    /// Batch length when decoding: 1 plus the draft length.
    pub decode_len: Option<usize>,
    pub latency_sensitive: bool,
}

impl SlotView<'_> {
    pub fn pending(&self) -> usize {
        self.prefill_end.saturating_sub(self.cursor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Prefill,
    /// Receives the leader's freshly computed cells by aliasing.
    PrefillFollower { leader: usize },
    Decode,
    SpecVerify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub slot: usize,
    pub start: usize,
    pub len: usize,
    pub kind: EntryKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchPlan {
    pub entries: Vec<PlanEntry>,
    pub chunk: usize,
    pub prefill_deferred: bool,
}

impl BatchPlan {
    /// Tokens that go through the model this iteration.
    pub fn forward_tokens(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !matches!(e.kind, EntryKind::PrefillFollower { .. }))
            .map(|e| e.len)
            .sum()
    }

    pub fn decode_entries(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, EntryKind::Decode | EntryKind::SpecVerify))
            .count()
    }
}

/// Groups prefilling slots (indices into `views`) whose next `window`
/// tokens hash equal and whose prompts agree byte for byte up to the end of
/// that window. Group order follows first appearance; leaders come first.
pub fn group_prefills(
    views: &[SlotView<'_>],
    candidates: &[usize],
    window: usize,
    hash: &dyn Fn(&[Token]) -> u64,
) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_key: HashMap<(usize, u64), Vec<usize>> = HashMap::new();
    for &i in candidates {
        let v = &views[i];
        if window == 0 || v.pending() < window {
            groups.push(vec![i]);
            continue;
        }
        let end = v.cursor + window;
        let key = (v.cursor, hash(&v.prompt[v.cursor..end]));
        let slot = by_key.entry(key).or_default();
        let joined = slot.iter().copied().find(|&g| {
            let leader = &views[groups[g][0]];
            leader.prompt[..end] == v.prompt[..end]
        });
        match joined {
            Some(g) => groups[g].push(i),
            None => {
                slot.push(groups.len());
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Builds one iteration's batch. Decode entries always come first and are
/// never held back; prefill is skipped entirely when occupancy is at or
/// above the high-water mark.
pub fn plan_iteration(
    views: &[SlotView<'_>],
    occupancy: usize,
    capacity: usize,
    grouping: bool,
    cfg: &SchedulerConfig,
    hash: &dyn Fn(&[Token]) -> u64,
) -> BatchPlan {
    let mut plan = BatchPlan::default();
    for (i, v) in views.iter().enumerate() {
        if let Some(len) = v.decode_len {
            plan.entries.push(PlanEntry {
                slot: i,
                start: v.prefill_end,
                len,
                kind: if len > 1 {
                    EntryKind::SpecVerify
                } else {
                    EntryKind::Decode
                },
            });
        }
    }
    let prefilling: Vec<usize> = (0..views.len())
        .filter(|&i| views[i].decode_len.is_none() && views[i].pending() > 0)
        .collect();
    if prefilling.is_empty() {
        return plan;
    }
    if occupancy as f64 >= cfg.high_water * capacity as f64 {
        plan.prefill_deferred = true;
        return plan;
    }
    let latency = views.iter().any(|v| v.latency_sensitive);
    let chunk = chunk_size(cfg, prefilling.len(), latency);
    plan.chunk = chunk;
    let groups = if grouping && prefilling.len() >= 2 {
        group_prefills(views, &prefilling, cfg.group_window, hash)
    } else {
        prefilling.iter().map(|&i| vec![i]).collect()
    };
    let mut budget = cfg.n_batch.saturating_sub(plan.forward_tokens());
    for group in groups {
        if budget == 0 {
            break;
        }
        let leader = group[0];
        let lv = &views[leader];
        let own = chunk.min(lv.pending()).min(budget);
        budget -= own;
        plan.entries.push(PlanEntry {
            slot: leader,
            start: lv.cursor,
            len: own,
            kind: EntryKind::Prefill,
        });
        for &f in &group[1..] {
            let fv = &views[f];
            let common = lv.prompt[lv.cursor..lv.cursor + own]
                .iter()
                .zip(&fv.prompt[fv.cursor..fv.prefill_end])
                .take_while(|(a, b)| a == b)
                .count();
            if common > 0 {
                plan.entries.push(PlanEntry {
                    slot: f,
                    start: fv.cursor,
                    len: common,
                    kind: EntryKind::PrefillFollower { leader },
                });
            }
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Admitted,
    Deferred,
    /// Can never fit under the ceiling.
    Rejected,
}

/// Cell-budget admission: the projected cells of every admitted request
/// stay at or below the ceiling.
#[derive(Debug, Clone)]
pub struct Admission {
    budget: usize,
    projected: HashMap<u64, usize>,
    total: usize,
}

impl Admission {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            projected: HashMap::new(),
            total: 0,
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn committed(&self) -> usize {
        self.total
    }

    pub fn try_admit(&mut self, id: u64, cost: usize) -> Decision {
        if cost > self.budget {
            Decision::Rejected
        } else if self.total + cost <= self.budget {
            self.total += cost;
            self.projected.insert(id, cost);
            Decision::Admitted
        } else {
            Decision::Deferred
        }
    }

    /// Lowers a slot's projection as its work is consumed.
    pub fn update(&mut self, id: u64, remaining: usize) {
        if let Some(p) = self.projected.get_mut(&id) {
            let r = remaining.min(*p);
            self.total -= *p - r;
            *p = r;
        }
    }

    pub fn release(&mut self, id: u64) {
        if let Some(p) = self.projected.remove(&id) {
            self.total -= p;
        }
    }
}

/// KV store and radix trie, locked together.
#[derive(Debug)]
pub struct Store {
    pub kv: UnifiedKvCache,
    pub radix: RadixTrie,
}

/// Receives streamed prose deltas.
pub type PieceSink = Box<dyn FnMut(&str) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailPoint {
    /// Fail right after the sequence is acquired.
    AfterAcquire,
    /// Fail after this many decode passes.
    MidDecode(u32),
}

pub(crate) struct Job {
    pub guard: SlotGuard,
    pub prompt: Arc<Tokenized>,
    pub decode: DecodeTable,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u32,
    pub validator: Option<Validator>,
    pub features: Features,
    /// Tokens resident in a session sequence before this request.
    pub session_resident: Option<Vec<Token>>,
    pub fail: Option<FailPoint>,
    pub sink: Option<PieceSink>,
    pub reply: Sender<JobResult>,
    pub deadline: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishKind {
    /// End-of-turn token.
    Stop,
    Length,
    EarlyStop,
}

/// Per-request work counters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SlotStats {
    pub prompt_tokens: usize,
    pub restored: usize,
    pub prefill_tokens: usize,
    pub grouped_cells: usize,
    pub forward_calls: usize,
    pub decode_passes: usize,
    pub spec_proposed: usize,
    pub spec_accepted: usize,
    pub rejected_speculative: usize,
    pub completion_tokens: usize,
    pub radix_committed: usize,
    pub queued_iterations: usize,
}

pub(crate) struct Generation {
    pub guard: SlotGuard,
    pub generated: Vec<Token>,
    /// Decoded non-marker text.
    pub text: String,
    pub validator: Option<Validator>,
    pub finish: FinishKind,
    pub stats: SlotStats,
    /// Tokens resident in the sequence afterwards.
    pub resident: Vec<Token>,
}

pub(crate) struct JobFailure {
    pub guard: SlotGuard,
    pub error: ServeError,
}

pub(crate) type JobResult = Result<Generation, JobFailure>;

pub(crate) enum Msg {
    Submit(Vec<Job>),
    Shutdown,
}

struct Slot {
    id: u64,
    job: Job,
    /// Prompt followed by committed tokens.
    tokens: Vec<Token>,
    cursor: usize,
    generated: Vec<Token>,
    text: String,
    streamed: usize,
    spec: SpecState,
    stats: SlotStats,
    finish: Option<FinishKind>,
    failure: Option<ServeError>,
}

impl Slot {
    fn n(&self) -> usize {
        self.job.prompt.len()
    }

    fn seq(&self) -> SeqId {
        self.job.guard.seq()
    }

    fn decoding(&self) -> bool {
        self.cursor + 1 >= self.n()
    }

    fn remaining_tokens(&self) -> usize {
        self.job.max_tokens - self.generated.len()
    }

    fn projected(&self) -> usize {
        let prompt = if self.generated.is_empty() {
            self.n() - self.cursor
        } else {
            0
        };
        prompt + self.remaining_tokens()
    }

    fn latency_sensitive(&self, cfg: &SchedulerConfig) -> bool {
        self.job.max_tokens <= cfg.latency_sensitive_max_tokens as usize
    }
}

pub(crate) struct CoreConfig {
    pub scheduler: SchedulerConfig,
    pub spec: SpecConfig,
    pub budget: usize,
}

pub(crate) struct Coordinator {
    model: Arc<MockModel>,
    store: Arc<Mutex<Store>>,
    counters: Arc<Counters>,
    features: Arc<RwLock<Features>>,
    cfg: CoreConfig,
    rx: Receiver<Msg>,
    queue: VecDeque<(Job, bool)>,
    slots: Vec<Slot>,
    admission: Admission,
    next_id: u64,
}

type Reply = (Sender<JobResult>, JobResult);

impl Coordinator {
    pub fn new(
        model: Arc<MockModel>,
        store: Arc<Mutex<Store>>,
        counters: Arc<Counters>,
        features: Arc<RwLock<Features>>,
        cfg: CoreConfig,
        rx: Receiver<Msg>,
    ) -> Self {
        let admission = Admission::new(cfg.budget);
        Self {
            model,
            store,
            counters,
            features,
            cfg,
            rx,
            queue: VecDeque::new(),
            slots: Vec::new(),
            admission,
            next_id: 0,
        }
    }

    pub fn run(mut self) {
        loop {
            let idle = self.slots.is_empty();
            let msg = if idle && self.queue.is_empty() {
                match self.rx.recv() {
                    Ok(m) => Some(m),
                    Err(_) => return,
                }
            } else if idle {
                // Queue stalled on capacity held elsewhere; poll gently.
                match self.rx.recv_timeout(Duration::from_millis(1)) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            } else {
                None
            };
            let mut shutdown = false;
            for m in msg.into_iter().chain(std::iter::from_fn(|| self.rx.try_recv().ok())) {
                match m {
                    Msg::Submit(jobs) => self.queue.extend(jobs.into_iter().map(|j| (j, false))),
                    Msg::Shutdown => shutdown = true,
                }
            }
            if shutdown {
                self.abort_all();
                return;
            }
            let mut replies = self.admit();
            if !self.slots.is_empty() {
                replies.extend(self.step());
            }
            // Guards travel inside replies; a dropped receiver drops the
            // guard here, outside the store lock.
            for (tx, r) in replies {
                let _ = tx.send(r);
            }
        }
    }

    fn abort_all(&mut self) {
        let mut replies: Vec<Reply> = Vec::new();
        for (job, _) in self.queue.drain(..) {
            replies.push(fail(job, ServeError::ShuttingDown));
        }
        for slot in self.slots.drain(..) {
            replies.push(fail(slot.job, ServeError::ShuttingDown));
        }
        for (tx, r) in replies {
            let _ = tx.send(r);
        }
    }

    /// FIFO admission with head-of-line blocking.
    fn admit(&mut self) -> Vec<Reply> {
        let mut replies = Vec::new();
        let now = Instant::now();
        let store_handle = Arc::clone(&self.store);
        let mut store = store_handle.lock();
        while let Some((job, _)) = self.queue.front() {
            if job.deadline <= now {
                let (job, _) = self.queue.pop_front().expect("front");
                Counters::bump(&self.counters.timeouts);
                replies.push(fail(job, ServeError::AdmissionTimeout));
                continue;
            }
            let n = job.prompt.len();
            let m = restorable(&store, job, n);
            let cost = n - m + job.max_tokens;
            let id = self.next_id;
            match self.admission.try_admit(id, cost) {
                Decision::Admitted => {
                    self.next_id += 1;
                    let (job, _) = self.queue.pop_front().expect("front");
                    let slot = self.start_slot(&mut store, id, job);
                    Counters::bump(&self.counters.admitted);
                    self.slots.push(slot);
                }
                Decision::Rejected => {
                    let (job, _) = self.queue.pop_front().expect("front");
                    Counters::bump(&self.counters.rejected);
                    let budget = self.admission.budget();
                    replies.push(fail(
                        job,
                        ServeError::BadRequest(format!(
                            "request needs {cost} cells but the admission ceiling is {budget}"
                        )),
                    ));
                }
                Decision::Deferred => {
                    let counted = &mut self.queue.front_mut().expect("front").1;
                    if !*counted {
                        *counted = true;
                        Counters::bump(&self.counters.deferred);
                    }
                    break;
                }
            }
        }
        for slot in &mut self.slots {
            slot.stats.queued_iterations += 0;
        }
        replies
    }

    fn start_slot(&self, store: &mut Store, id: u64, job: Job) -> Slot {
        let n = job.prompt.len();
        let seq = job.guard.seq();
        let mut restored = 0;
        let session_m = job
            .session_resident
            .as_ref()
            .map(|res| common_prefix(res, &job.prompt.tokens).min(n - 1));
        match session_m {
            Some(m) if m > 0 => {
                store.kv.trim(seq, m).expect("session resident covers prefix");
                restored = m;
            }
            _ => {
                store.kv.clear(seq);
                if job.features.radix {
                    let pm = store.radix.longest_prefix(&job.prompt.tokens);
                    let m = pm.len.min(n - 1);
                    if let (Some(h), true) = (pm.holder, m > 0) {
                        store
                            .kv
                            .alias_from_table(h, seq, 0, m)
                            .expect("radix holder covers match");
                        restored = m;
                    }
                }
            }
        }
        Counters::add(&self.counters.restored_cells, restored as u64);
        let spec = SpecState::new(&self.cfg.spec);
        let stats = SlotStats {
            prompt_tokens: n,
            restored,
            ..SlotStats::default()
        };
        Slot {
            id,
            tokens: job.prompt.tokens.clone(),
            job,
            cursor: restored,
            generated: Vec::new(),
            text: String::new(),
            streamed: 0,
            spec,
            stats,
            finish: None,
            failure: None,
        }
    }

    fn step(&mut self) -> Vec<Reply> {
        Counters::bump(&self.counters.iterations);
        let cfg = &self.cfg;
        let active = self.slots.iter().filter(|s| s.decoding()).count();
        // Drafts for decoding slots, computed off the coordinator's state.
        let inputs: Vec<Option<(&[Token], usize)>> = self
            .slots
            .iter()
            .map(|s| {
                (s.decoding() && s.job.features.speculation).then(|| {
                    let cap = spec_cap(active, s.spec.ema, &cfg.spec);
                    let limit = cap.min(s.remaining_tokens().saturating_sub(1));
                    (s.tokens.as_slice(), limit)
                })
            })
            .collect();
        let drafts: Vec<Vec<Token>> = inputs
            .par_iter()
            .map(|inp| match inp {
                Some((hist, limit)) => propose(hist, &cfg.spec, *limit),
                None => Vec::new(),
            })
            .collect();

        let grouping = self.features.read().grouping;
        let store_handle = Arc::clone(&self.store);
        let mut store = store_handle.lock();
        let plan = {
            let views: Vec<SlotView<'_>> = self
                .slots
                .iter()
                .zip(&drafts)
                .map(|(s, d)| SlotView {
                    prompt: &s.job.prompt.tokens,
                    cursor: s.cursor,
                    prefill_end: s.n() - 1,
                    decode_len: s.decoding().then_some(1 + d.len()),
                    latency_sensitive: s.latency_sensitive(&cfg.scheduler),
                })
                .collect();
            plan_iteration(
                &views,
                store.kv.occupancy(),
                store.kv.capacity(),
                grouping,
                &cfg.scheduler,
                &fnv1a64_tokens,
            )
        };
        if plan.prefill_deferred {
            Counters::bump(&self.counters.prefill_deferred_iterations);
        }
        let mut leader_done: HashMap<usize, bool> = HashMap::new();
        for e in &plan.entries {
            match e.kind {
                EntryKind::Prefill => {
                    let ok = self.prefill(&mut store, e.slot, e.len);
                    leader_done.insert(e.slot, ok);
                }
                EntryKind::PrefillFollower { leader } => {
                    if leader_done.get(&leader).copied().unwrap_or(false) {
                        self.follow(&mut store, leader, e.slot, e.len);
                    }
                }
                EntryKind::Decode | EntryKind::SpecVerify => {
                    self.decode(&mut store, e.slot, &drafts[e.slot]);
                }
            }
        }
        for s in &self.slots {
            self.admission.update(s.id, s.projected());
        }

        // Retire finished and failed slots.
        let mut replies = Vec::new();
        let mut i = 0;
        while i < self.slots.len() {
            if self.slots[i].finish.is_none() && self.slots[i].failure.is_none() {
                i += 1;
                continue;
            }
            let slot = self.slots.swap_remove(i);
            self.admission.release(slot.id);
            replies.push(self.retire(&mut store, slot));
        }
        // Restore submission order after swap_remove.
        self.slots.sort_by_key(|s| s.id);
        drop(store);
        replies
    }

    fn append(&self, store: &mut Store, seq: SeqId, n: usize) -> Result<(), KvError> {
        match store.kv.append_cells(seq, n) {
            Err(KvError::CapacityExhausted { requested, free }) => {
                Counters::bump(&self.counters.kv_exhausted);
                let Store { kv, radix } = store;
                let freed = radix.evict(kv, requested - free);
                Counters::add(&self.counters.radix_evicted_cells, freed as u64);
                kv.append_cells(seq, n).map(|_| ())
            }
            r => r.map(|_| ()),
        }
    }

    fn prefill(&mut self, store: &mut Store, i: usize, len: usize) -> bool {
        let seq = self.slots[i].seq();
        if self.append(store, seq, len).is_err() {
            return false;
        }
        let s = &mut self.slots[i];
        let start = s.cursor;
        let prompt = &s.job.prompt.tokens;
        self.model.forward(&prompt[..start], &prompt[start..start + len]);
        self.model.ledger().charge_prefill(len);
        s.cursor += len;
        s.stats.prefill_tokens += len;
        s.stats.forward_calls += 1;
        Counters::bump(&self.counters.prefill_chunks);
        true
    }

    fn follow(&mut self, store: &mut Store, leader: usize, i: usize, len: usize) {
        let donor = self.slots[leader].seq();
        let s = &mut self.slots[i];
        let start = s.cursor;
        if store.kv.seq_alias(donor, s.seq(), start, start + len).is_ok() {
            s.cursor += len;
            s.stats.grouped_cells += len;
            Counters::bump(&self.counters.grouped_followers);
            Counters::add(&self.counters.grouped_cells, len as u64);
        }
    }

    fn decode(&mut self, store: &mut Store, i: usize, draft: &[Token]) {
        let model = Arc::clone(&self.model);
        let seq = self.slots[i].seq();
        let s = &mut self.slots[i];
        let (ctx, last) = s.tokens.split_at(s.tokens.len() - 1);
        let last = last[0];
        let g0 = s.generated.len();
        let (temperature, seed) = (s.job.temperature, s.job.seed);
        let choose = |p: &crate::model::ForwardPass<'_>, k: usize| {
            if temperature <= 0.0 {
                p.argmax(k)
            } else {
                sample(&p.logits(k), temperature, position_seed(seed, g0 + k))
            }
        };
        let mut result = verify(&model, &mut store.kv, seq, ctx, last, draft, choose);
        if let Err(KvError::CapacityExhausted { requested, free }) = result {
            Counters::bump(&self.counters.kv_exhausted);
            let Store { kv, radix } = &mut *store;
            let freed = radix.evict(kv, requested - free);
            Counters::add(&self.counters.radix_evicted_cells, freed as u64);
            let s = &self.slots[i];
            let (ctx, last) = s.tokens.split_at(s.tokens.len() - 1);
            result = verify(&model, &mut store.kv, seq, ctx, last[0], draft, choose);
        }
        let s = &mut self.slots[i];
        let v = match result {
            Ok(v) => v,
            Err(e) => {
                s.failure = Some(ServeError::CapacityExhausted(e.to_string()));
                return;
            }
        };
        let old_kv = s.tokens.len() - 1;
        if g0 == 0 {
            model.ledger().charge_prefill(1);
            s.stats.prefill_tokens += 1;
        }
        s.stats.forward_calls += 1;
        s.stats.decode_passes += 1;
        Counters::bump(&self.counters.decode_passes);
        let specials = *model.tokenizer().specials();
        let mut kept = 0;
        for &tok in &v.committed {
            kept += 1;
            s.generated.push(tok);
            s.tokens.push(tok);
            if tok == specials.end {
                s.finish = Some(FinishKind::Stop);
                break;
            }
            let marker = model.tokenizer().marker_text(tok).is_some();
            let piece = if marker {
                String::new()
            } else {
                s.job.decode.decode(tok)
            };
            s.text.push_str(&piece);
            let mut signal = Signal::Continue;
            if let Some(val) = s.job.validator.as_mut() {
                if tok == specials.tool_call {
                    signal = val.on_piece("", true);
                } else if !marker {
                    signal = val.on_piece(&piece, false);
                }
            }
            stream(s);
            if signal == Signal::EarlyStop && s.job.features.early_stop {
                s.finish = Some(FinishKind::EarlyStop);
                Counters::bump(&self.counters.early_stops);
                break;
            }
            if s.generated.len() >= s.job.max_tokens {
                s.finish = Some(FinishKind::Length);
                break;
            }
        }
        // KV holds everything but the newest committed token.
        if old_kv + kept < store.kv.len(seq) {
            store.kv.trim(seq, old_kv + kept).expect("trim within length");
        }
        let drafted_kept = kept.min(v.outcome.accepted);
        s.spec.update(&v.outcome);
        s.stats.spec_proposed += v.outcome.proposed;
        s.stats.spec_accepted += drafted_kept;
        s.stats.rejected_speculative += v.outcome.proposed - drafted_kept;
        s.stats.completion_tokens += kept;
        model.ledger().charge_decode(kept);
        Counters::add(&self.counters.spec_proposed, v.outcome.proposed as u64);
        Counters::add(&self.counters.spec_accepted, drafted_kept as u64);
        if let Some(FailPoint::MidDecode(n)) = s.job.fail {
            if s.stats.decode_passes >= n as usize {
                s.failure = Some(ServeError::Injected);
            }
        }
    }

    fn retire(&self, store: &mut Store, mut slot: Slot) -> Reply {
        if let Some(err) = slot.failure.take() {
            Counters::bump(&self.counters.failed);
            return fail(slot.job, err);
        }
        let seq = slot.seq();
        let n = slot.n();
        if slot.job.features.radix && store.kv.len(seq) >= n {
            let Store { kv, radix } = store;
            match radix.save(kv, &slot.job.prompt.tokens, seq) {
                Ok(c) => {
                    slot.stats.radix_committed = c;
                    Counters::bump(&self.counters.radix_saves);
                    Counters::add(&self.counters.radix_saved_cells, c as u64);
                }
                Err(RadixError::BudgetExceeded { .. }) | Err(RadixError::SequenceTooShort { .. }) => {
                    Counters::bump(&self.counters.radix_save_rejected);
                }
            }
        }
        let kv_len = store.kv.len(seq);
        let resident = if slot.job.guard.kind() == SlotKind::Session {
            slot.tokens[..kv_len.min(slot.tokens.len())].to_vec()
        } else {
            Vec::new()
        };
        Counters::bump(&self.counters.completed);
        let Job {
            guard,
            validator,
            reply,
            ..
        } = slot.job;
        (
            reply,
            Ok(Generation {
                guard,
                generated: slot.generated,
                text: slot.text,
                validator,
                finish: slot.finish.expect("finished slot"),
                stats: slot.stats,
                resident,
            }),
        )
    }
}

/// Pushes newly settled prose to the slot's sink.
fn stream(s: &mut Slot) {
    let Some(sink) = s.job.sink.as_mut() else {
        return;
    };
    let prose = match &s.job.validator {
        Some(v) => v.prose(),
        None => s.text.as_str(),
    };
    if prose.len() > s.streamed {
        sink(&prose[s.streamed..]);
        s.streamed = prose.len();
    }
}

/// Prompt positions a queued job could restore right now, without touching.
fn restorable(store: &Store, job: &Job, n: usize) -> usize {
    let session = job
        .session_resident
        .as_ref()
        .map(|res| common_prefix(res, &job.prompt.tokens))
        .unwrap_or(0);
    let m = if session > 0 {
        session
    } else if job.features.radix {
        store.radix.peek(&job.prompt.tokens)
    } else {
        0
    };
    m.min(n - 1)
}

fn common_prefix(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn fail(job: Job, error: ServeError) -> Reply {
    (
        job.reply,
        Err(JobFailure {
            guard: job.guard,
            error,
        }),
    )
}
