//! Scripted agent workloads.
//!
//! Each turn appends the previous assistant message and a tool result to
//! the conversation, so turn `t`'s prompt strictly extends turn `t-1`'s.
//! The mock model copies from its context, so every tool result (or the
//! opening user message) ends with a demonstration of the reply it should
//! produce next:
//!
//! ```text
//! ...tool output...
//! <|assistant|>
//! <|tool_call|>{"name":"read_file","parameters":{"path":"src/a.rs"}} I will inspect it next.<|end|>
//! ```
//!
//! Greedy decoding copies the most recent occurrence of the generation
//! prompt's trigram, which is this demonstration: a tool call followed by
//! scripted prose that early stop can skip.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{ChatRequest, WireMessage, WireTool};
use crate::cost::{fill_deltas, TurnMetrics};
use crate::engine::{ChatOutcome, Engine, ServeError};

const WORDS: [&str; 96] = [
    "alpha", "buffer", "cache", "delta", "engine", "frame", "graph", "handle", "index", "joint",
    "kernel", "layer", "matrix", "node", "offset", "parser", "query", "route", "shard", "token",
    "update", "vector", "worker", "yield", "zone", "anchor", "batch", "cursor", "driver", "event",
    "filter", "guard", "header", "input", "journal", "key", "ledger", "mutex", "network", "output",
    "packet", "queue", "record", "signal", "table", "unit", "value", "window", "archive", "bridge",
    "channel", "digest", "entry", "field", "gateway", "hash", "item", "job", "label", "module",
    "number", "object", "page", "range", "schema", "target", "upload", "version", "widget", "bound",
    "client", "domain", "export", "format", "group", "host", "import", "limit", "merge", "north",
    "option", "prefix", "ratio", "socket", "thread", "usage", "verify", "width", "apply", "build",
    "check", "deploy", "fetch", "parse", "render", "store",
];

const PROSE: [&str; 40] = [
    "next", "I", "will", "inspect", "the", "result", "and", "then", "continue", "with", "remaining",
    "steps", "carefully", "before", "reporting", "back", "so", "that", "nothing", "is", "missed",
    "while", "keeping", "changes", "small", "focused", "on", "current", "task", "only", "because",
    "reviewers", "prefer", "tidy", "diffs", "after", "each", "edit", "lands", "cleanly",
];

/// Tool set shared by every scripted agent.
pub fn agent_tools() -> Vec<WireTool> {
    let path = json!({"type": "object", "properties": {"path": {"type": "string"}}, "required": ["path"]});
    vec![
        WireTool::function("read_file", "Read a file from the workspace.", path.clone()),
        WireTool::function(
            "write_file",
            "Write content to a workspace file.",
            json!({"type": "object", "properties": {"path": {"type": "string"}, "content": {"type": "string"}}}),
        ),
        WireTool::function(
            "run_tests",
            "Run the test suite for a target.",
            json!({"type": "object", "properties": {"target": {"type": "string"}}}),
        ),
        WireTool::function(
            "search",
            "Search the codebase for a query.",
            json!({"type": "object", "properties": {"query": {"type": "string"}}}),
        ),
        WireTool::function("list_dir", "List a directory.", path),
    ]
}

const SYSTEM_PROMPT: &str = "You are a careful software agent working inside a \
repository. You solve the task by calling tools, one call per turn, and you read \
every tool result before deciding the next step. Prefer small, reviewable edits. \
Never invent file contents; read a file before changing it. When tests fail, \
inspect the failure output and fix the root cause rather than the symptom. Keep \
the user informed with short notes. When the task is complete, reply with a brief \
summary of what changed and why, without calling any tool.";

/// Demonstration text the model will copy as its reply.
pub fn demonstration(call: Option<&(String, Value)>, prose: &str) -> String {
    let mut s = String::from("\n<|assistant|>\n");
    if let Some((name, params)) = call {
        s.push_str("<|tool_call|>");
        s.push_str(&json!({"name": name, "parameters": params}).to_string());
    }
    s.push_str(prose);
    s.push_str("<|end|>");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnScript {
    /// Tool output (or, on the first turn, the task statement).
    pub context: String,
    /// The call the agent should make this turn; `None` for a text reply.
    pub call: Option<(String, Value)>,
    /// Prose following the call in the demonstration.
    pub prose: String,
}

impl TurnScript {
    pub fn message_text(&self) -> String {
        format!("{}{}", self.context, demonstration(self.call.as_ref(), &self.prose))
    }
}

/// One agent's scripted conversation and its running message history.
#[derive(Debug, Clone)]
pub struct Conversation {
    pub agent: usize,
    pub tools: Vec<WireTool>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub turns: Vec<TurnScript>,
    pub messages: Vec<WireMessage>,
    pub session_id: Option<String>,
    next: usize,
}

impl Conversation {
    pub fn new(agent: usize, system: String, tools: Vec<WireTool>, turns: Vec<TurnScript>) -> Self {
        let first = WireMessage::user(turns[0].message_text());
        Self {
            agent,
            tools,
            max_tokens: 128,
            temperature: 0.0,
            turns,
            messages: vec![WireMessage::system(system), first],
            session_id: None,
            next: 0,
        }
    }

    pub fn is_done(&self) -> bool {
        self.next >= self.turns.len()
    }

    pub fn turn(&self) -> usize {
        self.next
    }

    pub fn request(&self) -> ChatRequest {
        let mut r = ChatRequest::new(self.messages.clone())
            .with_tools(self.tools.clone())
            .max_tokens(self.max_tokens)
            .temperature(self.temperature);
        r.session_id = self.session_id.clone();
        r
    }

    /// Appends the reply and the next tool result.
    pub fn record(&mut self, outcome: &ChatOutcome) {
        let msg = &outcome.response.choices[0].message;
        let mut reply = WireMessage::from_response(msg);
        if reply.tool_calls.is_some() {
            reply.content = None;
        }
        self.messages.push(reply);
        self.next += 1;
        if let Some(t) = self.turns.get(self.next) {
            self.messages.push(WireMessage::tool(t.message_text()));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatch {
    /// Each agent runs all its turns before the next starts.
    Sequential,
    /// Turn `t` of every agent is submitted together.
    Interleaved,
    /// Turn-major order, one request at a time.
    RoundRobin,
    /// Independent single-turn requests, `width` at a time.
    Burst { width: usize, iterations: usize },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub dispatch: Dispatch,
    pub conversations: Vec<Conversation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TurnRecord {
    pub agent: usize,
    pub metrics: TurnMetrics,
    pub cache_hit: bool,
    pub content: Option<String>,
    pub tool_calls: Vec<String>,
    pub completion: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub turns: Vec<TurnRecord>,
}

impl ScenarioReport {
    /// Turns of one agent, in order.
    pub fn agent(&self, agent: usize) -> Vec<&TurnRecord> {
        self.turns.iter().filter(|t| t.agent == agent).collect()
    }

    pub fn metrics(&self, agent: usize) -> Vec<TurnMetrics> {
        self.agent(agent).into_iter().map(|t| t.metrics.clone()).collect()
    }
}

fn record(agent: usize, turn: usize, o: &ChatOutcome, wall_ms: f64) -> TurnRecord {
    let u = &o.response.usage;
    let s = &o.stats;
    let msg = &o.response.choices[0].message;
    TurnRecord {
        agent,
        metrics: TurnMetrics {
            turn: turn as u32 + 1,
            n_t: u.prompt_tokens,
            delta_t: 0,
            prefill_tokens: s.prefill_tokens as u64,
            completion_tokens: u.completion_tokens,
            forward_passes: s.forward_calls as u64,
            decode_passes: s.decode_passes as u64,
            spec_proposed: s.spec_proposed as u64,
            spec_accepted: s.spec_accepted as u64,
            aliased_cells: u.cached_prompt_tokens,
            simulated_ms: u.simulated_latency_ms,
            wall_ms,
        },
        cache_hit: o.cache_hit,
        content: msg.content.clone(),
        tool_calls: msg
            .tool_calls
            .iter()
            .flatten()
            .map(|c| format!("{}({})", c.function.name, c.function.arguments))
            .collect(),
        completion: o.completion.iter().map(|t| t.0).collect(),
    }
}

impl Scenario {
    /// Runs every conversation to completion against `engine`.
    pub fn run(&self, engine: &Engine) -> Result<ScenarioReport, ServeError> {
        let mut convs = self.conversations.clone();
        let mut turns = Vec::new();
        let step = |c: &mut Conversation, turns: &mut Vec<TurnRecord>| -> Result<(), ServeError> {
            let t0 = Instant::now();
            let o = engine.chat(&c.request())?;
            turns.push(record(c.agent, c.turn(), &o, t0.elapsed().as_secs_f64() * 1e3));
            c.record(&o);
            Ok(())
        };
        match self.dispatch {
            Dispatch::Sequential => {
                for c in &mut convs {
                    while !c.is_done() {
                        step(c, &mut turns)?;
                    }
                }
            }
            Dispatch::RoundRobin => {
                while convs.iter().any(|c| !c.is_done()) {
                    for c in convs.iter_mut().filter(|c| !c.is_done()) {
                        step(c, &mut turns)?;
                    }
                }
            }
            Dispatch::Interleaved | Dispatch::Burst { .. } => {
                let width = match self.dispatch {
                    Dispatch::Burst { width, .. } => width,
                    _ => convs.len(),
                };
                for chunk in convs.chunks_mut(width.max(1)) {
                    while chunk.iter().any(|c| !c.is_done()) {
                        let live: Vec<usize> = (0..chunk.len()).filter(|&i| !chunk[i].is_done()).collect();
                        let reqs: Vec<ChatRequest> = live.iter().map(|&i| chunk[i].request()).collect();
                        let t0 = Instant::now();
                        let outs = engine.chat_many(&reqs);
                        let wall = t0.elapsed().as_secs_f64() * 1e3;
                        for (&i, o) in live.iter().zip(outs) {
                            let o = o?;
                            let c = &mut chunk[i];
                            turns.push(record(c.agent, c.turn(), &o, wall));
                            c.record(&o);
                        }
                    }
                }
            }
        }
        let mut report = ScenarioReport {
            name: self.name.clone(),
            turns,
        };
        let agents: Vec<usize> = self.conversations.iter().map(|c| c.agent).collect();
        for a in agents {
            let mut ms: Vec<TurnMetrics> = report.metrics(a);
            fill_deltas(&mut ms);
            let mut it = ms.into_iter();
            for t in report.turns.iter_mut().filter(|t| t.agent == a) {
                t.metrics.delta_t = it.next().expect("same length").delta_t;
            }
        }
        Ok(report)
    }
}

/// Deterministic script generator.
pub struct ScriptBuilder {
    rng: ChaCha8Rng,
    salt: String,
    /// Words of tool output per turn.
    pub context_words: usize,
    /// Prose pieces after each call.
    pub prose_words: usize,
}

impl ScriptBuilder {
    pub fn new(seed: u64, salt: &str) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            salt: salt.to_string(),
            context_words: 30,
            prose_words: 10,
        }
    }

    fn word(&mut self) -> &'static str {
        WORDS.choose(&mut self.rng).expect("non-empty")
    }

    fn path(&mut self) -> String {
        let (a, b) = (self.word(), self.word());
        let n: u32 = self.rng.gen_range(0..100);
        format!("src/{}_{a}/{b}{n}.rs", self.salt)
    }

    fn call(&mut self) -> (String, Value) {
        match self.rng.gen_range(0..5) {
            0 => ("read_file".into(), json!({"path": self.path()})),
            1 => {
                let content = format!("fn {}() {{}}", self.word());
                ("write_file".into(), json!({"path": self.path(), "content": content}))
            }
            2 => {
                let w = self.word();
                let target = format!("{}_{w}", self.salt);
                ("run_tests".into(), json!({ "target": target }))
            }
            3 => {
                let q = format!("{} {}", self.word(), self.word());
                ("search".into(), json!({"query": q}))
            }
            _ => ("list_dir".into(), json!({"path": self.path()})),
        }
    }

    /// A sentence of `n` distinct prose words.
    pub fn prose(&mut self, n: usize) -> String {
        let mut words: Vec<&str> = PROSE.to_vec();
        words.shuffle(&mut self.rng);
        let mut s = String::new();
        for w in words.iter().cycle().take(n) {
            s.push(' ');
            s.push_str(w);
        }
        s
    }

    /// Code-like tool output of about `context_words` words.
    fn output(&mut self, header: &str) -> String {
        let mut s = format!("{header}\n");
        let mut i = 0;
        while i < self.context_words {
            let (a, b, c) = (self.word(), self.word(), self.word());
            s.push_str(&format!("let {a}_{i} = {b}.{c}({i});\n"));
            i += 3;
        }
        s.trim_end().to_string()
    }

    /// `turns` turns: tool calls, then a closing text reply.
    pub fn script(&mut self, task: &str, turns: usize) -> Vec<TurnScript> {
        (0..turns)
            .map(|t| {
                let context = if t == 0 {
                    format!("Task ({}): {task}", self.salt)
                } else {
                    let h = format!("Tool result {t} for session {}:", self.salt);
                    self.output(&h)
                };
                let last = t + 1 == turns;
                let call = (!last).then(|| self.call());
                let prose = if last {
                    format!(" Done.{}", self.prose(self.prose_words))
                } else {
                    self.prose(self.prose_words)
                };
                TurnScript {
                    context,
                    call,
                    prose,
                }
            })
            .collect()
    }

    pub fn conversation(&mut self, agent: usize, task: &str, turns: usize) -> Conversation {
        let turns = self.script(task, turns);
        Conversation::new(agent, SYSTEM_PROMPT.to_string(), agent_tools(), turns)
    }
}

const TASKS: [&str; 4] = [
    "fix the failing integration test in the storage layer",
    "add pagination to the listing endpoint",
    "refactor the config loader to support overrides",
    "investigate the flaky retry logic in the client",
];

fn single(name: &str, salt: &str, turns: usize, seed: u64) -> Scenario {
    let mut b = ScriptBuilder::new(seed, salt);
    Scenario {
        name: name.to_string(),
        dispatch: Dispatch::Sequential,
        conversations: vec![b.conversation(0, TASKS[0], turns)],
    }
}

/// One agent, six turns.
pub fn agentic(salt: &str) -> Scenario {
    single("agentic_6", salt, 6, 6)
}

/// One agent, thirty-five turns.
pub fn deep_coding(salt: &str) -> Scenario {
    single("deep_35", salt, 35, 35)
}

/// Three agents with five turns each.
pub fn multi_agent(dispatch: Dispatch, salt: &str) -> Scenario {
    let conversations = (0..3)
        .map(|a| {
            let mut b = ScriptBuilder::new(100 + a as u64, &format!("{salt}a{a}"));
            b.conversation(a, TASKS[a % TASKS.len()], 5)
        })
        .collect();
    let tag = match dispatch {
        Dispatch::Sequential => "sequential",
        Dispatch::Interleaved => "interleaved",
        Dispatch::RoundRobin => "round_robin",
        Dispatch::Burst { .. } => "burst",
    };
    Scenario {
        name: format!("multi_agent_{tag}"),
        dispatch,
        conversations,
    }
}

/// `width`-way concurrent single-turn requests over `iterations` rounds.
pub fn burst(salt: &str, width: usize, iterations: usize) -> Scenario {
    let conversations = (0..width * iterations)
        .map(|i| {
            let mut b = ScriptBuilder::new(1000 + i as u64, &format!("{salt}b{i}"));
            b.conversation(i, TASKS[i % TASKS.len()], 1)
        })
        .collect();
    Scenario {
        name: "burst".into(),
        dispatch: Dispatch::Burst { width, iterations },
        conversations,
    }
}

/// Every scenario family.
pub fn suite(salt: &str) -> Vec<Scenario> {
    vec![
        multi_agent(Dispatch::Sequential, salt),
        multi_agent(Dispatch::Interleaved, salt),
        multi_agent(Dispatch::RoundRobin, salt),
        agentic(salt),
        deep_coding(salt),
        burst(salt, 8, 5),
    ]
}

/// Per-turn speedup of `fast` over `slow` from simulated latencies.
pub fn speedups(fast: &[TurnMetrics], slow: &[TurnMetrics]) -> Vec<f64> {
    fast.iter()
        .zip(slow)
        .map(|(f, s)| s.simulated_ms / f.simulated_ms)
        .collect()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
