//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Runs without the libtest harness so the per-criterion lines always reach
//! stdout. Each check keeps its own oracle (reference hash, hand-built
//! tries, recomputed token counts) rather than trusting engine counters.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use deltaserve::api::{ChatRequest, WireMessage};
use deltaserve::cost::{totals, CostParams};
use deltaserve::fnv::prompt_seed;
use deltaserve::kv::{estimate_bytes, UnifiedKvCache};
use deltaserve::model::{render_prompt, Tokenizer};
use deltaserve::pool::{PoolConfig, SlotKind};
use deltaserve::radix::RadixTrie;
use deltaserve::scheduler::{
    plan_iteration, Admission, Decision, EntryKind, FailPoint, SchedulerConfig, SlotView,
};
use deltaserve::speculator::SpecConfig;
use deltaserve::validator::{Validator, ValidatorConfig, Verdict};
use deltaserve::workload::{self, demonstration, median, Conversation, ScriptBuilder};
use deltaserve::{Engine, EngineConfig, Features, SeqId, Token};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn engine(f: impl FnOnce(&mut EngineConfig)) -> Engine {
    let mut cfg = EngineConfig::default();
    f(&mut cfg);
    Engine::new(cfg).expect("engine")
}

/// Independent 32-bit FNV-1a over little-endian token bytes.
fn ref_fnv32(tokens: &[u32]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= u32::from(b);
            h = h.wrapping_mul(0x0100_0193);
        }
    }
    h
}

fn prompt_len(tk: &Tokenizer, req: &ChatRequest) -> usize {
    let (msgs, tools) = req.to_template().expect("valid");
    tk.tokenize(&render_prompt(&msgs, &tools).expect("renders")).len()
}

// 1. Delta-only processing on the 35-turn conversation.
fn c1_delta_only() -> Check {
    let start = Instant::now();
    let e = engine(|_| {});
    let tk = Tokenizer::new(e.config().model.vocab);
    let scenario = workload::deep_coding("c1");
    let mut conv: Conversation = scenario.conversations[0].clone();
    let ledger0 = e.ledger().snapshot();
    let mut prev_n = 0usize;
    let mut cumulative = 0u64;
    let mut last_n = 0usize;
    let mut t = 0;
    while !conv.is_done() {
        t += 1;
        let req = conv.request();
        let n = prompt_len(&tk, &req);
        let o = e.chat(&req).map_err(|e| e.to_string())?;
        let prefill = o.stats.prefill_tokens;
        if t >= 2 {
            ensure!(
                prefill == n - prev_n,
                "turn {t}: prefill {prefill} != delta {}",
                n - prev_n
            );
        }
        cumulative += prefill as u64;
        prev_n = n;
        last_n = n;
        conv.record(&o);
    }
    ensure!(t == 35, "ran {t} turns");
    ensure!(cumulative == last_n as u64, "cumulative prefill {cumulative} != n_35 {last_n}");
    let charged = e.ledger().snapshot().since(&ledger0).prefill_tokens;
    ensure!(charged == cumulative, "ledger prefill {charged} != counted {cumulative}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("35 turns, prefill total {cumulative} = n_35, {elapsed:.2?}"))
}

// 2. Alias cost is independent of prefix length.
fn c2_constant_alias() -> Check {
    const REPS: usize = 400;
    const ROUNDS: usize = 15;
    let mut kv = UnifiedKvCache::new(12_000);
    let donor = SeqId(0);
    kv.append_cells(donor, 10_000).map_err(|e| e.to_string())?;
    let dests: Vec<SeqId> = (1..=REPS as u32).map(SeqId).collect();
    let one_span = |len: usize, kv: &mut UnifiedKvCache| -> Result<(), String> {
        let before = kv.stats().span_insertions;
        kv.seq_alias(donor, dests[0], 0, len).map_err(|e| e.to_string())?;
        let inserted = kv.stats().span_insertions - before;
        let spans = kv.span_count(dests[0]);
        kv.clear(dests[0]);
        ensure!(inserted == 1 && spans == 1, "len {len}: {inserted} insertions, {spans} spans");
        Ok(())
    };
    one_span(100, &mut kv)?;
    one_span(10_000, &mut kv)?;
    let time = |len: usize, kv: &mut UnifiedKvCache| -> Duration {
        let mut samples = Vec::with_capacity(ROUNDS);
        for _ in 0..ROUNDS {
            let t0 = Instant::now();
            for &d in &dests {
                kv.seq_alias(donor, d, 0, len).expect("alias");
            }
            samples.push(t0.elapsed());
            for &d in &dests {
                kv.clear(d);
            }
        }
        samples.sort();
        samples[ROUNDS / 2]
    };
    // Warm both paths before measuring.
    time(100, &mut kv);
    time(10_000, &mut kv);
    let short = time(100, &mut kv);
    let long = time(10_000, &mut kv);
    let ratio = long.as_secs_f64() / short.as_secs_f64();
    ensure!(ratio < 2.0, "time ratio {ratio:.2} (100: {short:?}, 10k: {long:?})");
    Ok(format!("1 span each, time ratio {ratio:.2}"))
}

fn c3_request(tk: &Tokenizer) -> ChatRequest {
    // A tool call that recurs in the context; generation copies it.
    let call = demonstration(
        Some(&(
            "read_file".to_string(),
            json!({"path": "src/storage/segment_writer.rs", "mode": "full"}),
        )),
        " then continue",
    );
    let content = format!("Earlier you replied like this:{call}\nDo the same again.");
    let req = ChatRequest::new(vec![WireMessage::user(content)]).max_tokens(20);
    assert!(prompt_len(tk, &req) > 0);
    req
}

// 3. Prompt lookup turns 20 decoded tokens into 2 forward passes.
fn c3_pld_passes() -> Check {
    let e = engine(|c| {
        // k = 11 drafted tokens per pass, as in "2 batched decodes instead of 20".
        c.speculation = SpecConfig {
            max_lookahead: 11,
            ..SpecConfig::default()
        };
    });
    let tk = Tokenizer::new(e.config().model.vocab);
    let req = c3_request(&tk);
    let l0 = e.ledger().snapshot();
    let o = e.chat(&req).map_err(|e| e.to_string())?;
    let d = e.ledger().snapshot().since(&l0);
    let s = &o.stats;
    ensure!(o.completion.len() == 20, "generated {}", o.completion.len());
    ensure!(s.decode_passes == 2, "{} decode passes", s.decode_passes);
    let decode_calls = d.forward_calls - (s.forward_calls - s.decode_passes) as u64;
    ensure!(decode_calls == 2, "ledger shows {decode_calls} decode forward calls");
    // Oracle: the same request without speculation, one pass per token.
    let plain = engine(|c| c.features.speculation = false);
    let p = plain.chat(&req).map_err(|e| e.to_string())?;
    ensure!(p.stats.decode_passes == 20, "plain decoding used {}", p.stats.decode_passes);
    ensure!(p.completion == o.completion, "speculative output differs from plain decoding");
    Ok(format!(
        "m = 20 in {} passes (accepted {}/{} drafts)",
        s.decode_passes, s.spec_accepted, s.spec_proposed
    ))
}

type Transcript = Vec<(String, Vec<Vec<u32>>)>;

fn transcripts(features: Features) -> Result<Transcript, String> {
    let mut out = Vec::new();
    for s in workload::suite("c4") {
        let e = engine(|c| c.features = features);
        let r = s.run(&e).map_err(|e| e.to_string())?;
        out.push((s.name.clone(), r.turns.iter().map(|t| t.completion.clone()).collect()));
    }
    Ok(out)
}

// 4. Speculation never changes greedy output.
fn c4_spec_correctness() -> Check {
    let on = transcripts(Features {
        response_cache: false,
        ..Features::default()
    })?;
    let off = transcripts(Features {
        response_cache: false,
        speculation: false,
        ..Features::default()
    })?;
    let mut turns = 0;
    let mut tokens = 0;
    for ((name, a), (_, b)) in on.iter().zip(&off) {
        ensure!(a.len() == b.len(), "{name}: turn counts differ");
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            ensure!(x == y, "{name} turn {}: transcripts differ", i + 1);
            turns += 1;
            tokens += x.len();
        }
    }
    Ok(format!("{turns} turns, {tokens} tokens identical"))
}

// 5. Sampling is seeded by the prompt.
fn c5_prompt_determinism() -> Check {
    let req = ChatRequest::new(vec![WireMessage::user(
        "Write a short note about cache eviction policies.",
    )])
    .temperature(0.8)
    .max_tokens(24);
    let run = || -> Result<_, String> {
        let e = engine(|c| c.features.response_cache = false);
        let a = e.chat(&req).map_err(|e| e.to_string())?;
        let b = e.chat(&req).map_err(|e| e.to_string())?;
        Ok((a, b))
    };
    let (a, b) = run()?;
    let (c, _) = run()?;
    ensure!(!a.cache_hit && !b.cache_hit, "cache was consulted");
    for (x, y, what) in [(&a, &b, "same engine"), (&a, &c, "fresh engine")] {
        ensure!(x.completion == y.completion, "{what}: tokens differ");
        ensure!(
            x.response.choices == y.response.choices && x.response.id == y.response.id,
            "{what}: outputs differ"
        );
    }
    let greedy = engine(|c| c.features.response_cache = false)
        .chat(&req.clone().temperature(0.0))
        .map_err(|e| e.to_string())?;
    ensure!(greedy.completion != a.completion, "temperature had no effect");
    // Fixed pair: a prompt and its permutation.
    let p1 = [17u32, 4, 99, 1024];
    let p2 = [4u32, 17, 99, 1024];
    let s1 = prompt_seed(&p1.map(Token));
    let s2 = prompt_seed(&p2.map(Token));
    ensure!(s1 == ref_fnv32(&p1) && s2 == ref_fnv32(&p2), "seed disagrees with reference FNV-1a");
    ensure!(s1 != s2, "permuted prompts share a seed");
    ensure!(prompt_seed(&[]) == 2_166_136_261, "empty seed is not the offset basis");
    Ok(format!("{} tokens reproduced; seeds {s1:#010x} vs {s2:#010x}", a.completion.len()))
}

// 6. Response cache hits are byte-identical and free.
fn c6_response_cache() -> Check {
    let e = engine(|_| {});
    let req = ChatRequest::new(vec![
        WireMessage::system("You are terse."),
        WireMessage::user("List three prime numbers."),
    ]);
    let first = e.chat(&req).map_err(|e| e.to_string())?;
    ensure!(!first.cache_hit, "cold request hit the cache");
    let calls = e.ledger().snapshot().forward_calls;
    let mut lat = Vec::new();
    for _ in 0..21 {
        let t0 = Instant::now();
        let hit = e.chat(&req).map_err(|e| e.to_string())?;
        lat.push(t0.elapsed());
        ensure!(hit.cache_hit, "repeat missed the cache");
        ensure!(hit.body.as_bytes() == first.body.as_bytes(), "body differs");
    }
    let after = e.ledger().snapshot().forward_calls;
    ensure!(after == calls, "forward calls moved {calls} -> {after}");
    let acquired = e.counters().admitted;
    ensure!(acquired == 1, "{acquired} admissions for one miss");
    lat.sort();
    let med = lat[lat.len() / 2];
    ensure!(med < Duration::from_millis(5), "median hit latency {med:?}");
    Ok(format!("identical body, 0 forward calls, median hit {med:?}"))
}

fn lcp(a: &[Token], b: &[Token]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Four prompts whose common token prefix is exactly `shared`.
fn grouped_requests(tk: &Tokenizer, shared: usize) -> Vec<ChatRequest> {
    let users = [
        "Summarise the storage layer design.",
        "Explain the retry policy in the client.",
        "Describe how configuration overrides work.",
        "Outline the pagination strategy for listings.",
    ];
    let build = |words: usize| -> Vec<ChatRequest> {
        let system: String = (0..words).map(|i| format!(" preamble{i}")).collect();
        users
            .iter()
            .map(|u| {
                ChatRequest::new(vec![WireMessage::system(system.clone()), WireMessage::user(*u)])
                    .max_tokens(4)
            })
            .collect()
    };
    for words in 150..260 {
        let reqs = build(words);
        let toks: Vec<Vec<Token>> = reqs
            .iter()
            .map(|r| {
                let (m, t) = r.to_template().unwrap();
                tk.tokenize(&render_prompt(&m, &t).unwrap())
            })
            .collect();
        let common = (1..4).map(|i| lcp(&toks[0], &toks[i])).min().unwrap();
        if common == shared {
            return reqs;
        }
    }
    panic!("no preamble length gives a {shared}-token common prefix");
}

// 7. Grouped prefill computes a shared preamble once.
fn c7_grouped_prefill() -> Check {
    let tk = Tokenizer::new(EngineConfig::default().model.vocab);
    let reqs = grouped_requests(&tk, 200);
    let lens: Vec<usize> = reqs.iter().map(|r| prompt_len(&tk, r)).collect();
    let unshared: usize = lens.iter().map(|n| n - 200).sum();
    let shared_prefill = |grouping: bool| -> Result<u64, String> {
        let e = engine(|c| c.features.grouping = grouping);
        let l0 = e.ledger().snapshot();
        for r in e.chat_many(&reqs) {
            r.map_err(|e| e.to_string())?;
        }
        let total = e.ledger().snapshot().since(&l0).prefill_tokens;
        Ok(total - unshared as u64)
    };
    let on = shared_prefill(true)?;
    let off = shared_prefill(false)?;
    ensure!(on == 200 && off == 800, "shared-region prefill {on} grouped vs {off} ungrouped");
    Ok(format!("shared region: {on} tokens grouped, {off} ungrouped"))
}

fn commit(kv: &mut UnifiedKvCache, trie: &mut RadixTrie, seq: SeqId, tokens: &[Token]) {
    kv.clear(seq);
    let m = trie.longest_prefix(tokens);
    if let Some(h) = m.holder {
        kv.alias_from_table(h, seq, 0, m.len).unwrap();
    }
    kv.append_cells(seq, tokens.len() - m.len).unwrap();
    trie.save(kv, tokens, seq).unwrap();
    kv.clear(seq);
}

/// Shared 200-token branch plus three 50-token tails touched in `order`;
/// returns the tails in eviction order and whether the branch survived.
fn eviction_order(order: &[usize]) -> (Vec<usize>, bool) {
    let shared: Vec<Token> = (0..200).map(Token).collect();
    let tails: Vec<Vec<Token>> = (0..3u32)
        .map(|k| {
            let mut t = shared.clone();
            t.extend((0..50).map(|i| Token(1000 * (k + 1) + i)));
            t
        })
        .collect();
    let mut kv = UnifiedKvCache::new(1000);
    let mut trie = RadixTrie::new(1000);
    for t in &tails {
        commit(&mut kv, &mut trie, SeqId(0), t);
    }
    for &k in order {
        trie.longest_prefix(&tails[k]);
    }
    let mut evicted = Vec::new();
    while evicted.len() < 3 {
        let before: Vec<Vec<Token>> = trie.leaf_paths();
        let freed = trie.evict(&mut kv, 1);
        assert!(freed > 0, "nothing evicted");
        let after = trie.leaf_paths();
        for (k, t) in tails.iter().enumerate() {
            if before.contains(t) && !after.contains(t) {
                evicted.push(k);
            }
        }
    }
    let branch_intact = trie.peek(&shared) == 200 && trie.cells() == 200 && kv.occupancy() == 200;
    kv.check_invariants().unwrap();
    (evicted, branch_intact)
}

// 8. Leaf-oldest eviction keeps the shared branch.
fn c8_eviction() -> Check {
    let (ev, intact) = eviction_order(&[1, 0, 2]);
    ensure!(ev == vec![1, 0, 2] && intact, "evicted {ev:?}, branch intact {intact}");
    let mut runner = TestRunner::new(PtConfig {
        cases: 64,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strategy = Just(vec![0usize, 1, 2]).prop_shuffle();
    runner
        .run(&strategy, |order| {
            let (ev, intact) = eviction_order(&order);
            prop_assert_eq!(&ev, &order);
            prop_assert!(intact);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("tails oldest-first, branch intact, 64 random touch orders".into())
}

fn scripted_call_request(prose_words: usize) -> (ChatRequest, usize) {
    let mut b = ScriptBuilder::new(9, "c9");
    let prose = b.prose(prose_words);
    let call = ("search".to_string(), json!({"query": "retry backoff"}));
    let content = format!("Find the retry code.{}", demonstration(Some(&call), &prose));
    let req = ChatRequest::new(vec![WireMessage::user(content)])
        .with_tools(workload::agent_tools())
        .max_tokens(128);
    let tk = Tokenizer::new(EngineConfig::default().model.vocab);
    (req, tk.tokenize(&prose).len())
}

fn suite_completion(early_stop: bool) -> Result<u64, String> {
    let mut total = 0;
    for s in workload::suite("c9") {
        let e = engine(|c| c.features.early_stop = early_stop);
        let r = s.run(&e).map_err(|e| e.to_string())?;
        total += r.turns.iter().map(|t| t.metrics.completion_tokens).sum::<u64>();
    }
    Ok(total)
}

// 9. Early stop saves the post-call prose.
fn c9_early_stop() -> Check {
    let grace = ValidatorConfig::default().grace;
    let (req, prose) = scripted_call_request(30);
    ensure!(prose == 30, "scripted prose has {prose} tokens");
    let on = engine(|_| {}).chat(&req).map_err(|e| e.to_string())?;
    let off = engine(|c| c.features.early_stop = false).chat(&req).map_err(|e| e.to_string())?;
    ensure!(
        on.response.choices[0].message.tool_calls == off.response.choices[0].message.tool_calls
            && on.response.choices[0].message.tool_calls.is_some(),
        "tool calls differ or are missing"
    );
    let saved = off.completion.len() - on.completion.len();
    ensure!(saved + grace >= 30, "saved {saved} < 30 - G");
    let with = suite_completion(true)?;
    let without = suite_completion(false)?;
    let savings = 1.0 - with as f64 / without as f64;
    ensure!((0.15..=0.45).contains(&savings), "suite savings {savings:.3}");
    Ok(format!("scripted: {saved} saved; suite: {:.1}% of decoded tokens", savings * 100.0))
}

fn random_value(rng: &mut ChaCha8Rng, depth: u32) -> Value {
    match rng.gen_range(0..if depth > 2 { 4 } else { 6 }) {
        0 => Value::Null,
        1 => json!(rng.gen_range(-1000..1000)),
        2 => json!(rng.gen_bool(0.5)),
        3 => {
            let s: String = (0..rng.gen_range(0..8))
                .map(|_| ['a', 'b', '{', '}', '"', '\\', ' ', 'z'][rng.gen_range(0..8)])
                .collect();
            json!(s)
        }
        4 => Value::Array((0..rng.gen_range(0..3)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => {
            let mut m = serde_json::Map::new();
            for i in 0..rng.gen_range(0..3) {
                m.insert(format!("k{i}"), random_value(rng, depth + 1));
            }
            Value::Object(m)
        }
    }
}

fn validate(text: &str, declared: &HashSet<String>, rng: &mut ChaCha8Rng) -> Verdict {
    let mut v = Validator::new(&ValidatorConfig::default());
    v.on_piece("", true);
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let n = rng.gen_range(1..6).min(chars.len() - i);
        let piece: String = chars[i..i + n].iter().collect();
        v.on_piece(&piece, false);
        i += n;
    }
    v.finalize(declared).verdict
}

// 10. Undeclared tool names never pass.
fn c10_declared_filter() -> Check {
    let declared: HashSet<String> = ["get_weather", "read_file"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bad = validate(r#"{"name":"fly_to_moon","parameters":{}}"#, &declared, &mut rng);
    ensure!(matches!(bad, Verdict::Rejected(_)), "hallucinated call: {bad:?}");
    let good = validate(r#"{"name":"get_weather","parameters":{"city":"Paris"}}"#, &declared, &mut rng);
    match &good {
        Verdict::ValidatedCalls(c) if c.len() == 1 && c[0].name == "get_weather" => {}
        other => return Err(format!("declared call: {other:?}")),
    }
    let pool = ["get_weather", "read_file", "get_weathe", "Read_file", "rm_rf", "", "get_weather "];
    let mut accepted_declared = 0;
    for i in 0..1000 {
        let name = if rng.gen_bool(0.5) {
            pool[rng.gen_range(0..pool.len())].to_string()
        } else {
            format!("tool_{}", rng.gen_range(0..50))
        };
        let obj = json!({"name": name, "parameters": random_value(&mut rng, 0)});
        match validate(&obj.to_string(), &declared, &mut rng) {
            Verdict::ValidatedCalls(calls) => {
                for c in &calls {
                    ensure!(declared.contains(&c.name), "object {i}: accepted unknown `{}`", c.name);
                }
                ensure!(calls[0].name == name, "object {i}: name changed");
                accepted_declared += 1;
            }
            Verdict::Rejected(_) => {
                ensure!(!declared.contains(&name), "object {i}: declared `{name}` rejected");
            }
            Verdict::TextResponse(t) => return Err(format!("object {i}: parsed as text {t:?}")),
        }
    }
    Ok(format!("1000 fuzzed objects, 0 unknown accepted, {accepted_declared} declared accepted"))
}

// 11. Guards return every sequence under injected failures.
fn c11_pool_safety() -> Check {
    let pool = PoolConfig::default();
    let e = Arc::new(engine(|c| c.pool = pool.clone()));
    let next = Arc::new(AtomicUsize::new(0));
    let failures = Arc::new(AtomicUsize::new(0));
    let errors = Arc::new(AtomicUsize::new(0));
    let workers: Vec<_> = (0..16)
        .map(|w| {
            let (e, next, failures, errors) = (e.clone(), next.clone(), failures.clone(), errors.clone());
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(w);
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= 1000 {
                        break;
                    }
                    let call = ("read_file".to_string(), json!({"path": format!("src/f{}.rs", i % 37)}));
                    let text = format!("Request {i}.{}", demonstration(Some(&call), " and then report"));
                    let req = ChatRequest::new(vec![
                        WireMessage::system("You are a file agent."),
                        WireMessage::user(text),
                    ])
                    .with_tools(workload::agent_tools())
                    .max_tokens(rng.gen_range(4..24));
                    let inject = rng.gen_bool(0.1);
                    let r = if inject {
                        failures.fetch_add(1, Ordering::Relaxed);
                        let at = if rng.gen_bool(0.5) {
                            FailPoint::AfterAcquire
                        } else {
                            FailPoint::MidDecode(1)
                        };
                        e.chat_with_failure(&req, at)
                    } else {
                        e.chat(&req)
                    };
                    if r.is_err() != inject {
                        errors.fetch_add(1, Ordering::Relaxed);
                    }
                }
            })
        })
        .collect();
    for w in workers {
        w.join().map_err(|_| "worker panicked".to_string())?;
    }
    let unexpected = errors.load(Ordering::Relaxed);
    ensure!(unexpected == 0, "{unexpected} requests had an unexpected outcome");
    let p = e.pool();
    let (t, s) = (p.free(SlotKind::Transient), p.free(SlotKind::Session));
    ensure!(
        t == pool.transient as usize && s == pool.session as usize,
        "free transient {t}/{}, session {s}/{}",
        pool.transient,
        pool.session
    );
    let kv = e.kv_stats();
    let radix = e.radix_stats();
    ensure!(kv.live_sequences == 0, "{} sequences still hold cells", kv.live_sequences);
    ensure!(kv.occupied == radix.cells, "occupancy {} != radix cells {}", kv.occupied, radix.cells);
    e.with_store(|kv, _| kv.check_invariants())?;
    Ok(format!(
        "1000 requests, {} injected failures, pools full, 0 leaked sequences",
        failures.load(Ordering::Relaxed)
    ))
}

fn simulated(features: Features, scenario: &workload::Scenario) -> Result<Vec<f64>, String> {
    let e = engine(|c| {
        c.features = features;
        c.cost = CostParams::default();
    });
    let r = scenario.run(&e).map_err(|e| e.to_string())?;
    Ok(r.turns.iter().map(|t| t.metrics.simulated_ms).collect())
}

fn speedup_curve(scenario: &workload::Scenario) -> Result<Vec<f64>, String> {
    let fast = simulated(Features::default(), scenario)?;
    let slow = simulated(Features::baseline(), scenario)?;
    Ok(slow.iter().zip(&fast).map(|(s, f)| s / f).collect())
}

// 12. Speedup grows with conversation depth.
fn c12_speedup_shape() -> Check {
    let deep = speedup_curve(&workload::deep_coding("c12"))?;
    let short = speedup_curve(&workload::agentic("c12"))?;
    let windows: Vec<f64> = deep.chunks(5).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    ensure!(
        windows.windows(2).all(|p| p[1] >= p[0]),
        "5-turn window means not non-decreasing: {windows:.2?}"
    );
    let (md, ms) = (median(&deep), median(&short));
    ensure!(md >= 2.0, "35-turn median speedup {md:.2}");
    ensure!(ms < md, "6-turn median {ms:.2} not below 35-turn median {md:.2}");
    // Token totals follow the cached-total identity.
    let e = engine(|_| {});
    let r = workload::deep_coding("c12").run(&e).map_err(|e| e.to_string())?;
    let (standard, cached) = totals(&r.metrics(0)).map_err(|e| e.to_string())?;
    let last = r.turns.last().unwrap().metrics.n_t;
    ensure!(cached == last, "cached total {cached} != n_35 {last}");
    Ok(format!(
        "35-turn median {md:.2}x, 6-turn median {ms:.2}x, windows {windows:.1?}, tokens {standard} vs {cached}"
    ))
}

#[derive(Debug, Clone)]
enum Op {
    Admit(usize),
    Update(usize, usize),
    Release(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1usize..1500).prop_map(Op::Admit),
        (0usize..64, 0usize..1500).prop_map(|(i, r)| Op::Update(i, r)),
        (0usize..64).prop_map(Op::Release),
    ]
}

// 13. The admission ceiling holds and decode survives high water.
fn c13_budget_safety() -> Check {
    let mut runner = TestRunner::new(PtConfig {
        cases: 256,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let budget = 4096usize;
    runner
        .run(&proptest::collection::vec(op(), 1..200), |ops| {
            let mut adm = Admission::new(budget);
            let mut model: Vec<Option<usize>> = Vec::new();
            for o in ops {
                match o {
                    Op::Admit(cost) => {
                        let id = model.len() as u64;
                        let held: usize = model.iter().flatten().sum();
                        let d = adm.try_admit(id, cost);
                        let expect = if cost > budget {
                            Decision::Rejected
                        } else if held + cost <= budget {
                            Decision::Admitted
                        } else {
                            Decision::Deferred
                        };
                        prop_assert_eq!(d, expect);
                        model.push((d == Decision::Admitted).then_some(cost));
                    }
                    Op::Update(i, r) => {
                        if let Some(Some(p)) = model.get_mut(i) {
                            *p = r.min(*p);
                            adm.update(i as u64, r);
                        }
                    }
                    Op::Release(i) => {
                        if let Some(slot) = model.get_mut(i) {
                            *slot = None;
                            adm.release(i as u64);
                        }
                    }
                }
                let held: usize = model.iter().flatten().sum();
                prop_assert_eq!(adm.committed(), held);
                prop_assert!(adm.committed() <= budget);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let cfg = SchedulerConfig::default();
    let strategy = (
        proptest::collection::vec((2usize..3000, any::<bool>(), 1usize..17), 1..24),
        0.0f64..0.05,
    );
    runner
        .run(&strategy, |(slots, headroom)| {
            let prompts: Vec<Vec<Token>> = slots
                .iter()
                .enumerate()
                .map(|(i, &(n, _, _))| (0..n as u32).map(|t| Token(t * 31 + i as u32)).collect())
                .collect();
            let views: Vec<SlotView<'_>> = slots
                .iter()
                .zip(&prompts)
                .map(|(&(n, decoding, k), p)| SlotView {
                    prompt: p,
                    cursor: if decoding { n - 1 } else { 0 },
                    prefill_end: n - 1,
                    decode_len: decoding.then_some(k),
                    latency_sensitive: false,
                })
                .collect();
            let capacity = 100_000;
            let occupancy = ((cfg.high_water + headroom) * capacity as f64).ceil() as usize;
            let plan = plan_iteration(&views, occupancy, capacity, true, &cfg, &deltaserve::fnv::fnv1a64_tokens);
            let decoding = slots.iter().filter(|s| s.1).count();
            prop_assert_eq!(plan.decode_entries(), decoding);
            prop_assert!(plan
                .entries
                .iter()
                .all(|e| matches!(e.kind, EntryKind::Decode | EntryKind::SpecVerify)));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("256 admission sequences under C; decode ran in every high-water plan".into())
}

// 14. Memory estimator.
fn c14_memory() -> Check {
    let oracle = |l: u64, d: u64, n: u64, b: u64| 2 * l * d * n * b;
    let got = estimate_bytes(32, 4096, 1000, 2);
    ensure!(got == 524_288_000 && got == oracle(32, 4096, 1000, 2), "estimate {got}");
    ensure!(estimate_bytes(32, 4096, 950, 2) == oracle(32, 4096, 950, 2), "950-token case");
    ensure!(estimate_bytes(1, 1, 1, 1) == 2, "unit case");
    Ok(format!("{got} bytes"))
}

fn main() {
    let checks: [Criterion; 14] = [
        ("delta-only per-turn prefill", c1_delta_only),
        ("constant-time alias", c2_constant_alias),
        ("prompt-lookup forward passes", c3_pld_passes),
        ("speculation correctness", c4_spec_correctness),
        ("prompt determinism", c5_prompt_determinism),
        ("response cache", c6_response_cache),
        ("grouped prefill", c7_grouped_prefill),
        ("leaf-oldest eviction", c8_eviction),
        ("validator early stop", c9_early_stop),
        ("declared-tool filter", c10_declared_filter),
        ("pool safety", c11_pool_safety),
        ("simulated speedup shape", c12_speedup_shape),
        ("budget safety", c13_budget_safety),
        ("memory estimator", c14_memory),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in checks.iter().enumerate() {
        let id = format!("criterion {:>2}", i + 1);
        if let Some(f) = &filter {
            if !name.contains(f.as_str()) && !id.ends_with(&format!(" {f}")) {
                continue;
            }
        }
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let dt = t0.elapsed();
        match r {
            Ok(detail) => println!("{id} PASS  {name}: {detail} [{dt:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL  {name}: {why} [{dt:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
