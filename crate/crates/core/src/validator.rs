//! Streaming tool-call tracker.
//!
//! Pieces are fed in generation order. Tracking starts on the tool-call
//! sentinel token (at the next `{`) or on the literal text `{"name"`. Brace
//! depth is tracked outside JSON strings only, honoring escapes, so every
//! character is inspected once. When depth returns to zero the object is
//! closed and a grace countdown of `G` pieces starts; when it runs out the
//! validator asks for an early stop.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

const TRIGGER: &[u8] = br#"{"name""#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidatorConfig {
    /// Pieces allowed after a closing brace before early stop.
    pub grace: usize,
}

impl Default for ValidatorConfig {
    fn default() -> Self {
        Self { grace: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Continue,
    EarlyStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    /// Sentinel seen; the next `{` opens an object.
    Armed,
    Tracking,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub name: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    UnknownTool(String),
    Malformed(String),
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::UnknownTool(_) => "unknown_tool",
            RejectReason::Malformed(_) => "malformed_tool_call",
        }
    }

    pub fn message(&self) -> String {
        match self {
            RejectReason::UnknownTool(n) => format!("model called undeclared tool `{n}`"),
            RejectReason::Malformed(e) => format!("tool call is not valid JSON: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    ValidatedCalls(Vec<ToolCall>),
    TextResponse(String),
    Rejected(RejectReason),
}

/// Outcome of a finished generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    pub verdict: Verdict,
    /// Text generated before the first object.
    pub leading_text: String,
    /// Closed objects that were dropped, including ones outvoted by a
    /// valid call.
    pub dropped: Vec<RejectReason>,
}

#[derive(Debug, Clone)]
pub struct Validator {
    grace: usize,
    phase: Phase,
    depth: usize,
    in_string: bool,
    escape: bool,
    trigger_pos: usize,
    grace_left: usize,
    buffer: String,
    objects: Vec<String>,
    text: String,
    leading: Option<String>,
    chars_seen: u64,
}

impl Validator {
    pub fn new(cfg: &ValidatorConfig) -> Self {
        Self {
            grace: cfg.grace,
            phase: Phase::Idle,
            depth: 0,
            in_string: false,
            escape: false,
            trigger_pos: 0,
            grace_left: 0,
            buffer: String::new(),
            objects: Vec::new(),
            text: String::new(),
            leading: None,
            chars_seen: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Characters inspected so far.
    pub fn chars_seen(&self) -> u64 {
        self.chars_seen
    }

    pub fn closed_objects(&self) -> &[String] {
        &self.objects
    }

    /// All non-sentinel text fed so far.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Text known to be prose: everything before the first object or, while
    /// none has started, everything but a partially matched trigger.
    pub fn prose(&self) -> &str {
        match &self.leading {
            Some(l) => l,
            None => &self.text[..self.text.len() - self.trigger_pos],
        }
    }

    pub fn on_piece(&mut self, piece: &str, is_sentinel: bool) -> Signal {
        let counting = self.phase == Phase::Closed;
        if is_sentinel {
            if self.phase != Phase::Tracking {
                self.mark_leading(self.text.len());
                self.phase = Phase::Armed;
                self.trigger_pos = 0;
            }
            return self.tick(counting, false);
        }
        let mut closed_here = false;
        for c in piece.chars() {
            self.chars_seen += 1;
            self.text.push(c);
            match self.phase {
                Phase::Tracking => closed_here |= self.track(c),
                Phase::Armed if c == '{' => self.open("{", 1),
                Phase::Idle | Phase::Closed | Phase::Armed => self.scan_trigger(c),
            }
        }
        self.tick(counting, closed_here)
    }

    /// Grace bookkeeping after a piece: `counting` says the piece started in
    /// the closed phase.
    fn tick(&mut self, counting: bool, closed_here: bool) -> Signal {
        if self.phase != Phase::Closed {
            return Signal::Continue;
        }
        if closed_here {
            self.grace_left = self.grace;
        } else if counting {
            self.grace_left = self.grace_left.saturating_sub(1);
        }
        if self.grace_left == 0 {
            Signal::EarlyStop
        } else {
            Signal::Continue
        }
    }

    fn scan_trigger(&mut self, c: char) {
        if c.is_ascii() && TRIGGER[self.trigger_pos] == c as u8 {
            self.trigger_pos += 1;
            if self.trigger_pos == TRIGGER.len() {
                // `{"name"` ends here: depth 1, outside a string.
                self.trigger_pos = 0;
                self.open(std::str::from_utf8(TRIGGER).expect("ascii"), TRIGGER.len());
            }
        } else {
            self.trigger_pos = usize::from(c == '{');
        }
    }

    /// Starts an object whose first characters `seen` (the last `back`
    /// bytes of the text) have already been consumed.
    fn open(&mut self, seen: &str, back: usize) {
        self.mark_leading(self.text.len() - back);
        self.buffer.clear();
        self.buffer.push_str(seen);
        self.depth = 1;
        self.in_string = false;
        self.escape = false;
        self.phase = Phase::Tracking;
    }

    fn mark_leading(&mut self, end: usize) {
        if self.leading.is_none() {
            self.leading = Some(self.text[..end].to_string());
        }
    }

    /// Feeds one character of an open object. Returns true when it closes.
    fn track(&mut self, c: char) -> bool {
        self.buffer.push(c);
        if self.in_string {
            if self.escape {
                self.escape = false;
            } else if c == '\\' {
                self.escape = true;
            } else if c == '"' {
                self.in_string = false;
            }
            return false;
        }
        match c {
            '"' => self.in_string = true,
            '{' => self.depth += 1,
            '}' => {
                self.depth -= 1;
                if self.depth == 0 {
                    self.objects.push(std::mem::take(&mut self.buffer));
                    self.phase = Phase::Closed;
                    return true;
                }
            }
            _ => {}
        }
        false
    }

    /// Parses closed objects and applies the declared-tool filter.
    pub fn finalize(&self, declared: &HashSet<String>) -> Finalized {
        let mut calls = Vec::new();
        let mut dropped = Vec::new();
        for obj in &self.objects {
            match parse_call(obj) {
                Ok(call) if declared.contains(&call.name) => calls.push(call),
                Ok(call) => dropped.push(RejectReason::UnknownTool(call.name)),
                Err(reason) => dropped.push(reason),
            }
        }
        let leading_text = match &self.leading {
            Some(l) => l.clone(),
            None => self.text.clone(),
        };
        let verdict = if !calls.is_empty() {
            Verdict::ValidatedCalls(calls)
        } else if let Some(first) = dropped.first() {
            Verdict::Rejected(first.clone())
        } else {
            Verdict::TextResponse(self.text.clone())
        };
        Finalized {
            verdict,
            leading_text,
            dropped,
        }
    }
}

fn parse_call(obj: &str) -> Result<ToolCall, RejectReason> {
    let v: Value = serde_json::from_str(obj).map_err(|e| RejectReason::Malformed(e.to_string()))?;
    let name = v
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| RejectReason::Malformed("missing string `name` field".into()))?
        .to_string();
    let parameters = v
        .get("parameters")
        .or_else(|| v.get("arguments"))
        .cloned()
        .unwrap_or_else(|| Value::Object(Default::default()));
    Ok(ToolCall { name, parameters })
}
