//! Chat template renderer.
//!
//! Layout, one block per message:
//!
//! ```text
//! <|tools|>\n{schema json per line}<|end|>\n      (only when tools are declared)
//! <|role|>\n{content}<|end|>\n
//! ```
//!
//! Assistant tool calls render as `<|tool_call|>{"name":..,"parameters":..}`
//! after the content. The generation prompt is the opening of an assistant
//! block, so a prompt is always a prefix of the conversation that follows it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::fnv::Fnv64;

pub const GENERATION_PROMPT: &str = "<|assistant|>\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("conversation has no messages")]
    Empty,
}

impl FromStr for Role {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Role::System),
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            "tool" => Ok(Role::Tool),
            other => Err(TemplateError::UnknownRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedCall {
    pub name: String,
    pub parameters: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub content: String,
    pub tool_calls: Vec<RenderedCall>,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub parameters: Value,
}

fn render_call(out: &mut String, call: &RenderedCall) {
    out.push_str("<|tool_call|>");
    let obj = serde_json::json!({ "name": call.name, "parameters": call.parameters });
    out.push_str(&obj.to_string());
}

fn render_message(out: &mut String, m: &Message) {
    out.push_str("<|");
    out.push_str(m.role.as_str());
    out.push_str("|>\n");
    out.push_str(&m.content);
    for call in &m.tool_calls {
        render_call(out, call);
    }
    out.push_str("<|end|>\n");
}

/// Renders a conversation. `render_chat(&msgs[..k], tools)` is a strict
/// prefix of `render_chat(&msgs[..k + 1], tools)`.
pub fn render_chat(messages: &[Message], tools: &[ToolSchema]) -> Result<String, TemplateError> {
    if messages.is_empty() {
        return Err(TemplateError::Empty);
    }
    let mut out = String::new();
    if !tools.is_empty() {
        out.push_str("<|tools|>\n");
        for t in tools {
            let line = serde_json::json!({
                "name": t.name,
                "description": t.description,
                "parameters": t.parameters,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out.push_str("<|end|>\n");
    }
    for m in messages {
        render_message(&mut out, m);
    }
    Ok(out)
}

/// Rendered conversation followed by the assistant generation prompt.
pub fn render_prompt(messages: &[Message], tools: &[ToolSchema]) -> Result<String, TemplateError> {
    let mut s = render_chat(messages, tools)?;
    s.push_str(GENERATION_PROMPT);
    Ok(s)
}

/// Structural digest of a message list and tool set, used as the render
/// cache key.
pub fn structural_digest(messages: &[Message], tools: &[ToolSchema]) -> u64 {
    let mut h = Fnv64::new();
    h.write_field(&(tools.len() as u64).to_le_bytes());
    for t in tools {
        h.write_field(t.name.as_bytes());
        h.write_field(t.description.as_bytes());
        h.write_field(t.parameters.to_string().as_bytes());
    }
    h.write_field(&(messages.len() as u64).to_le_bytes());
    for m in messages {
        h.write_field(m.role.as_str().as_bytes());
        h.write_field(m.content.as_bytes());
        h.write_field(&(m.tool_calls.len() as u64).to_le_bytes());
        for c in &m.tool_calls {
            h.write_field(c.name.as_bytes());
            h.write_field(c.parameters.to_string().as_bytes());
        }
    }
    h.finish()
}

/// Digest over tool names and schemas, used in the response-cache key.
pub fn tool_digest(tools: &[ToolSchema]) -> u64 {
    let mut h = Fnv64::new();
    for t in tools {
        h.write_field(t.name.as_bytes());
        h.write_field(t.parameters.to_string().as_bytes());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn convo() -> Vec<Message> {
        vec![
            Message::system("You are a travel planner."),
            Message::user("Weather in Paris?"),
            Message {
                role: Role::Assistant,
                content: String::new(),
                tool_calls: vec![RenderedCall {
                    name: "get_weather".into(),
                    parameters: serde_json::json!({"city": "Paris"}),
                }],
            },
            Message::tool("{\"temp_c\": 18}"),
            Message::user("And tomorrow?"),
        ]
    }

    fn tools() -> Vec<ToolSchema> {
        vec![ToolSchema {
            name: "get_weather".into(),
            description: "Current weather".into(),
            parameters: serde_json::json!({"type": "object"}),
        }]
    }

    #[test]
    fn strict_prefix_for_every_k() {
        let msgs = convo();
        for k in 1..msgs.len() {
            let a = render_chat(&msgs[..k], &tools()).unwrap();
            let b = render_chat(&msgs[..k + 1], &tools()).unwrap();
            assert!(b.starts_with(&a) && b.len() > a.len(), "k = {k}");
        }
    }

    #[test]
    fn prompt_is_prefix_of_next_turn() {
        let msgs = convo();
        let p = render_prompt(&msgs[..2], &tools()).unwrap();
        let next = render_prompt(&msgs[..4], &tools()).unwrap();
        assert!(next.starts_with(&p));
    }

    #[test]
    fn identical_lists_identical_renders() {
        assert_eq!(
            render_chat(&convo(), &tools()).unwrap(),
            render_chat(&convo(), &tools()).unwrap()
        );
        assert_eq!(
            structural_digest(&convo(), &tools()),
            structural_digest(&convo(), &tools())
        );
    }

    #[test]
    fn tool_call_rendering() {
        let s = render_chat(&convo()[2..3], &[]).unwrap();
        assert_eq!(
            s,
            "<|assistant|>\n<|tool_call|>{\"name\":\"get_weather\",\"parameters\":{\"city\":\"Paris\"}}<|end|>\n"
        );
    }

    #[test]
    fn unknown_role_rejected() {
        assert_eq!(
            "narrator".parse::<Role>(),
            Err(TemplateError::UnknownRole("narrator".into()))
        );
        assert!(render_chat(&[], &[]).is_err());
    }

    #[test]
    fn digest_sensitive_to_content() {
        let mut other = convo();
        other[1].content.push('!');
        assert_ne!(
            structural_digest(&convo(), &tools()),
            structural_digest(&other, &tools())
        );
    }
}
