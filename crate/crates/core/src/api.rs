//! OpenAI-compatible wire types.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Message, RenderedCall, Role, TemplateError, ToolSchema};

pub const DEFAULT_MODEL: &str = "deltaserve-mock";

fn default_model() -> String {
    DEFAULT_MODEL.to_string()
}

fn default_max_tokens() -> u32 {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default = "default_model")]
    pub model: String,
    pub messages: Vec<WireMessage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<WireTool>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<WireMessage>) -> Self {
        Self {
            model: default_model(),
            messages,
            tools: Vec::new(),
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            stream: false,
            seed: None,
            session_id: None,
        }
    }

    pub fn with_tools(mut self, tools: Vec<WireTool>) -> Self {
        self.tools = tools;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn session(mut self, id: impl Into<String>) -> Self {
        self.session_id = Some(id.into());
        self
    }

    /// Template messages and tool schemas for rendering.
    pub fn to_template(&self) -> Result<(Vec<Message>, Vec<ToolSchema>), TemplateError> {
        let messages = self
            .messages
            .iter()
            .map(WireMessage::to_template)
            .collect::<Result<Vec<_>, _>>()?;
        let tools = self.tools.iter().map(|t| t.function.clone()).collect();
        Ok((messages, tools))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: String,
    #[serde(default)]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<WireToolCall>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl WireMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role: role.as_str().to_string(),
            content: Some(content.into()),
            tool_calls: None,
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }

    /// The assistant turn as it goes back into the conversation history.
    pub fn from_response(msg: &AssistantMessage) -> Self {
        Self {
            role: Role::Assistant.as_str().to_string(),
            content: msg.content.clone(),
            tool_calls: msg.tool_calls.clone(),
            tool_call_id: None,
        }
    }

    pub fn to_template(&self) -> Result<Message, TemplateError> {
        let role: Role = self.role.parse()?;
        let tool_calls = self
            .tool_calls
            .iter()
            .flatten()
            .map(|c| RenderedCall {
                name: c.function.name.clone(),
                parameters: serde_json::from_str(&c.function.arguments)
                    .unwrap_or_else(|_| Value::String(c.function.arguments.clone())),
            })
            .collect();
        Ok(Message {
            role,
            content: self.content.clone().unwrap_or_default(),
            tool_calls,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTool {
    #[serde(rename = "type", default = "function_type")]
    pub kind: String,
    pub function: ToolSchema,
}

fn function_type() -> String {
    "function".to_string()
}

impl WireTool {
    pub fn function(name: &str, description: &str, parameters: Value) -> Self {
        Self {
            kind: function_type(),
            function: ToolSchema {
                name: name.to_string(),
                description: description.to_string(),
                parameters,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToolCall {
    pub id: String,
    #[serde(rename = "type", default = "function_type")]
    pub kind: String,
    pub function: FunctionCall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionCall {
    pub name: String,
    /// JSON-encoded arguments.
    pub arguments: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantMessage {
    pub role: String,
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<WireToolCall>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    ToolCalls,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub index: u32,
    pub message: AssistantMessage,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    /// Prompt positions restored without a forward pass.
    pub cached_prompt_tokens: u64,
    /// Draft tokens the model rejected; processed but not committed.
    pub rejected_speculative_tokens: u64,
    pub decode_passes: u64,
    pub simulated_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<Choice>,
    pub usage: Usage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_calls: Option<Vec<ChunkToolCall>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkToolCall {
    pub index: u32,
    pub id: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub function: FunctionCall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkChoice {
    pub index: u32,
    pub delta: ChunkDelta,
    pub finish_reason: Option<FinishReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChunk {
    pub id: String,
    pub object: String,
    pub created: u64,
    pub model: String,
    pub choices: Vec<ChunkChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ChatChunk {
    pub fn new(id: &str, created: u64, model: &str, delta: ChunkDelta) -> Self {
        Self {
            id: id.to_string(),
            object: "chat.completion.chunk".to_string(),
            created,
            model: model.to_string(),
            choices: vec![ChunkChoice {
                index: 0,
                delta,
                finish_reason: None,
            }],
            usage: None,
        }
    }

    pub fn content(id: &str, created: u64, model: &str, text: &str) -> Self {
        Self::new(
            id,
            created,
            model,
            ChunkDelta {
                role: None,
                content: Some(text.to_string()),
                tool_calls: None,
            },
        )
    }

    /// Closing chunk carrying tool calls (if any), finish reason and usage.
    pub fn finish(resp: &ChatResponse) -> Self {
        let choice = &resp.choices[0];
        let tool_calls = choice.message.tool_calls.as_ref().map(|calls| {
            calls
                .iter()
                .enumerate()
                .map(|(i, c)| ChunkToolCall {
                    index: i as u32,
                    id: c.id.clone(),
                    kind: c.kind.clone(),
                    function: c.function.clone(),
                })
                .collect()
        });
        let mut chunk = Self::new(
            &resp.id,
            resp.created,
            &resp.model,
            ChunkDelta {
                role: None,
                content: None,
                tool_calls,
            },
        );
        chunk.choices[0].finish_reason = Some(choice.finish_reason);
        chunk.usage = Some(resp.usage.clone());
        chunk
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub message: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub code: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults() {
        let r: ChatRequest =
            serde_json::from_str(r#"{"messages":[{"role":"user","content":"hi"}]}"#).unwrap();
        assert_eq!(r.max_tokens, 128);
        assert_eq!(r.temperature, 0.0);
        assert!(!r.stream);
        assert_eq!(r.model, DEFAULT_MODEL);
    }

    #[test]
    fn assistant_tool_call_round_trips_into_template() {
        let m: WireMessage = serde_json::from_str(
            r#"{"role":"assistant","content":null,"tool_calls":[{"id":"call_1","type":"function",
                "function":{"name":"get_weather","arguments":"{\"city\":\"Paris\"}"}}]}"#,
        )
        .unwrap();
        let t = m.to_template().unwrap();
        assert_eq!(t.role, Role::Assistant);
        assert_eq!(t.content, "");
        assert_eq!(t.tool_calls[0].parameters, serde_json::json!({"city": "Paris"}));
    }

    #[test]
    fn tools_parse_openai_shape() {
        let t: WireTool = serde_json::from_str(
            r#"{"type":"function","function":{"name":"f","description":"d","parameters":{"type":"object"}}}"#,
        )
        .unwrap();
        assert_eq!(t.function.name, "f");
    }
}
