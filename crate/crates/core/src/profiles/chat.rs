use serde::{Deserialize, Serialize};

use super::{ProfileBackend, ProfileRequest};
use crate::error::{Error, Result};
use crate::http::{JsonClient, RetryPolicy};

pub const API_KEY_ENV: &str = "TEMPOREC_API_KEY";
pub const API_BASE_ENV: &str = "TEMPOREC_API_BASE";

const TEMPERATURE: f64 = 0.0;
const MAX_TOKENS: u32 = 512;
/// Default prompt budget in characters (system + user message).
pub const DEFAULT_CONTEXT_CHARS: usize = 48_000;

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    messages: [Message<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible chat-completion client (`POST {base}/v1/chat/completions`).
#[derive(Debug, Clone)]
pub struct ChatBackend {
    client: JsonClient,
    model: String,
    context_chars: usize,
}

impl ChatBackend {
    pub fn new(base: &str, api_key: Option<String>, model: &str, policy: RetryPolicy) -> Self {
        ChatBackend {
            client: JsonClient::new(base, api_key, policy),
            model: model.to_owned(),
            context_chars: DEFAULT_CONTEXT_CHARS,
        }
    }

    /// Reads the endpoint and credential from `TEMPOREC_API_BASE` and
    /// `TEMPOREC_API_KEY`.
    pub fn from_env(model: &str) -> Result<Self> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| Error::config(format!("{API_BASE_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| Error::config(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self::new(&base, Some(key), model, RetryPolicy::default()))
    }

    pub fn with_context_chars(mut self, chars: usize) -> Self {
        self.context_chars = chars;
        self
    }

    /// Sends one system + user exchange and returns the first choice's text.
    pub fn chat(&self, system: &str, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.model,
            temperature: TEMPERATURE,
            max_tokens: MAX_TOKENS,
            messages: [
                Message {
                    role: "system",
                    content: system,
                },
                Message {
                    role: "user",
                    content: prompt,
                },
            ],
        };
        let resp: ChatResponse = self.client.post("/v1/chat/completions", &body)?;
        Ok(resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

impl ProfileBackend for ChatBackend {
    fn model_id(&self) -> String {
        self.model.clone()
    }

    fn context_budget(&self) -> Option<usize> {
        Some(self.context_chars)
    }

    fn complete(&self, request: &ProfileRequest<'_>) -> Result<String> {
        self.chat(request.system, request.prompt)
    }
}
