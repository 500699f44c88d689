//! Optional chat-completion provider for response synthesis, query judging
//! and context generation. Every caller falls back to a deterministic
//! generator when the provider fails.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RobustError;
use crate::text::Passage;

/// Connection settings for an OpenAI-compatible chat-completions endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            token_env: "CSIT_LLM_TOKEN".into(),
            timeout_secs: 30,
            max_retries: 2,
        }
    }
}

pub struct LlmClient {
    config: LlmConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, RobustError> {
        let token = std::env::var(&config.token_env).ok();
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| RobustError::Llm(e.to_string()))?;
        Ok(Self {
            config,
            token,
            http,
        })
    }

    /// Sends one user message at temperature 0, retrying transport and
    /// server errors up to `max_retries` extra times.
    pub fn complete(&self, prompt: &str) -> Result<String, RobustError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: 0.0,
        };
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            let mut req = self.http.post(&self.config.endpoint).json(&body);
            if let Some(t) = &self.token {
                req = req.bearer_auth(t);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let parsed: ChatResponse =
                        resp.json().map_err(|e| RobustError::Llm(e.to_string()))?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| RobustError::Llm("reply has no choices".into()));
                }
                Err(e) => {
                    log::warn!("provider attempt {} failed: {e}", attempt + 1);
                    last = e.to_string();
                }
            }
        }
        Err(RobustError::Llm(last))
    }
}

pub fn response_prompt(query: &str, top: &[Passage]) -> String {
    let mut out = String::from(
        "Answer the user's question in one or two sentences using only the passages below.\n\n",
    );
    for (i, p) in top.iter().enumerate() {
        out.push_str(&format!("Passage {}: {}\n", i + 1, p.text));
    }
    out.push_str(&format!("\nQuestion: {query}\nAnswer:"));
    out
}

pub fn judge_prompt(query: &str, new_context: &str) -> String {
    format!(
        "A user is talking with an assistant. The assistant's last reply was:\n{new_context}\n\n\
         The user's next message is:\n{query}\n\n\
         Is the user's message a natural follow-up to that reply? Answer yes or no."
    )
}

/// Reads a yes/no verdict from the first word of a reply.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let first = reply
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serves `n` canned HTTP replies on a local port.
    fn serve(bodies: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for (status, body) in bodies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        format!("http://{addr}/v1/chat/completions")
    }

    fn client(endpoint: String, retries: u32) -> LlmClient {
        LlmClient::new(LlmConfig {
            endpoint,
            timeout_secs: 5,
            max_retries: retries,
            ..LlmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn parses_reply_after_a_retry() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"yes, it fits"}}]}"#;
        let url = serve(vec![(500, "{}".into()), (200, ok.into())]);
        let reply = client(url, 1).complete("hi").unwrap();
        assert_eq!(reply, "yes, it fits");
        assert_eq!(parse_yes_no(&reply), Some(true));
    }

    #[test]
    fn unreachable_provider_errors() {
        let url = serve(vec![]);
        std::thread::sleep(Duration::from_millis(50));
        assert!(matches!(client(url, 0).complete("hi"), Err(RobustError::Llm(_))));
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("No."), Some(false));
        assert_eq!(parse_yes_no("  YES"), Some(true));
        assert_eq!(parse_yes_no("maybe"), None);
        assert_eq!(parse_yes_no(""), None);
    }
}
