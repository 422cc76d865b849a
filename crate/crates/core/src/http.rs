//! Blocking JSON-over-HTTP helpers with the retry contract shared by the
//! chat and embedding clients: transient failures (429, 5xx, transport) are
//! retried with exponential backoff, any other 4xx fails immediately.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Sleep before retry `n` (1-based) is `delays[n - 1]`; the number of
    /// retries is `delays.len()`.
    pub delays: Vec<Duration>,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            delays: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
            timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    /// Same retry count with every delay scaled down; for tests.
    pub fn fast() -> Self {
        RetryPolicy {
            delays: vec![Duration::from_millis(5); 3],
            timeout: Duration::from_secs(10),
        }
    }
}

enum Failure {
    Transient(String),
    Fatal(u16, String),
}

/// JSON client bound to one base URL.
#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    base: String,
    bearer: Option<String>,
    policy: RetryPolicy,
}

impl JsonClient {
    pub fn new(base: &str, bearer: Option<String>, policy: RetryPolicy) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(policy.timeout))
            .build()
            .into();
        JsonClient {
            agent,
            base: base.trim_end_matches('/').to_owned(),
            bearer,
            policy,
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn attempt_post<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
    ) -> std::result::Result<R, Failure> {
        let mut req = self.agent.post(url);
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Transient(e.to_string()))?;
        Self::decode(&mut resp)
    }

    fn attempt_get<R: DeserializeOwned>(&self, url: &str) -> std::result::Result<R, Failure> {
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        Self::decode(&mut resp)
    }

    fn decode<R: DeserializeOwned>(
        resp: &mut ureq::http::Response<ureq::Body>,
    ) -> std::result::Result<R, Failure> {
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(status, format!("malformed response body: {e}"))),
            429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(Failure::Fatal(status, text)),
        }
    }

    fn run<R>(&self, mut op: impl FnMut() -> std::result::Result<R, Failure>) -> Result<R> {
        let mut last = String::new();
        for attempt in 0..=self.policy.delays.len() {
            if attempt > 0 {
                std::thread::sleep(self.policy.delays[attempt - 1]);
            }
            match op() {
                Ok(r) => return Ok(r),
                Err(Failure::Fatal(status, message)) => {
                    return Err(Error::BackendFatal { status, message })
                }
                Err(Failure::Transient(msg)) => {
                    log::debug!("transient failure on attempt {}: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport(format!(
            "{} failed after {} retries: {last}",
            self.base,
            self.policy.delays.len()
        )))
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let url = format!("{}{}", self.base, path);
        self.run(|| self.attempt_post(&url, body))
    }

    pub fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let url = format!("{}{}", self.base, path);
        self.run(|| self.attempt_get(&url))
    }
}
