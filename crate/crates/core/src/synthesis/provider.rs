//! Text-completion providers: the client interface, retry policy, audit log and an HTTP client.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Wire body of a completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ProviderRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        ProviderRequest {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.7,
        }
    }

    /// SHA-256 of the canonical JSON body.
    pub fn hash(&self) -> String {
        let body = serde_json::to_vec(self).expect("plain struct serializes");
        hex::encode(Sha256::digest(&body))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
}

/// One failed attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    Timeout,
    /// Worth retrying: connection failures, 429 and 5xx.
    Transient(String),
    Fatal(String),
}

pub trait ProviderClient: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &ProviderRequest) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub timeout_ms: u64,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            timeout_ms: 30_000,
            backoff_ms: 500,
        }
    }
}

/// Runs `attempt` up to `1 + max_retries` times with linear backoff.
pub fn with_retries(
    policy: &RetryPolicy,
    request_hash: &str,
    mut attempt: impl FnMut(u32) -> std::result::Result<String, AttemptError>,
) -> Result<String> {
    let mut last = String::new();
    for i in 0..=policy.max_retries {
        match attempt(i) {
            Ok(text) => return Ok(text),
            Err(AttemptError::Fatal(msg)) => {
                return Err(Error::Provider {
                    request_hash: request_hash.into(),
                    message: msg,
                })
            }
            Err(AttemptError::Timeout) => last = "timed out".into(),
            Err(AttemptError::Transient(msg)) => last = msg,
        }
        if i < policy.max_retries && policy.backoff_ms > 0 {
            std::thread::sleep(Duration::from_millis(policy.backoff_ms * (i as u64 + 1)));
        }
    }
    Err(Error::Provider {
        request_hash: request_hash.into(),
        message: format!("{} attempts failed, last: {last}", policy.max_retries + 1),
    })
}

#[derive(Debug, Serialize)]
struct AuditLine<'a> {
    unix_ms: u128,
    provider: &'a str,
    request_hash: &'a str,
    attempt: u32,
    request: &'a ProviderRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Append-only JSONL log of every live call.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        AuditLog {
            path: path.into(),
            lock: Mutex::new(()),
        }
    }

    fn record(
        &self,
        provider: &str,
        req: &ProviderRequest,
        hash: &str,
        attempt: u32,
        outcome: &std::result::Result<String, AttemptError>,
    ) -> Result<()> {
        let line = AuditLine {
            unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis()),
            provider,
            request_hash: hash,
            attempt,
            request: req,
            response: outcome.as_ref().ok().map(String::as_str),
            error: outcome.as_ref().err().map(|e| format!("{e:?}")),
        };
        let mut bytes = serde_json::to_vec(&line)?;
        bytes.push(b'\n');
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&self.path, e))
    }
}

/// POSTs `{prompt, max_tokens, temperature}` and reads `{text}`.
#[derive(Debug)]
pub struct HttpProvider {
    pub endpoint: String,
    /// Environment variable holding a bearer token, if any.
    pub credential_env: Option<String>,
    pub policy: RetryPolicy,
    pub audit: Option<AuditLog>,
    agent: ureq::Agent,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, credential_env: Option<String>, policy: RetryPolicy, audit: Option<AuditLog>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpProvider {
            endpoint: endpoint.into(),
            credential_env,
            policy,
            audit,
            agent,
        }
    }

    fn attempt(&self, body: &[u8], token: Option<&str>) -> std::result::Result<String, AttemptError> {
        let mut req = self.agent.post(&self.endpoint).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(AttemptError::Timeout),
            Err(e) => return Err(AttemptError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str::<ProviderResponse>(&text)
                .map(|r| r.text)
                .map_err(|e| AttemptError::Fatal(format!("malformed response: {e}"))),
            429 | 500..=599 => Err(AttemptError::Transient(format!("status {status}"))),
            _ => Err(AttemptError::Fatal(format!("status {status}: {text}"))),
        }
    }
}

impl ProviderClient for HttpProvider {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &ProviderRequest) -> Result<String> {
        let hash = req.hash();
        let token = match &self.credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Provider {
                request_hash: hash.clone(),
                message: format!("credential variable {var} is not set"),
            })?),
            None => None,
        };
        let body = serde_json::to_vec(req)?;
        with_retries(&self.policy, &hash, |i| {
            let out = self.attempt(&body, token.as_deref());
            if let Some(log) = &self.audit {
                // a failed audit write must not hide the provider outcome
                let _ = log.record(self.name(), req, &hash, i, &out);
            }
            out
        })
    }
}
