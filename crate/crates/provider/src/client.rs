use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{ProviderError, Result};
use crate::server::{CompletionRequest, CompletionResponse, ServerStats, TokenLogprob};

/// Running account of what an extraction has cost so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackLedger {
    pub queries: u64,
    pub prompt_tokens: u64,
    pub full_logprob_vectors: u64,
    pub partial_vectors: u64,
    pub spend: f64,
    pub price_per_1k_tokens: f64,
}

impl AttackLedger {
    pub fn new(price_per_1k_tokens: f64) -> Self {
        Self {
            price_per_1k_tokens,
            ..Self::default()
        }
    }

    fn record_query(&mut self, prompt_tokens: usize) {
        self.queries += 1;
        self.prompt_tokens += prompt_tokens as u64;
        self.spend = self.prompt_tokens as f64 * self.price_per_1k_tokens / 1000.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(50),
        }
    }
}

/// HTTP client for the completions API. Clones share one ledger.
#[derive(Debug, Clone)]
pub struct ApiClient {
    http: reqwest::Client,
    base: String,
    pub vocab: usize,
    pub top_k: usize,
    pub retry: RetryPolicy,
    ledger: Arc<Mutex<AttackLedger>>,
}

impl ApiClient {
    pub fn new(base_url: impl Into<String>, vocab: usize, top_k: usize, price_per_1k_tokens: f64) -> Result<Self> {
        if top_k < 2 || top_k > vocab {
            return Err(ProviderError::Config(format!(
                "top_k must lie in [2, v={vocab}], got {top_k}"
            )));
        }
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            http,
            base: base_url.into().trim_end_matches('/').to_string(),
            vocab,
            top_k,
            retry: RetryPolicy::default(),
            ledger: Arc::new(Mutex::new(AttackLedger::new(price_per_1k_tokens))),
        })
    }

    pub fn ledger(&self) -> AttackLedger {
        *self.ledger.lock().expect("ledger lock")
    }

    pub(crate) fn note_vector(&self, full: bool) {
        let mut l = self.ledger.lock().expect("ledger lock");
        if full {
            l.full_logprob_vectors += 1;
        } else {
            l.partial_vectors += 1;
        }
    }

    pub async fn health(&self) -> Result<()> {
        let resp = self
            .http
            .get(format!("{}/healthz", self.base))
            .send()
            .await
            .map_err(|e| transport(1, e))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ProviderError::Rejected {
                status: resp.status().as_u16(),
                message: "health check failed".into(),
            })
        }
    }

    pub async fn server_stats(&self) -> Result<ServerStats> {
        let resp = self
            .http
            .get(format!("{}/v1/stats", self.base))
            .send()
            .await
            .map_err(|e| transport(1, e))?;
        resp.json().await.map_err(|e| transport(1, e))
    }

    /// One completion with retry on transient failures; only successful
    /// calls reach the ledger.
    pub async fn complete(&self, prompt: &[u32], k: usize, bias: &BTreeMap<u32, f64>) -> Result<Vec<TokenLogprob>> {
        let req = CompletionRequest {
            prompt: prompt.to_vec(),
            logprob_count: k,
            logit_bias: bias.clone(),
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(&req, attempt).await {
                Ok(resp) => {
                    self.ledger.lock().expect("ledger lock").record_query(prompt.len());
                    return Ok(resp.logprobs);
                }
                Err(e) if e.is_transient() && attempt < self.retry.attempts => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                    tracing::debug!(attempt, ?delay, error = %e, "retrying completion");
                    tokio::time::sleep(delay).await;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn send_once(&self, req: &CompletionRequest, attempt: u32) -> Result<CompletionResponse> {
        let resp = self
            .http
            .post(format!("{}/v1/completions", self.base))
            .json(req)
            .send()
            .await
            .map_err(|e| transport(attempt, e))?;
        let status = resp.status();
        if status.is_success() {
            return resp.json().await.map_err(|e| transport(attempt, e));
        }
        let message = resp
            .json::<serde_json::Value>()
            .await
            .ok()
            .and_then(|v| v.get("error").and_then(|m| m.as_str()).map(str::to_string))
            .unwrap_or_else(|| status.to_string());
        Err(ProviderError::Rejected {
            status: status.as_u16(),
            message,
        })
    }
}

fn transport(attempts: u32, e: reqwest::Error) -> ProviderError {
    ProviderError::Transport {
        attempts,
        message: e.to_string(),
    }
}
