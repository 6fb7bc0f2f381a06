//! In-process HTTP double of a completions endpoint that returns top-k
//! logprobs and honours a per-token additive logit bias.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ellsig_core::linalg::log_softmax;
use ellsig_core::synth::{normalize, FinalLayerParams, HiddenState};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::error::{ProviderError, Result};

#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub model: FinalLayerParams,
    /// Largest `logprob_count` a request may ask for.
    pub top_k: usize,
    pub max_bias_tokens: usize,
    pub price_per_1k_tokens: f64,
    /// Sustained requests per second; `None` disables throttling.
    pub rate_limit_qps: Option<f64>,
}

impl ApiConfig {
    pub fn new(model: FinalLayerParams, top_k: usize) -> Self {
        Self {
            model,
            top_k,
            max_bias_tokens: 300,
            price_per_1k_tokens: 0.0,
            rate_limit_qps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.model.v;
        if self.top_k < 2 || self.top_k > v {
            return Err(ProviderError::Config(format!(
                "top_k must lie in [2, v={v}], got {}",
                self.top_k
            )));
        }
        if !(self.price_per_1k_tokens.is_finite() && self.price_per_1k_tokens >= 0.0) {
            return Err(ProviderError::Config("price_per_1k_tokens must be finite and >= 0".into()));
        }
        if let Some(q) = self.rate_limit_qps {
            if !(q.is_finite() && q > 0.0) {
                return Err(ProviderError::Config("rate_limit_qps must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: Vec<u32>,
    pub logprob_count: usize,
    #[serde(default)]
    pub logit_bias: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token_id: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub logprobs: Vec<TokenLogprob>,
}

/// Deterministic prompt-to-logits map: the prompt's SHA-256 seeds a Gaussian
/// hidden state that runs through the model's final layer.
#[derive(Debug, Clone)]
pub struct MockModel {
    params: Arc<FinalLayerParams>,
}

impl MockModel {
    pub fn new(params: FinalLayerParams) -> Self {
        Self {
            params: Arc::new(params),
        }
    }

    pub fn params(&self) -> &FinalLayerParams {
        &self.params
    }

    pub fn hidden_state(&self, prompt: &[u32]) -> HiddenState {
        let mut h = Sha256::new();
        for t in prompt {
            h.update(t.to_le_bytes());
        }
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        HiddenState::gaussian(&mut rng, self.params.d)
    }

    pub fn logits(&self, prompt: &[u32]) -> Result<Vec<f64>> {
        let x = self.hidden_state(prompt);
        let xhat = normalize(&x, self.params.norm, self.params.eps)?;
        Ok(self.params.logits_from_normalized(&xhat))
    }

    /// Full log-softmax of the biased logits.
    pub fn logprobs(&self, prompt: &[u32], bias: &BTreeMap<u32, f64>) -> Result<Vec<f64>> {
        let mut z = self.logits(prompt)?;
        for (&t, &b) in bias {
            if let Some(zi) = z.get_mut(t as usize) {
                *zi += b;
            }
        }
        Ok(log_softmax(&z))
    }

    /// Top `k` entries, largest first, ties broken by token id.
    pub fn top_k(&self, prompt: &[u32], k: usize, bias: &BTreeMap<u32, f64>) -> Result<Vec<TokenLogprob>> {
        let lp = self.logprobs(prompt, bias)?;
        let mut idx: Vec<usize> = (0..lp.len()).collect();
        idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
        Ok(idx
            .into_iter()
            .take(k)
            .map(|i| TokenLogprob {
                token_id: i as u32,
                value: lp[i],
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub prompt_tokens: usize,
    pub logprob_count: usize,
    pub bias_tokens: usize,
}

/// Counters the server keeps about itself; only successful completions count
/// as queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub queries: u64,
    pub prompt_tokens: u64,
    pub rejected: u64,
    pub throttled: u64,
}

struct Bucket {
    tokens: f64,
    last: Instant,
}

struct AppState {
    model: MockModel,
    top_k: usize,
    max_bias_tokens: usize,
    qps: Option<f64>,
    bucket: Mutex<Bucket>,
    log: Mutex<Vec<LogEntry>>,
    stats: Mutex<ServerStats>,
}

impl AppState {
    fn admit(&self) -> bool {
        let Some(qps) = self.qps else { return true };
        let cap = qps.max(1.0);
        let mut b = self.bucket.lock().expect("bucket lock");
        let now = Instant::now();
        b.tokens = (b.tokens + now.duration_since(b.last).as_secs_f64() * qps).min(cap);
        b.last = now;
        if b.tokens >= 1.0 {
            b.tokens -= 1.0;
            true
        } else {
            false
        }
    }

    fn check(&self, req: &CompletionRequest) -> std::result::Result<(), String> {
        let v = self.model.params().v;
        if req.prompt.is_empty() {
            return Err("prompt must contain at least one token".into());
        }
        if let Some(t) = req.prompt.iter().find(|&&t| t as usize >= v) {
            return Err(format!("prompt token {t} outside vocabulary of {v}"));
        }
        if req.logprob_count == 0 || req.logprob_count > self.top_k {
            return Err(format!("logprob_count must lie in [1, {}]", self.top_k));
        }
        if req.logit_bias.len() > self.max_bias_tokens {
            return Err(format!(
                "logit_bias has {} entries, limit is {}",
                req.logit_bias.len(),
                self.max_bias_tokens
            ));
        }
        for (&t, &b) in &req.logit_bias {
            if t as usize >= v {
                return Err(format!("bias token {t} outside vocabulary of {v}"));
            }
            if !b.is_finite() {
                return Err(format!("bias for token {t} is not finite"));
            }
        }
        Ok(())
    }
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn completions(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    if !st.admit() {
        st.stats.lock().expect("stats lock").throttled += 1;
        return error_response(StatusCode::TOO_MANY_REQUESTS, "rate limit exceeded");
    }
    let parsed = serde_json::from_slice::<CompletionRequest>(&body)
        .map_err(|e| format!("malformed body: {e}"))
        .and_then(|req| st.check(&req).map(|()| req));
    let req = match parsed {
        Ok(r) => r,
        Err(msg) => {
            st.stats.lock().expect("stats lock").rejected += 1;
            return error_response(StatusCode::BAD_REQUEST, msg);
        }
    };
    let logprobs = match st.model.top_k(&req.prompt, req.logprob_count, &req.logit_bias) {
        Ok(l) => l,
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    st.log.lock().expect("log lock").push(LogEntry {
        prompt_tokens: req.prompt.len(),
        logprob_count: req.logprob_count,
        bias_tokens: req.logit_bias.len(),
    });
    {
        let mut s = st.stats.lock().expect("stats lock");
        s.queries += 1;
        s.prompt_tokens += req.prompt.len() as u64;
    }
    Json(CompletionResponse { logprobs }).into_response()
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<ServerStats> {
    Json(*st.stats.lock().expect("stats lock"))
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> ServerStats {
        *self.state.stats.lock().expect("stats lock")
    }

    pub fn request_log(&self) -> Vec<LogEntry> {
        self.state.log.lock().expect("log lock").clone()
    }

    pub fn model(&self) -> &MockModel {
        &self.state.model
    }

    /// Resolves when the listener stops on its own (for foreground serving).
    pub async fn wait(mut self) -> Result<()> {
        if let Some(task) = self.task.take() {
            task.await.map_err(|e| ProviderError::Io(std::io::Error::other(e)))??;
        }
        Ok(())
    }

    pub async fn shutdown(mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait().await
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn router(config: &ApiConfig) -> Result<(Router, Arc<AppState>)> {
    config.validate()?;
    let cap = config.rate_limit_qps.map_or(0.0, |q| q.max(1.0));
    let state = Arc::new(AppState {
        model: MockModel::new(config.model.clone()),
        top_k: config.top_k,
        max_bias_tokens: config.max_bias_tokens,
        qps: config.rate_limit_qps,
        bucket: Mutex::new(Bucket {
            tokens: cap,
            last: Instant::now(),
        }),
        log: Mutex::new(Vec::new()),
        stats: Mutex::new(ServerStats::default()),
    });
    let app = Router::new()
        .route("/v1/completions", post(completions))
        .route("/v1/stats", get(stats))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state.clone());
    Ok((app, state))
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn serve(config: &ApiConfig, addr: SocketAddr) -> Result<ServerHandle> {
    let (app, state) = router(config)?;
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    tracing::info!(%addr, "mock completions API listening");
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(tx),
        task: Some(task),
    })
}
