//! A mock completions API that exposes top-k logprobs with logit bias, plus
//! the client-side harvester that turns such an API into a full logprob
//! matrix suitable for parameter recovery.

pub mod attack;
pub mod client;
pub mod error;
pub mod extract;
pub mod server;

pub use attack::{run_attack, AttackOptions, AttackResult};
pub use client::{ApiClient, AttackLedger, RetryPolicy};
pub use error::{ProviderError, Result};
pub use extract::{extract_full_logprobs, reconstruct_from_subset, DEFAULT_BOOST};
pub use server::{serve, ApiConfig, CompletionRequest, CompletionResponse, MockModel, ServerHandle, TokenLogprob};
