//! Optional bridge to an external text generator over HTTP.
//!
//! Contract: POST `{prompt, n, want_logprobs}` as JSON, receive
//! `{texts: [...], logprobs?: [...]}`. The address and bearer token come from
//! configuration or the environment, never from code.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::softmax;

pub const URL_ENV: &str = "EHR_REWRITE_GENERATOR_URL";
pub const TOKEN_ENV: &str = "EHR_REWRITE_GENERATOR_TOKEN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default, skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        EndpointConfig {
            url: url.into(),
            token: None,
            timeout_ms: default_timeout_ms(),
        }
    }

    /// Reads the endpoint from `EHR_REWRITE_GENERATOR_URL` and the optional
    /// token from `EHR_REWRITE_GENERATOR_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(URL_ENV).map_err(|_| Error::config(URL_ENV, "not set"))?;
        Ok(EndpointConfig {
            token: std::env::var(TOKEN_ENV).ok(),
            ..EndpointConfig::new(url)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub n: usize,
    pub want_logprobs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub texts: Vec<String>,
    #[serde(default)]
    pub logprobs: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRewrite {
    pub text: String,
    pub logprob: Option<f64>,
}

pub fn external_generate(endpoint: &EndpointConfig, prompt: &str, n: usize) -> Result<Vec<GeneratedRewrite>> {
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(endpoint.timeout_ms)))
        .build();
    let agent = ureq::Agent::new_with_config(config);
    let mut request = agent.post(&endpoint.url).header("Content-Type", "application/json");
    if let Some(token) = &endpoint.token {
        request = request.header("Authorization", format!("Bearer {token}"));
    }
    let body = GenerateRequest {
        prompt: prompt.to_string(),
        n,
        want_logprobs: true,
    };
    let mut response = request.send_json(&body).map_err(|e| match e {
        ureq::Error::StatusCode(code) => Error::EndpointUnavailable(format!("{}: HTTP {code}", endpoint.url)),
        ureq::Error::Protocol(p) => Error::MalformedResponse(p.to_string()),
        other => Error::EndpointUnavailable(format!("{}: {other}", endpoint.url)),
    })?;
    let raw = response
        .body_mut()
        .read_to_string()
        .map_err(|e| Error::MalformedResponse(e.to_string()))?;
    parse_response(&raw, n)
}

/// Validates a raw response body against the contract.
pub fn parse_response(raw: &str, n: usize) -> Result<Vec<GeneratedRewrite>> {
    let parsed: GenerateResponse = serde_json::from_str(raw).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    if parsed.texts.len() != n {
        return Err(Error::MalformedResponse(format!("expected {n} texts, got {}", parsed.texts.len())));
    }
    let logprobs = match parsed.logprobs {
        Some(lp) if lp.len() != n => {
            return Err(Error::MalformedResponse(format!("expected {n} logprobs, got {}", lp.len())));
        }
        Some(lp) => lp,
        None => vec![None; n],
    };
    Ok(parsed
        .texts
        .into_iter()
        .zip(logprobs)
        .map(|(text, logprob)| GeneratedRewrite { text, logprob })
        .collect())
}

/// Ensemble weights over generated rewrites: softmax of the log-probabilities,
/// or uniform when any of them is missing.
pub fn delta_weights(rewrites: &[GeneratedRewrite]) -> Vec<f64> {
    let logprobs: Option<Vec<f64>> = rewrites.iter().map(|r| r.logprob).collect();
    match logprobs {
        Some(lp) if lp.iter().all(|v| v.is_finite()) => softmax(&lp, 1.0),
        _ => vec![1.0 / rewrites.len() as f64; rewrites.len()],
    }
}
