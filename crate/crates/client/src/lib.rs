//! Blocking client for the nafx HTTP service.

use std::time::Duration;

use reqwest::blocking::{Client as HttpClient, Response};
use reqwest::header::CONTENT_TYPE;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport { url: String, source: reqwest::Error },
    #[error("server answered {status}: {message}")]
    Api { status: u16, message: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl ClientError {
    /// True for 4xx answers, i.e. the request itself was at fault.
    pub fn is_client_error(&self) -> bool {
        matches!(self, Self::Api { status, .. } if (400..500).contains(status))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub layers: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilation_growth: usize,
    pub cond_dim: usize,
    pub sample_rate: u32,
    pub receptive_field_samples: usize,
    pub receptive_field_ms: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub id: String,
    pub frames: usize,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub conditioning: Vec<f32>,
    /// Uploaded source id or built-in spec such as `impulse:2.5s`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub source: String,
    pub metric: String,
    pub min: f64,
    pub max: f64,
    pub steps: usize,
}

/// Grid sweep result; `values[i][j]` is `None` where `status[i][j]` marks a
/// failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub metric: String,
    pub c0_axis: Vec<f64>,
    pub c1_axis: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub status: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: HttpClient,
}

impl Client {
    /// `base_url` like `http://127.0.0.1:8080`.
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = HttpClient::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|source| ClientError::Transport {
                url: base_url.to_string(),
                source,
            })?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(&self, url: &str, result: reqwest::Result<Response>) -> Result<Response, ClientError> {
        let resp = result.map_err(|source| ClientError::Transport {
            url: url.to_string(),
            source,
        })?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().unwrap_or_default();
        let message = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| b.error)
            .unwrap_or(text);
        Err(ClientError::Api {
            status: status.as_u16(),
            message,
        })
    }

    fn json<T: for<'de> Deserialize<'de>>(resp: Response) -> Result<T, ClientError> {
        resp.json().map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn model(&self) -> Result<ModelInfo, ClientError> {
        let url = self.url("/api/model");
        Self::json(self.check(&url, self.http.get(&url).send())?)
    }

    pub fn sources(&self) -> Result<Vec<SourceInfo>, ClientError> {
        let url = self.url("/api/sources");
        Self::json(self.check(&url, self.http.get(&url).send())?)
    }

    /// Upload WAV bytes; returns the id to render against.
    pub fn upload_source(&self, wav: Vec<u8>) -> Result<SourceInfo, ClientError> {
        let url = self.url("/api/sources");
        let req = self.http.post(&url).header(CONTENT_TYPE, "audio/wav").body(wav);
        Self::json(self.check(&url, req.send())?)
    }

    /// Float32 WAV bytes of the rendered source.
    pub fn render(&self, request: &RenderRequest) -> Result<Vec<u8>, ClientError> {
        let url = self.url("/api/render");
        let resp = self.check(&url, self.http.post(&url).json(request).send())?;
        resp.bytes()
            .map(|b| b.to_vec())
            .map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn sweep(&self, params: &SweepParams) -> Result<SweepResult, ClientError> {
        let url = self.url("/api/sweep");
        let steps = params.steps.to_string();
        let (min, max) = (params.min.to_string(), params.max.to_string());
        let query = [
            ("source", params.source.as_str()),
            ("metric", params.metric.as_str()),
            ("min", min.as_str()),
            ("max", max.as_str()),
            ("steps", steps.as_str()),
        ];
        Self::json(self.check(&url, self.http.get(&url).query(&query).send())?)
    }
}
