//! Typed client for the bpcstore HTTP service.

use bpcstore_core::api::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request to {url} failed: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    /// The service answered with an error body.
    #[error("{message}")]
    Api { status: u16, kind: String, message: String },
    #[error("unexpected response from {url}: {message}")]
    Decode { url: String, message: String },
}

impl ClientError {
    pub fn kind(&self) -> &str {
        match self {
            ClientError::Transport { .. } => "Transport",
            ClientError::Api { kind, .. } => kind,
            ClientError::Decode { .. } => "Decode",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn finish<T: DeserializeOwned>(&self, url: String, resp: reqwest::Response) -> Result<T, ClientError> {
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => ClientError::Api {
                    status: status.as_u16(),
                    kind: body.kind,
                    message: body.message,
                },
                Err(_) => ClientError::Api {
                    status: status.as_u16(),
                    kind: "Http".into(),
                    message: String::from_utf8_lossy(&bytes).into_owned(),
                },
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url,
            message: e.to_string(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        self.finish(url, resp).await
    }

    async fn post<B: Serialize + ?Sized, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        self.finish(url, resp).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn init(&self) -> Result<InitResponse, ClientError> {
        self.post("/init", &serde_json::json!({})).await
    }

    pub async fn estimate(&self, req: &EstimateRequest) -> Result<EstimateResponse, ClientError> {
        self.post("/estimate", req).await
    }

    pub async fn stats(&self) -> Result<StatsResponse, ClientError> {
        self.get("/stats").await
    }

    pub async fn ingest(&self, req: &IngestRequest) -> Result<IngestResponse, ClientError> {
        self.post("/ingest", req).await
    }

    pub async fn assets(&self, req: &AssetsRequest) -> Result<AssetsResponse, ClientError> {
        self.post("/assets", req).await
    }

    pub async fn process(&self, req: &ProcessRequest) -> Result<ProcessResponse, ClientError> {
        self.post("/process", req).await
    }

    pub async fn matrix(&self, req: &MatrixSelection) -> Result<MatrixResponse, ClientError> {
        self.post("/matrix", req).await
    }

    pub async fn pca(&self, req: &PcaRequest) -> Result<PcaResponse, ClientError> {
        self.post("/pca", req).await
    }

    pub async fn cluster(&self, req: &ClusterRequest) -> Result<ClusterResponse, ClientError> {
        self.post("/cluster", req).await
    }

    pub async fn export(&self, req: &ExportRequest) -> Result<ExportResponse, ClientError> {
        self.post("/export", req).await
    }

    pub async fn synth(&self, req: &SynthRequest) -> Result<SynthResponse, ClientError> {
        self.post("/synth", req).await
    }
}
