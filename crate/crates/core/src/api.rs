//! JSON request and response bodies shared by the service and its client.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::align::{ResampleMethod, SilenceMode};
use crate::catalog::{AssetQuery, AssetRecord, ScaleEstimate, ScaleInputs, StoreStats};
use crate::pipeline::{AssetSummary, ClusterOutcome, CorpusSpec, IngestOutcome, Manifest, PcaOutcome};

/// Error body returned with every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub store_root: PathBuf,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitResponse {
    pub store_root: PathBuf,
    pub stats: StoreStats,
}

pub type EstimateRequest = ScaleInputs;
pub type EstimateResponse = ScaleEstimate;
pub type StatsResponse = StoreStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub dir: PathBuf,
}

pub type IngestResponse = IngestOutcome;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AssetsRequest {
    #[serde(default)]
    pub query: AssetQuery,
}

pub type AssetsResponse = Vec<AssetRecord>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProcessRequest {
    #[serde(default)]
    pub query: AssetQuery,
    /// Overrides the configured worker count.
    #[serde(default)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessResponse {
    pub assets: Vec<AssetSummary>,
}

/// Row selection shared by the matrix-based endpoints. `None` fields fall
/// back to the service configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatrixSelection {
    #[serde(default)]
    pub query: AssetQuery,
    #[serde(default)]
    pub silence: Option<SilenceMode>,
    #[serde(default)]
    pub method: Option<ResampleMethod>,
    #[serde(default)]
    pub grid_period_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub valid_fraction: f64,
    /// Mean over valid cells; `None` when the column has none.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResponse {
    pub n_assets: usize,
    pub n_rows: usize,
    pub grid_period_s: f64,
    pub silence: SilenceMode,
    pub valid_fraction: f64,
    pub columns: Vec<ColumnSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PcaRequest {
    #[serde(default)]
    pub selection: MatrixSelection,
    #[serde(default)]
    pub k: Option<usize>,
}

pub type PcaResponse = PcaOutcome;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterRequest {
    #[serde(default)]
    pub selection: MatrixSelection,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub type ClusterResponse = ClusterOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRequest {
    #[serde(default)]
    pub selection: MatrixSelection,
    #[serde(default)]
    pub window_frames: Option<usize>,
    #[serde(default)]
    pub hop_frames: Option<usize>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub path: PathBuf,
    pub n_windows: usize,
    pub window_frames: usize,
    pub n_features: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRequest {
    pub spec: CorpusSpec,
    pub out_dir: PathBuf,
}

pub type SynthResponse = Manifest;
