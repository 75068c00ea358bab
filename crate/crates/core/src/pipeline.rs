//! End-to-end orchestration: configuration, synthetic corpora, ingest,
//! per-asset processing with a worker pool, and matrix assembly.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{self, AlignError, FeatureMatrix, ResampleMethod, SilenceMode, TimeGrid};
use crate::analysis::{self, AnalysisError, Clustering, KMeansParams, PcaModel, StandardizationStats};
use crate::catalog::{AssetQuery, AssetRecord, CatalogError, Store};
use crate::export::ExportError;
use crate::features::{self, FeatureConfig, FeatureError, FeatureTrack, ALL_FEATURES};
use crate::fsutil;
use crate::ingest::{self, AudioBuffer, FilenameTemplate, IngestError};
use crate::vad::{self, VadConfig, VadError, VadSegment};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Rows used for the silhouette summary of large clusterings.
pub const SILHOUETTE_SAMPLE_ROWS: usize = 2_000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid corpus spec: {0}")]
    Corpus(String),
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),
    #[error("vad: {0}")]
    Vad(#[from] VadError),
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("catalog: {0}")]
    Catalog(#[from] CatalogError),
    #[error("align: {0}")]
    Align(#[from] AlignError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("export: {0}")]
    Export(#[from] ExportError),
    #[error("asset {asset_id} has not been processed (no {missing})")]
    NotProcessed { asset_id: u64, missing: &'static str },
    #[error("no assets match the query")]
    NoAssets,
    #[error("asset {asset_id}: {source}")]
    Asset {
        asset_id: u64,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl PipelineError {
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "InvalidConfig",
            PipelineError::Corpus(_) => "InvalidCorpus",
            PipelineError::Ingest(e) => e.kind(),
            PipelineError::Vad(e) => e.kind(),
            PipelineError::Features(e) => e.kind(),
            PipelineError::Catalog(e) => e.kind(),
            PipelineError::Align(e) => e.kind(),
            PipelineError::Analysis(e) => e.kind(),
            PipelineError::Export(e) => e.kind(),
            PipelineError::NotProcessed { .. } => "NotProcessed",
            PipelineError::NoAssets => "NoAssets",
            PipelineError::Asset { source, .. } => source.kind(),
            PipelineError::Io { .. } => "IoFailure",
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn for_asset(self, asset_id: u64) -> Self {
        PipelineError::Asset {
            asset_id,
            source: Box::new(self),
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSection {
    /// Relative paths are resolved against the config file's directory.
    #[serde(default = "default_root")]
    pub root: PathBuf,
}

fn default_root() -> PathBuf {
    PathBuf::from("store")
}

impl Default for StoreSection {
    fn default() -> Self {
        Self { root: default_root() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSection {
    #[serde(default)]
    pub pattern: FilenameTemplate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignSection {
    #[serde(default = "default_grid_period")]
    pub grid_period_s: f64,
    #[serde(default)]
    pub method: ResampleMethod,
    #[serde(default)]
    pub silence: SilenceMode,
}

fn default_grid_period() -> f64 {
    0.01
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            grid_period_s: default_grid_period(),
            method: ResampleMethod::default(),
            silence: SilenceMode::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_pca_k")]
    pub pca_k: usize,
}

fn default_k() -> usize {
    3
}
fn default_seed() -> u64 {
    42
}
fn default_pca_k() -> usize {
    3
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            seed: default_seed(),
            pca_k: default_pca_k(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    #[serde(default = "default_window")]
    pub window_frames: usize,
    #[serde(default = "default_hop")]
    pub hop_frames: usize,
}

fn default_window() -> usize {
    300
}
fn default_hop() -> usize {
    150
}

impl Default for ExportSection {
    fn default() -> Self {
        Self {
            window_frames: default_window(),
            hop_frames: default_hop(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSection {
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            workers: default_workers(),
        }
    }
}

/// Everything a run needs. Serialized as TOML; every key has a default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub store: StoreSection,
    #[serde(default)]
    pub template: TemplateSection,
    #[serde(default)]
    pub vad: VadConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub align: AlignSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub export: ExportSection,
    #[serde(default)]
    pub process: ProcessSection,
}

impl PipelineConfig {
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self {
            store: StoreSection { root: root.into() },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.vad.validate()?;
        self.features.validate()?;
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.align.grid_period_s.is_finite() && self.align.grid_period_s > 0.0) {
            return bad(format!("align.grid_period_s {} must be positive", self.align.grid_period_s));
        }
        if self.analysis.k == 0 {
            return bad("analysis.k must be at least 1".into());
        }
        if self.analysis.pca_k == 0 {
            return bad("analysis.pca_k must be at least 1".into());
        }
        if self.export.window_frames == 0 || self.export.hop_frames == 0 {
            return bad("export.window_frames and export.hop_frames must be at least 1".into());
        }
        if self.process.workers == 0 {
            return bad("process.workers must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file, resolving a relative store root against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if cfg.store.root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.store.root = base.join(&cfg.store.root);
        }
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// synthetic corpora

/// One synthetic event. `freq_hz = None` is a white-noise burst.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Burst {
    pub start_s: f64,
    pub length_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<f64>,
    /// Burst RMS relative to the noise floor.
    pub snr_db: f64,
}

impl Burst {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.length_s
    }

    pub fn kind(&self) -> &'static str {
        if self.freq_hz.is_some() {
            "tone"
        } else {
            "noise"
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub duration_s: f64,
    #[serde(default)]
    pub bursts: Vec<Burst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: u32,
    /// RMS of the continuous background noise, dBFS.
    #[serde(default = "default_noise_floor")]
    pub noise_floor_db: f64,
    /// Start time of the first file; each next file starts where the
    /// previous one ends.
    #[serde(default = "default_corpus_start")]
    pub start: DateTime<Utc>,
    /// Zones assigned round-robin.
    #[serde(default = "default_zones")]
    pub zones: Vec<String>,
    pub files: Vec<FileSpec>,
}

fn default_rate() -> u32 {
    22_050
}
fn default_noise_floor() -> f64 {
    -60.0
}
fn default_corpus_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2018, 8, 1, 0, 0, 0).unwrap()
}
fn default_zones() -> Vec<String> {
    vec!["08".into(), "13".into()]
}

/// Burst edges ramp over this long to avoid clicks.
const RAMP_S: f64 = 0.005;

/// Knobs for [`CorpusSpec::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCorpus {
    pub n_files: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// Every n-th file (1-based) has no bursts; 0 disables.
    #[serde(default)]
    pub silent_every: usize,
    #[serde(default = "default_gap_range")]
    pub gap_s: (f64, f64),
    #[serde(default = "default_length_range")]
    pub length_s: (f64, f64),
    #[serde(default = "default_snr_range")]
    pub snr_db: (f64, f64),
    #[serde(default = "default_freq_range")]
    pub freq_hz: (f64, f64),
    /// Probability that a burst is noise rather than a tone.
    #[serde(default = "default_noise_prob")]
    pub noise_probability: f64,
}

fn default_gap_range() -> (f64, f64) {
    (0.5, 3.0)
}
fn default_length_range() -> (f64, f64) {
    (0.3, 3.0)
}
fn default_snr_range() -> (f64, f64) {
    (20.0, 35.0)
}
fn default_freq_range() -> (f64, f64) {
    (100.0, 400.0)
}
fn default_noise_prob() -> f64 {
    0.2
}

impl RandomCorpus {
    pub fn new(n_files: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            n_files,
            duration_s,
            seed,
            silent_every: 0,
            gap_s: default_gap_range(),
            length_s: default_length_range(),
            snr_db: default_snr_range(),
            freq_hz: default_freq_range(),
            noise_probability: default_noise_prob(),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl CorpusSpec {
    /// Alternating gaps and bursts drawn from `params`, deterministic per seed.
    pub fn random(params: &RandomCorpus) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let files = (0..params.n_files)
            .map(|i| {
                let mut bursts = Vec::new();
                if params.silent_every == 0 || (i + 1) % params.silent_every != 0 {
                    let mut t = uniform(&mut rng, params.gap_s);
                    loop {
                        let length = uniform(&mut rng, params.length_s);
                        let end_margin = params.gap_s.0.min(0.5);
                        if t + length > params.duration_s - end_margin {
                            break;
                        }
                        let noise = rng.random::<f64>() < params.noise_probability;
                        let freq = uniform(&mut rng, params.freq_hz);
                        let snr = uniform(&mut rng, params.snr_db);
                        bursts.push(Burst {
                            start_s: round_ms(t),
                            length_s: round_ms(length),
                            freq_hz: (!noise).then(|| round_ms(freq)),
                            snr_db: round_ms(snr),
                        });
                        t = round_ms(t) + round_ms(length) + uniform(&mut rng, params.gap_s);
                    }
                }
                FileSpec {
                    duration_s: params.duration_s,
                    bursts,
                }
            })
            .collect();
        Self {
            seed: params.seed,
            sample_rate_hz: default_rate(),
            noise_floor_db: default_noise_floor(),
            start: default_corpus_start(),
            zones: default_zones(),
            files,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Corpus(m));
        if self.sample_rate_hz == 0 {
            return bad("sample_rate_hz must be positive".into());
        }
        if !self.noise_floor_db.is_finite() || self.noise_floor_db > 0.0 {
            return bad(format!("noise_floor_db {} must be finite and <= 0", self.noise_floor_db));
        }
        if self.zones.is_empty() {
            return bad("zones must not be empty".into());
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        for (i, f) in self.files.iter().enumerate() {
            if !(f.duration_s.is_finite() && f.duration_s > 0.0) {
                return bad(format!("file {i}: duration {} must be positive", f.duration_s));
            }
            let mut sorted = f.bursts.clone();
            sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
            for b in &sorted {
                if !(b.start_s >= 0.0 && b.length_s > 0.0 && b.end_s() <= f.duration_s) {
                    return bad(format!(
                        "file {i}: burst [{}, {}) outside [0, {}]",
                        b.start_s,
                        b.end_s(),
                        f.duration_s
                    ));
                }
                if !b.snr_db.is_finite() {
                    return bad(format!("file {i}: burst snr_db must be finite"));
                }
                if let Some(freq) = b.freq_hz {
                    if !(freq > 0.0 && freq < nyquist) {
                        return bad(format!("file {i}: tone {freq} Hz outside (0, {nyquist})"));
                    }
                }
            }
            for w in sorted.windows(2) {
                if w[1].start_s < w[0].end_s() {
                    return bad(format!(
                        "file {i}: bursts at {} s and {} s overlap",
                        w[0].start_s, w[1].start_s
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn file_start(&self, index: usize) -> DateTime<Utc> {
        let offset: f64 = self.files[..index].iter().map(|f| f.duration_s).sum();
        self.start + chrono::Duration::milliseconds((offset * 1000.0).round() as i64)
    }

    pub fn zone(&self, index: usize) -> &str {
        &self.zones[index % self.zones.len()]
    }

    /// Renders file `index` deterministically from `(seed, index)`.
    pub fn render_file(&self, index: usize) -> Result<AudioBuffer, PipelineError> {
        let f = &self.files[index];
        let sr = self.sample_rate_hz as f64;
        let n = (f.duration_s * sr).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let floor_rms = 10f64.powf(self.noise_floor_db / 20.0);
        let floor = Normal::new(0.0, floor_rms).expect("finite sigma");
        let mut x: Vec<f64> = (0..n).map(|_| floor.sample(&mut rng)).collect();
        let ramp = (RAMP_S * sr).round() as usize;
        for b in &f.bursts {
            let s0 = ((b.start_s * sr).round() as usize).min(n);
            let s1 = ((b.end_s() * sr).round() as usize).min(n);
            let len = s1 - s0;
            let rms = floor_rms * 10f64.powf(b.snr_db / 20.0);
            let ramp = ramp.min(len / 2);
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            let burst_noise = Normal::new(0.0, rms).expect("finite sigma");
            for (j, sample) in x[s0..s1].iter_mut().enumerate() {
                let edge = j.min(len - 1 - j);
                let gain = if edge < ramp {
                    0.5 * (1.0 - (std::f64::consts::PI * (edge as f64 + 0.5) / ramp as f64).cos())
                } else {
                    1.0
                };
                let v = match b.freq_hz {
                    Some(freq) => {
                        let t = (s0 + j) as f64 / sr;
                        rms * std::f64::consts::SQRT_2 * (std::f64::consts::TAU * freq * t + phase).sin()
                    }
                    None => burst_noise.sample(&mut rng),
                };
                *sample += gain * v;
            }
        }
        Ok(AudioBuffer::from_clamped(x, self.sample_rate_hz)?)
    }
}

fn round_ms(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Ground truth for one synthesized file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file_name: String,
    pub zone: String,
    pub start_datetime: DateTime<Utc>,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub n_samples: u64,
    pub digest: String,
    pub bursts: Vec<Burst>,
}

impl ManifestEntry {
    pub fn true_segments(&self) -> Vec<VadSegment> {
        self.bursts
            .iter()
            .filter_map(|b| VadSegment::new(b.start_s, b.end_s()).ok())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Corpus(format!("manifest line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?)
    }
}

/// Writes one WAV per file (named by the default template) plus
/// `manifest.jsonl` into `out_dir`.
pub fn synthesize_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest, PipelineError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let template = FilenameTemplate::default();
    let mut entries = Vec::with_capacity(spec.files.len());
    for (i, f) in spec.files.iter().enumerate() {
        let start = spec.file_start(i);
        let name = template.render(spec.zone(i), &start);
        let buffer = spec.render_file(i)?;
        let bytes = ingest::encode_wav(&buffer);
        let path = out_dir.join(&name);
        fsutil::write_atomic(&path, &bytes).map_err(|e| PipelineError::io(&path, e))?;
        let mut bursts = f.bursts.clone();
        bursts.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        entries.push(ManifestEntry {
            file_name: name,
            zone: spec.zone(i).to_string(),
            start_datetime: start,
            duration_s: f.duration_s,
            sample_rate_hz: spec.sample_rate_hz,
            n_samples: buffer.len() as u64,
            digest: ingest::fingerprint(&bytes),
            bursts,
        });
    }
    let manifest = Manifest { entries };
    let path = out_dir.join(MANIFEST_FILE);
    fsutil::write_atomic(&path, manifest.render().as_bytes()).map_err(|e| PipelineError::io(&path, e))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// ingest and processing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestFailure {
    pub file: PathBuf,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub registered: Vec<AssetRecord>,
    pub failed: Vec<IngestFailure>,
}

/// Registers every `*.wav` directly inside `dir`, in file-name order. Bad
/// files are reported, not fatal.
pub fn ingest_dir(store: &mut Store, dir: &Path, template: &FilenameTemplate) -> Result<IngestOutcome, PipelineError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| PipelineError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut out = IngestOutcome::default();
    for path in paths {
        match ingest::register_asset(store, &path, template) {
            Ok(rec) => out.registered.push(rec),
            Err(IngestError::Catalog(e @ (CatalogError::Io { .. } | CatalogError::Locked(_) | CatalogError::ReadOnly))) => {
                return Err(e.into())
            }
            Err(e) => out.failed.push(IngestFailure {
                file: path,
                kind: e.kind().to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub feature_name: String,
    pub frame_count: u64,
    pub period_s: f64,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSummary {
    pub asset_id: u64,
    pub tracks: Vec<TrackSummary>,
    pub n_segments: usize,
    pub coverage: f64,
}

/// Output of the compute half of processing, before anything is written.
struct Computed {
    segments: Vec<VadSegment>,
    tracks: Vec<FeatureTrack>,
}

fn compute_asset(asset: &AssetRecord, cfg: &PipelineConfig) -> Result<Computed, PipelineError> {
    let buffer = ingest::read_wav(&asset.path)?;
    let segments = vad::detect(&buffer, &cfg.vad)?;
    let tracks = features::extract_all(&buffer, &cfg.features)?;
    Ok(Computed { segments, tracks })
}

fn commit_asset(store: &mut Store, asset: &AssetRecord, computed: Computed) -> Result<AssetSummary, PipelineError> {
    store.put_segments(asset.asset_id, &computed.segments)?;
    store.attach_tracks(&computed.tracks, asset.asset_id)?;
    Ok(AssetSummary {
        asset_id: asset.asset_id,
        tracks: computed
            .tracks
            .iter()
            .map(|t| TrackSummary {
                feature_name: t.feature_name().to_string(),
                frame_count: t.len() as u64,
                period_s: t.period_s(),
                valid_fraction: t.valid_fraction(),
            })
            .collect(),
        n_segments: computed.segments.len(),
        coverage: vad::segment_coverage(&computed.segments, asset.duration_s),
    })
}

/// VAD and feature extraction for one asset; results go into the catalog.
pub fn process_asset(store: &mut Store, asset_id: u64, cfg: &PipelineConfig) -> Result<AssetSummary, PipelineError> {
    let asset = store.asset(asset_id)?.clone();
    compute_asset(&asset, cfg)
        .and_then(|c| commit_asset(store, &asset, c))
        .map_err(|e| e.for_asset(asset_id))
}

/// Processes `asset_ids` on `workers` threads. Computation runs in
/// parallel; catalog writes happen on the calling thread one asset at a
/// time. Summaries come back in input order. On failure the other assets
/// are still committed and the first failing asset's error is returned.
pub fn process_assets(
    store: &mut Store,
    asset_ids: &[u64],
    cfg: &PipelineConfig,
    workers: usize,
) -> Result<Vec<AssetSummary>, PipelineError> {
    cfg.validate()?;
    let assets: Vec<AssetRecord> = asset_ids
        .iter()
        .map(|&id| store.asset(id).cloned())
        .collect::<Result<_, _>>()?;
    let workers = workers.max(1).min(assets.len().max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<Result<AssetSummary, PipelineError>>> = (0..assets.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Result<Computed, PipelineError>)>(workers);
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, assets) = (&next, &assets);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= assets.len() {
                    break;
                }
                if tx.send((i, compute_asset(&assets[i], cfg))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, computed) in rx {
            let asset = &assets[i];
            let r = computed.and_then(|c| commit_asset(store, asset, c));
            results[i] = Some(r.map_err(|e| e.for_asset(asset.asset_id)));
        }
    });
    results.into_iter().map(|r| r.expect("every asset reported")).collect()
}

// ---------------------------------------------------------------------------
// matrices and analysis

fn feature_rank(name: &str) -> (usize, &str) {
    (ALL_FEATURES.iter().position(|f| *f == name).unwrap_or(ALL_FEATURES.len()), name)
}

/// One asset's tracks on a grid covering its duration, tagged with its id,
/// with silence handling applied.
pub fn asset_matrix(store: &Store, asset_id: u64, align_cfg: &AlignSection) -> Result<FeatureMatrix, PipelineError> {
    let asset = store.asset(asset_id)?;
    let refs = store.tracks_for(asset_id);
    if refs.is_empty() {
        return Err(PipelineError::NotProcessed {
            asset_id,
            missing: "feature tracks",
        });
    }
    let mut tracks = refs.into_iter().map(|r| store.resolve(r)).collect::<Result<Vec<_>, _>>()?;
    tracks.sort_by(|a, b| feature_rank(a.feature_name()).cmp(&feature_rank(b.feature_name())));
    let grid = TimeGrid::covering(asset.duration_s, align_cfg.grid_period_s)?;
    let matrix = align::build_matrix(&tracks, &grid, align_cfg.method)?.with_asset_id(asset_id);
    if align_cfg.silence == SilenceMode::Keep {
        return Ok(matrix);
    }
    let segments = store.segments(asset_id)?.ok_or(PipelineError::NotProcessed {
        asset_id,
        missing: "VAD segments",
    })?;
    Ok(align::apply_silence_filter(&matrix, &segments.segments, align_cfg.silence))
}

/// Rows of every asset in `asset_ids`, stacked in that order.
pub fn assemble_matrix(store: &Store, asset_ids: &[u64], align_cfg: &AlignSection) -> Result<FeatureMatrix, PipelineError> {
    if asset_ids.is_empty() {
        return Err(PipelineError::NoAssets);
    }
    let parts = asset_ids
        .iter()
        .map(|&id| asset_matrix(store, id, align_cfg).map_err(|e| e.for_asset(id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(align::concat_matrices(&parts)?)
}

pub fn select_assets(store: &Store, query: &AssetQuery) -> Result<Vec<u64>, PipelineError> {
    Ok(store.query_assets(query)?.into_iter().map(|a| a.asset_id).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaOutcome {
    pub n_rows: usize,
    pub model: PcaModel,
    pub standardization: StandardizationStats,
}

pub fn run_pca(matrix: &FeatureMatrix, k: usize) -> Result<PcaOutcome, PipelineError> {
    let (z, standardization) = analysis::standardize(matrix)?;
    let model = analysis::pca(&z, k)?;
    Ok(PcaOutcome {
        n_rows: matrix.n_rows(),
        model,
        standardization,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    pub n_rows: usize,
    pub clustering: Clustering,
    pub cluster_sizes: Vec<usize>,
    /// Mean silhouette over at most [`SILHOUETTE_SAMPLE_ROWS`] rows; `None`
    /// for `k = 1`.
    pub silhouette: Option<f64>,
}

pub fn run_cluster(matrix: &FeatureMatrix, k: usize, seed: u64) -> Result<ClusterOutcome, PipelineError> {
    let (z, _) = analysis::standardize(matrix)?;
    let clustering = analysis::kmeans(&z, KMeansParams::new(k, seed))?;
    let silhouette = if k >= 2 {
        Some(analysis::silhouette_sampled(&z, &clustering, SILHOUETTE_SAMPLE_ROWS)?)
    } else {
        None
    };
    Ok(ClusterOutcome {
        n_rows: matrix.n_rows(),
        cluster_sizes: clustering.cluster_sizes(),
        clustering,
        silhouette,
    })
}
