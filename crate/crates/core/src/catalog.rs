//! File-backed catalog that stores metadata and *paths* to bulk artifacts,
//! never the samples or frames themselves.
//!
//! Layout under the store root:
//!
//! ```text
//! catalog/assets.jsonl        one AssetRecord per line
//! catalog/tracks.jsonl        one TrackRef per line
//! catalog/segments/<id>.seg   VAD segments, "# vad v1" text format
//! catalog/.lock               present while a writer holds the store
//! features/<id>/<name>.ftrk   binary feature tracks
//! ```
//!
//! Each record file maps onto one relational table. Records are written in
//! key order (`asset_id`, then `feature_name`) with a fixed field order, and
//! every mutation rewrites the whole file through a temp file and rename.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::{self, ExportError};
use crate::features::FeatureTrack;
use crate::fsutil;
use crate::ingest::AssetMetadata;
use crate::vad::{self, VadError, VadSegment};

pub const CATALOG_DIR: &str = "catalog";
pub const ASSETS_FILE: &str = "assets.jsonl";
pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const SEGMENTS_DIR: &str = "segments";
pub const FEATURES_DIR: &str = "features";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt catalog {file} line {line}: {reason}")]
    CorruptCatalog { file: PathBuf, line: usize, reason: String },
    #[error("store at {0} is locked by another writer (remove {0}/catalog/.lock if stale)")]
    Locked(PathBuf),
    #[error("store was opened read-only")]
    ReadOnly,
    #[error("path {path} already registered with digest {existing}, file now hashes to {found}")]
    DuplicateAsset { path: PathBuf, existing: String, found: String },
    #[error("unknown asset {0}")]
    UnknownAsset(u64),
    #[error("track file {0} is missing")]
    MissingFile(PathBuf),
    #[error("track file {path} disagrees with catalog on {field}")]
    HeaderMismatch { path: PathBuf, field: &'static str },
    #[error("invalid date range: start {0} is not before end {1}")]
    InvalidRange(DateTime<Utc>, DateTime<Utc>),
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Vad(#[from] VadError),
}

impl CatalogError {
    pub fn kind(&self) -> &'static str {
        match self {
            CatalogError::Io { .. } => "IoFailure",
            CatalogError::CorruptCatalog { .. } => "CorruptCatalog",
            CatalogError::Locked(_) => "Locked",
            CatalogError::ReadOnly => "ReadOnly",
            CatalogError::DuplicateAsset { .. } => "DuplicateAsset",
            CatalogError::UnknownAsset(_) => "UnknownAsset",
            CatalogError::MissingFile(_) => "MissingFile",
            CatalogError::HeaderMismatch { .. } => "HeaderMismatch",
            CatalogError::InvalidRange(..) => "InvalidRange",
            CatalogError::InvalidTrack(_) => "InvalidTrack",
            CatalogError::Export(e) => e.kind(),
            CatalogError::Vad(e) => e.kind(),
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CatalogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetRecord {
    pub asset_id: u64,
    pub path: PathBuf,
    pub digest: String,
    pub metadata: AssetMetadata,
    pub sample_rate_hz: u32,
    pub n_samples: u64,
    pub duration_s: f64,
}

/// Catalog entry pointing at one track file. `file_path` is relative to
/// the store root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRef {
    pub asset_id: u64,
    pub feature_name: String,
    pub file_path: PathBuf,
    pub period_s: f64,
    pub start_offset_s: f64,
    pub frame_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub asset_id: u64,
    pub segments: Vec<VadSegment>,
    /// Relative to the store root.
    pub file_path: PathBuf,
}

/// Fields of a new asset; the store assigns the id and duration.
#[derive(Debug, Clone)]
pub struct NewAsset {
    pub path: PathBuf,
    pub digest: String,
    pub metadata: AssetMetadata,
    pub sample_rate_hz: u32,
    pub n_samples: u64,
}

/// Conjunctive asset filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssetQuery {
    pub zone: Option<String>,
    /// Half-open `[from, to)` on the asset start time.
    pub date_range: Option<(DateTime<Utc>, DateTime<Utc>)>,
    pub min_duration_s: Option<f64>,
}

impl AssetQuery {
    pub fn matches(&self, a: &AssetRecord) -> bool {
        self.zone.as_ref().is_none_or(|z| &a.metadata.zone == z)
            && self
                .date_range
                .is_none_or(|(t0, t1)| t0 <= a.metadata.start_datetime && a.metadata.start_datetime < t1)
            && self.min_duration_s.is_none_or(|d| a.duration_s >= d)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub n_assets: u64,
    pub n_tracks: u64,
    /// Bytes of catalog files (record files and segment files).
    pub catalog_bytes: u64,
    /// Bytes of asset and track files the catalog points at.
    pub referenced_bytes: u64,
}

struct WriteLock {
    path: PathBuf,
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Store {
    root: PathBuf,
    assets: BTreeMap<u64, AssetRecord>,
    tracks: BTreeMap<(u64, String), TrackRef>,
    next_id: u64,
    lock: Option<WriteLock>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .field("assets", &self.assets.len())
            .field("tracks", &self.tracks.len())
            .field("writable", &self.lock.is_some())
            .finish()
    }
}

fn load_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CatalogError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CatalogError::io(path, e)),
    };
    let corrupt = |line: usize, reason: String| CatalogError::CorruptCatalog {
        file: path.to_path_buf(),
        line,
        reason,
    };
    if !text.is_empty() && !text.ends_with('\n') {
        let line = text.lines().count();
        return Err(corrupt(line, "record line is not newline-terminated (truncated write?)".into()));
    }
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(i + 1, e.to_string())))
        .collect()
}

fn render_records<'a, T: Serialize + 'a>(records: impl Iterator<Item = &'a T>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn valid_feature_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl Store {
    /// Opens (creating if needed) a store for writing, taking the writer lock.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let root = root.as_ref();
        let catalog = root.join(CATALOG_DIR);
        for dir in [catalog.join(SEGMENTS_DIR), root.join(FEATURES_DIR)] {
            fs::create_dir_all(&dir).map_err(|e| CatalogError::io(&dir, e))?;
        }
        let root = fs::canonicalize(root).map_err(|e| CatalogError::io(root, e))?;
        let lock_path = root.join(CATALOG_DIR).join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(CatalogError::Locked(root)),
            Err(e) => return Err(CatalogError::io(&lock_path, e)),
        }
        let lock = WriteLock { path: lock_path };
        let mut store = Self::load(root)?;
        store.lock = Some(lock);
        for file in [ASSETS_FILE, TRACKS_FILE] {
            let path = store.catalog_dir().join(file);
            if !path.exists() {
                fsutil::write_atomic(&path, b"").map_err(|e| CatalogError::io(&path, e))?;
            }
        }
        Ok(store)
    }

    /// Opens an existing store for reading without taking the lock.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let root = root.as_ref();
        let root = fs::canonicalize(root).map_err(|e| CatalogError::io(root, e))?;
        Self::load(root)
    }

    fn load(root: PathBuf) -> Result<Self, CatalogError> {
        let catalog = root.join(CATALOG_DIR);
        let assets: Vec<AssetRecord> = load_records(&catalog.join(ASSETS_FILE))?;
        let tracks: Vec<TrackRef> = load_records(&catalog.join(TRACKS_FILE))?;
        let next_id = assets.iter().map(|a| a.asset_id).max().map_or(1, |m| m + 1);
        Ok(Self {
            root,
            assets: assets.into_iter().map(|a| (a.asset_id, a)).collect(),
            tracks: tracks
                .into_iter()
                .map(|t| ((t.asset_id, t.feature_name.clone()), t))
                .collect(),
            next_id,
            lock: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn catalog_dir(&self) -> PathBuf {
        self.root.join(CATALOG_DIR)
    }

    pub fn is_writable(&self) -> bool {
        self.lock.is_some()
    }

    fn ensure_writable(&self) -> Result<(), CatalogError> {
        if self.lock.is_some() {
            Ok(())
        } else {
            Err(CatalogError::ReadOnly)
        }
    }

    fn persist_assets(&self) -> Result<(), CatalogError> {
        let path = self.catalog_dir().join(ASSETS_FILE);
        fsutil::write_atomic(&path, render_records(self.assets.values()).as_bytes()).map_err(|e| CatalogError::io(&path, e))
    }

    fn persist_tracks(&self) -> Result<(), CatalogError> {
        let path = self.catalog_dir().join(TRACKS_FILE);
        fsutil::write_atomic(&path, render_records(self.tracks.values()).as_bytes()).map_err(|e| CatalogError::io(&path, e))
    }

    /// Inserts an asset, or returns the existing record when the same path
    /// was already registered with the same digest.
    pub fn insert_asset(&mut self, new: NewAsset) -> Result<AssetRecord, CatalogError> {
        self.ensure_writable()?;
        if let Some(existing) = self.assets.values().find(|a| a.path == new.path) {
            if existing.digest == new.digest {
                return Ok(existing.clone());
            }
            return Err(CatalogError::DuplicateAsset {
                path: new.path,
                existing: existing.digest.clone(),
                found: new.digest,
            });
        }
        let record = AssetRecord {
            asset_id: self.next_id,
            duration_s: new.n_samples as f64 / new.sample_rate_hz as f64,
            path: new.path,
            digest: new.digest,
            metadata: new.metadata,
            sample_rate_hz: new.sample_rate_hz,
            n_samples: new.n_samples,
        };
        self.assets.insert(record.asset_id, record.clone());
        if let Err(e) = self.persist_assets() {
            self.assets.remove(&record.asset_id);
            return Err(e);
        }
        self.next_id += 1;
        Ok(record)
    }

    pub fn asset(&self, asset_id: u64) -> Result<&AssetRecord, CatalogError> {
        self.assets.get(&asset_id).ok_or(CatalogError::UnknownAsset(asset_id))
    }

    pub fn assets(&self) -> impl Iterator<Item = &AssetRecord> {
        self.assets.values()
    }

    /// Assets matching `query`, ordered by `(start_datetime, asset_id)`.
    pub fn query_assets(&self, query: &AssetQuery) -> Result<Vec<AssetRecord>, CatalogError> {
        if let Some((t0, t1)) = query.date_range {
            if t0 >= t1 {
                return Err(CatalogError::InvalidRange(t0, t1));
            }
        }
        let mut out: Vec<AssetRecord> = self.assets.values().filter(|a| query.matches(a)).cloned().collect();
        out.sort_by(|a, b| {
            a.metadata
                .start_datetime
                .cmp(&b.metadata.start_datetime)
                .then(a.asset_id.cmp(&b.asset_id))
        });
        Ok(out)
    }

    pub fn track_path(&self, asset_id: u64, feature_name: &str) -> PathBuf {
        PathBuf::from(FEATURES_DIR)
            .join(asset_id.to_string())
            .join(format!("{feature_name}.ftrk"))
    }

    fn check_track(&self, asset: &AssetRecord, track: &FeatureTrack) -> Result<(), CatalogError> {
        if !valid_feature_name(track.feature_name()) {
            return Err(CatalogError::InvalidTrack(format!(
                "feature name {:?} is not a safe file name",
                track.feature_name()
            )));
        }
        if track.is_empty() {
            return Err(CatalogError::InvalidTrack(format!("{} has no frames", track.feature_name())));
        }
        if track.start_offset_s() < 0.0 {
            return Err(CatalogError::InvalidTrack(format!("{} starts before 0 s", track.feature_name())));
        }
        let end = track.timestamp(track.len() - 1);
        if end > asset.duration_s + track.period_s() + 1e-9 {
            return Err(CatalogError::InvalidTrack(format!(
                "{} ends at {end} s, past asset {} duration {} s",
                track.feature_name(),
                asset.asset_id,
                asset.duration_s
            )));
        }
        Ok(())
    }

    fn publish_track(&self, asset_id: u64, track: &FeatureTrack) -> Result<TrackRef, CatalogError> {
        let rel = self.track_path(asset_id, track.feature_name());
        export::write_track(track, &self.root.join(&rel))?;
        Ok(TrackRef {
            asset_id,
            feature_name: track.feature_name().to_string(),
            file_path: rel,
            period_s: track.period_s(),
            start_offset_s: track.start_offset_s(),
            frame_count: track.len() as u64,
        })
    }

    /// Writes the track file and upserts its ref.
    pub fn attach_track(&mut self, track: &FeatureTrack, asset_id: u64) -> Result<TrackRef, CatalogError> {
        Ok(self.attach_tracks(std::slice::from_ref(track), asset_id)?.remove(0))
    }

    /// Like [`Store::attach_track`] for several tracks, with one catalog
    /// rewrite.
    pub fn attach_tracks(&mut self, tracks: &[FeatureTrack], asset_id: u64) -> Result<Vec<TrackRef>, CatalogError> {
        self.ensure_writable()?;
        let asset = self.asset(asset_id)?.clone();
        for t in tracks {
            self.check_track(&asset, t)?;
        }
        let refs = tracks
            .iter()
            .map(|t| self.publish_track(asset_id, t))
            .collect::<Result<Vec<_>, _>>()?;
        let previous: Vec<_> = refs
            .iter()
            .map(|r| self.tracks.insert((asset_id, r.feature_name.clone()), r.clone()))
            .collect();
        if let Err(e) = self.persist_tracks() {
            for (r, prev) in refs.iter().zip(previous) {
                let key = (asset_id, r.feature_name.clone());
                match prev {
                    Some(p) => self.tracks.insert(key, p),
                    None => self.tracks.remove(&key),
                };
            }
            return Err(e);
        }
        Ok(refs)
    }

    pub fn track_ref(&self, asset_id: u64, feature_name: &str) -> Option<&TrackRef> {
        self.tracks.get(&(asset_id, feature_name.to_string()))
    }

    pub fn track_refs(&self) -> impl Iterator<Item = &TrackRef> {
        self.tracks.values()
    }

    pub fn tracks_for(&self, asset_id: u64) -> Vec<&TrackRef> {
        self.tracks
            .range((asset_id, String::new())..)
            .take_while(|((a, _), _)| *a == asset_id)
            .map(|(_, r)| r)
            .collect()
    }

    /// Loads the referenced track and checks its header against the ref.
    pub fn resolve(&self, r: &TrackRef) -> Result<FeatureTrack, CatalogError> {
        let path = self.root.join(&r.file_path);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CatalogError::MissingFile(path)),
            Err(e) => return Err(CatalogError::io(&path, e)),
        };
        let header = export::decode_track_header(&bytes)?;
        let mismatch = |field| CatalogError::HeaderMismatch {
            path: path.clone(),
            field,
        };
        if header.feature_name != r.feature_name {
            return Err(mismatch("feature_name"));
        }
        if header.period_s.to_bits() != r.period_s.to_bits() {
            return Err(mismatch("period_s"));
        }
        if header.start_offset_s.to_bits() != r.start_offset_s.to_bits() {
            return Err(mismatch("start_offset_s"));
        }
        if header.frame_count != r.frame_count {
            return Err(mismatch("frame_count"));
        }
        Ok(export::decode_track(&bytes)?)
    }

    pub fn segments_path(&self, asset_id: u64) -> PathBuf {
        PathBuf::from(CATALOG_DIR).join(SEGMENTS_DIR).join(format!("{asset_id}.seg"))
    }

    pub fn put_segments(&mut self, asset_id: u64, segments: &[VadSegment]) -> Result<SegmentSet, CatalogError> {
        self.ensure_writable()?;
        let asset = self.asset(asset_id)?;
        vad::validate_segments(segments, asset.duration_s)?;
        let rel = self.segments_path(asset_id);
        let path = self.root.join(&rel);
        fsutil::write_atomic(&path, vad::render_segment_file(segments).as_bytes()).map_err(|e| CatalogError::io(&path, e))?;
        Ok(SegmentSet {
            asset_id,
            segments: segments.to_vec(),
            file_path: rel,
        })
    }

    pub fn segments(&self, asset_id: u64) -> Result<Option<SegmentSet>, CatalogError> {
        self.asset(asset_id)?;
        let rel = self.segments_path(asset_id);
        let path = self.root.join(&rel);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CatalogError::io(&path, e)),
        };
        Ok(Some(SegmentSet {
            asset_id,
            segments: vad::parse_segment_file(&text)?,
            file_path: rel,
        }))
    }

    pub fn stats(&self) -> StoreStats {
        let catalog = self.catalog_dir();
        let mut catalog_bytes = fsutil::file_len(&catalog.join(ASSETS_FILE)) + fsutil::file_len(&catalog.join(TRACKS_FILE));
        for id in self.assets.keys() {
            catalog_bytes += fsutil::file_len(&self.root.join(self.segments_path(*id)));
        }
        let referenced_bytes = self.assets.values().map(|a| fsutil::file_len(&a.path)).sum::<u64>()
            + self
                .tracks
                .values()
                .map(|t| fsutil::file_len(&self.root.join(&t.file_path)))
                .sum::<u64>();
        StoreStats {
            n_assets: self.assets.len() as u64,
            n_tracks: self.tracks.len() as u64,
            catalog_bytes,
            referenced_bytes,
        }
    }
}

/// Archive-scale data point arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEstimate {
    pub n_files: u64,
    pub minutes_total: f64,
    pub raw_bytes: f64,
    pub raw_points: f64,
    pub lld_points: f64,
    pub praat_points: f64,
    pub total_points: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleInputs {
    pub n_files: u64,
    pub minutes_per_file: f64,
    pub mb_per_file: f64,
    pub sample_rate_hz: u64,
    pub n_lld_features: u64,
    pub lld_frames_per_feature: u64,
    pub n_praat_features: u64,
    pub praat_frames_per_feature: u64,
}

impl Default for ScaleInputs {
    /// The archive: 160 000 half-hour files of ~3.5 MB at 22.05 kHz, 26 LLDs
    /// of ~183 000 frames and 3 Praat tracks of ~230 000 frames per file.
    fn default() -> Self {
        Self {
            n_files: 160_000,
            minutes_per_file: 30.0,
            mb_per_file: 3.5,
            sample_rate_hz: 22_050,
            n_lld_features: 26,
            lld_frames_per_feature: 183_000,
            n_praat_features: 3,
            praat_frames_per_feature: 230_000,
        }
    }
}

pub fn estimate_scale(inputs: &ScaleInputs) -> ScaleEstimate {
    let n = inputs.n_files as f64;
    let raw_points = n * inputs.minutes_per_file * 60.0 * inputs.sample_rate_hz as f64;
    let lld_points = n * (inputs.n_lld_features * inputs.lld_frames_per_feature) as f64;
    let praat_points = n * (inputs.n_praat_features * inputs.praat_frames_per_feature) as f64;
    ScaleEstimate {
        n_files: inputs.n_files,
        minutes_total: n * inputs.minutes_per_file,
        raw_bytes: n * inputs.mb_per_file * 1e6,
        raw_points,
        lld_points,
        praat_points,
        total_points: raw_points + lld_points + praat_points,
    }
}
