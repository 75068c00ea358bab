//! Datastore and processing pipeline for large broadcast-audio archives.
//!
//! Recordings are ingested as 16-bit PCM WAV files whose names carry their
//! dispatch zone and start time. Each asset is run through energy VAD and a
//! set of frame-level feature extractors, every one at its own native frame
//! rate. The resulting tracks are written as small binary files and the
//! catalog only keeps *paths* to them, so the catalog stays tiny compared
//! with the bulk data it indexes.
//!
//! Downstream, tracks are resampled onto a shared [`align::TimeGrid`],
//! optionally filtered by VAD segments, and handed to the [`analysis`]
//! toolkit (standardization, PCA, k-means) or exported as windowed tensors.
//!
//! ```text
//! ingest ─► catalog ◄─ vad
//!              │  ▲
//!              │  └─ features ─► export (FTRK files)
//!              ▼
//!            align ─► analysis
//!              └────► export (BPCT tensors)
//! ```

pub mod align;
pub mod analysis;
pub mod api;
pub mod catalog;
pub mod export;
pub mod features;
pub mod ingest;
pub mod pipeline;
pub mod report;
pub mod vad;

mod fsutil;

pub use align::{FeatureMatrix, ResampleMethod, SilenceMode, TimeGrid};
pub use analysis::{Clustering, PcaModel, StandardizationStats};
pub use catalog::{AssetQuery, AssetRecord, ScaleEstimate, SegmentSet, Store, StoreStats, TrackRef};
pub use features::{FeatureConfig, FeatureTrack};
pub use ingest::{AssetMetadata, AudioBuffer, FilenameTemplate};
pub use vad::{VadConfig, VadSegment};
