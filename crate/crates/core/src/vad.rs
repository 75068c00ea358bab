//! Energy-based voice activity detection.
//!
//! The threshold adapts per file: a low percentile of frame energies is
//! taken as the noise floor and a fixed margin is added on top, so files
//! recorded at different gains need no calibration.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{rms_to_db, FeatureError, FeatureTrack, Framing};
use crate::ingest::AudioBuffer;

pub const ENERGY: &str = "energy_db";

/// First line of a segment file.
pub const SEGMENT_FILE_HEADER: &str = "# vad v1";

#[derive(Debug, Error)]
pub enum VadError {
    #[error("buffer of {got_s:.6} s is shorter than one {needed_s:.6} s frame")]
    TooShort { needed_s: f64, got_s: f64 },
    #[error("invalid VAD config: {0}")]
    InvalidConfig(String),
    #[error("invalid segment: {0}")]
    InvalidSegment(String),
    #[error("malformed segment file line {line}: {reason}")]
    MalformedSegmentFile { line: usize, reason: String },
}

impl VadError {
    pub fn kind(&self) -> &'static str {
        match self {
            VadError::TooShort { .. } => "TooShort",
            VadError::InvalidConfig(_) => "InvalidConfig",
            VadError::InvalidSegment(_) => "InvalidSegment",
            VadError::MalformedSegmentFile { .. } => "MalformedSegmentFile",
        }
    }
}

/// Non-silent slice `[start_s, end_s)` of an asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadSegment {
    pub start_s: f64,
    pub end_s: f64,
}

impl VadSegment {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, VadError> {
        if !(start_s.is_finite() && end_s.is_finite() && 0.0 <= start_s && start_s < end_s) {
            return Err(VadError::InvalidSegment(format!("[{start_s}, {end_s})")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn length_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }
}

/// Checks sortedness, disjointness and bounds of a segment list.
pub fn validate_segments(segments: &[VadSegment], duration_s: f64) -> Result<(), VadError> {
    for (i, s) in segments.iter().enumerate() {
        VadSegment::new(s.start_s, s.end_s)?;
        if s.end_s > duration_s + 1e-9 {
            return Err(VadError::InvalidSegment(format!("segment {i} ends after {duration_s} s")));
        }
        if i > 0 && segments[i - 1].end_s > s.start_s {
            return Err(VadError::InvalidSegment(format!("segment {i} overlaps or precedes its predecessor")));
        }
    }
    Ok(())
}

fn default_frame_ms() -> f64 {
    25.0
}
fn default_hop_ms() -> f64 {
    10.0
}
fn default_margin_db() -> f64 {
    12.0
}
fn default_floor_percentile() -> f64 {
    10.0
}
fn default_min_segment_ms() -> f64 {
    200.0
}
fn default_min_gap_ms() -> f64 {
    150.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VadConfig {
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
    #[serde(default = "default_hop_ms")]
    pub hop_ms: f64,
    /// Threshold above the noise floor, dB.
    #[serde(default = "default_margin_db")]
    pub margin_db: f64,
    /// Percentile of frame energies taken as the noise floor.
    #[serde(default = "default_floor_percentile")]
    pub floor_percentile: f64,
    #[serde(default = "default_min_segment_ms")]
    pub min_segment_ms: f64,
    #[serde(default = "default_min_gap_ms")]
    pub min_gap_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: default_frame_ms(),
            hop_ms: default_hop_ms(),
            margin_db: default_margin_db(),
            floor_percentile: default_floor_percentile(),
            min_segment_ms: default_min_segment_ms(),
            min_gap_ms: default_min_gap_ms(),
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        let bad = |m: String| Err(VadError::InvalidConfig(m));
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.frame_ms) {
            return bad(format!("need 0 < hop_ms ({}) <= frame_ms ({})", self.hop_ms, self.frame_ms));
        }
        if !(self.floor_percentile > 0.0 && self.floor_percentile < 50.0) {
            return bad(format!("floor_percentile {} outside (0, 50)", self.floor_percentile));
        }
        if !(self.margin_db > 0.0) {
            return bad(format!("margin_db {} must be positive", self.margin_db));
        }
        if !(self.min_segment_ms >= 0.0 && self.min_gap_ms >= 0.0) {
            return bad("min_segment_ms and min_gap_ms must be non-negative".into());
        }
        Ok(())
    }
}

/// Unweighted frame RMS in dB with a -120 dB floor. Frames are left
/// aligned: frame `t` is centred at `frame_ms / 2000 + t * hop_ms / 1000`.
pub fn frame_energy(buffer: &AudioBuffer, frame_ms: f64, hop_ms: f64) -> Result<FeatureTrack, VadError> {
    if !(hop_ms > 0.0 && frame_ms >= hop_ms) {
        return Err(VadError::InvalidConfig(format!("need 0 < hop_ms ({hop_ms}) <= frame_ms ({frame_ms})")));
    }
    let framing = Framing::left_aligned(buffer, frame_ms / 1000.0, hop_ms / 1000.0).map_err(|e| match e {
        FeatureError::TooShort { needed_s, got_s } => VadError::TooShort { needed_s, got_s },
        other => VadError::InvalidConfig(other.to_string()),
    })?;
    let mut frame = vec![0.0; framing.window_len];
    let values = (0..framing.n_frames).map(|t| {
        framing.fill(buffer.samples(), t, &mut frame);
        let ms = frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64;
        Some(rms_to_db(ms.sqrt()))
    });
    let values: Vec<_> = values.collect();
    FeatureTrack::from_options(ENERGY, frame_ms / 2000.0, hop_ms / 1000.0, values)
        .map_err(|e| VadError::InvalidConfig(e.to_string()))
}

/// Linear-interpolation percentile (`p` in percent) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

/// Thresholds an energy track into segments.
///
/// Runs of active frames span from the first frame's centre minus half a
/// frame to the last frame's centre plus half a frame, clamped to
/// `[0, duration_s]`. Gaps shorter than `min_gap_ms` are merged first,
/// then segments shorter than `min_segment_ms` are dropped.
pub fn detect_segments(energy: &FeatureTrack, cfg: &VadConfig, duration_s: f64) -> Result<Vec<VadSegment>, VadError> {
    cfg.validate()?;
    let frames: Vec<(usize, f64)> = (0..energy.len()).filter_map(|i| energy.get(i).map(|e| (i, e))).collect();
    let levels: Vec<f64> = frames.iter().map(|f| f.1).collect();
    let Some(floor) = percentile(&levels, cfg.floor_percentile) else {
        return Ok(Vec::new());
    };
    let threshold = floor + cfg.margin_db;
    let half = cfg.frame_ms / 2000.0;

    let mut runs: Vec<(f64, f64)> = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for &(i, e) in &frames {
        let active = e >= threshold;
        open = match (open, active) {
            (Some((first, last)), true) if last + 1 == i => Some((first, i)),
            (Some(run), true) => {
                runs.push(span(energy, run, half, duration_s));
                Some((i, i))
            }
            (None, true) => Some((i, i)),
            (Some(run), false) => {
                runs.push(span(energy, run, half, duration_s));
                None
            }
            (None, false) => None,
        };
    }
    if let Some(run) = open {
        runs.push(span(energy, run, half, duration_s));
    }

    let min_gap = cfg.min_gap_ms / 1000.0;
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(runs.len());
    for (s, e) in runs {
        match merged.last_mut() {
            Some(last) if s - last.1 < min_gap => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let min_len = cfg.min_segment_ms / 1000.0;
    Ok(merged
        .into_iter()
        .filter(|(s, e)| e - s >= min_len && e > s)
        .map(|(start_s, end_s)| VadSegment { start_s, end_s })
        .collect())
}

fn span(track: &FeatureTrack, (first, last): (usize, usize), half: f64, duration_s: f64) -> (f64, f64) {
    let s = (track.timestamp(first) - half).clamp(0.0, duration_s);
    let e = (track.timestamp(last) + half).clamp(0.0, duration_s);
    (s, e)
}

/// Convenience: energy framing plus detection with one config.
pub fn detect(buffer: &AudioBuffer, cfg: &VadConfig) -> Result<Vec<VadSegment>, VadError> {
    cfg.validate()?;
    let energy = frame_energy(buffer, cfg.frame_ms, cfg.hop_ms)?;
    detect_segments(&energy, cfg, buffer.duration_s())
}

/// Fraction of `duration_s` covered by `segments`.
pub fn segment_coverage(segments: &[VadSegment], duration_s: f64) -> f64 {
    if duration_s <= 0.0 {
        return 0.0;
    }
    (segments.iter().map(VadSegment::length_s).sum::<f64>() / duration_s).clamp(0.0, 1.0)
}

/// Renders the `# vad v1` segment file: one `start<TAB>end` line per
/// segment, six decimals.
pub fn render_segment_file(segments: &[VadSegment]) -> String {
    let mut out = String::from(SEGMENT_FILE_HEADER);
    out.push('\n');
    for s in segments {
        let _ = writeln!(out, "{:.6}\t{:.6}", s.start_s, s.end_s);
    }
    out
}

pub fn parse_segment_file(text: &str) -> Result<Vec<VadSegment>, VadError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, SEGMENT_FILE_HEADER)) => {}
        _ => {
            return Err(VadError::MalformedSegmentFile {
                line: 1,
                reason: format!("expected header {SEGMENT_FILE_HEADER:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| VadError::MalformedSegmentFile { line: i + 1, reason };
            let (a, b) = l.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let s: f64 = a.parse().map_err(|_| bad(format!("bad start {a:?}")))?;
            let e: f64 = b.parse().map_err(|_| bad(format!("bad end {b:?}")))?;
            VadSegment::new(s, e).map_err(|e| bad(e.to_string()))
        })
        .collect()
}
