//! Binary track (`FTRK`) and tensor (`BPCT`) file formats.
//!
//! All integers and floats are little-endian. Layouts are byte-exact; see
//! `docs/formats.md`.
//!
//! ```text
//! FTRK: "FTRK" | u32 version=1 | u32 name_len | name | f64 start_offset_s
//!       | f64 period_s | u64 frame_count | f32 x frame_count
//!       | validity bitmap, ceil(frame_count / 8) bytes, LSB first
//!
//! BPCT: "BPCT" | u32 version=1 | u64 n_windows | u32 window_frames
//!       | u32 n_features | u32 name_count | (u32 len | name) x name_count
//!       | f32 x (n_windows * window_frames * n_features)
//!         window-major, then frame, then feature
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::align::FeatureMatrix;
use crate::features::FeatureTrack;
use crate::fsutil;

pub const TRACK_MAGIC: &[u8; 4] = b"FTRK";
pub const TENSOR_MAGIC: &[u8; 4] = b"BPCT";
pub const FORMAT_VERSION: u32 = 1;

/// Fixed part of an FTRK header: magic, version, name_len, start, period,
/// frame_count.
pub const TRACK_FIXED_HEADER_BYTES: u64 = 4 + 4 + 4 + 8 + 8 + 8;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: String, expected: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file is {actual} bytes but its header implies {expected}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("window of {window} frames does not fit {rows} rows")]
    WindowTooLarge { window: usize, rows: usize },
    #[error("invalid export request: {0}")]
    InvalidRequest(String),
    #[error("malformed file: {0}")]
    Malformed(String),
}

impl ExportError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExportError::Io { .. } => "IoFailure",
            ExportError::BadMagic { .. } => "BadMagic",
            ExportError::UnsupportedVersion(_) => "UnsupportedVersion",
            ExportError::TruncatedFile { .. } => "TruncatedFile",
            ExportError::DuplicateFeature(_) => "DuplicateFeature",
            ExportError::WindowTooLarge { .. } => "WindowTooLarge",
            ExportError::InvalidRequest(_) => "InvalidRequest",
            ExportError::Malformed(_) => "Malformed",
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        ExportError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Exact size of an FTRK file.
pub fn track_file_size(name_len: usize, frame_count: usize) -> u64 {
    TRACK_FIXED_HEADER_BYTES + name_len as u64 + 4 * frame_count as u64 + frame_count.div_ceil(8) as u64
}

/// Header fields of an FTRK file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFileHeader {
    pub feature_name: String,
    pub start_offset_s: f64,
    pub period_s: f64,
    pub frame_count: u64,
}

pub fn encode_track(track: &FeatureTrack) -> Vec<u8> {
    let name = track.feature_name().as_bytes();
    let n = track.len();
    let mut out = Vec::with_capacity(track_file_size(name.len(), n) as usize);
    out.extend_from_slice(TRACK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name);
    out.extend_from_slice(&track.start_offset_s().to_le_bytes());
    out.extend_from_slice(&track.period_s().to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for v in track.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bitmap = vec![0u8; n.div_ceil(8)];
    for (i, _) in track.valid().iter().enumerate().filter(|(_, &v)| v) {
        bitmap[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&bitmap);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8], ExportError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(ExportError::TruncatedFile {
            expected: expected_total.max((self.pos + n) as u64),
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ExportError> {
        Ok(u32::from_le_bytes(self.take(4, 0)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ExportError> {
        Ok(u64::from_le_bytes(self.take(8, 0)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ExportError> {
        Ok(f64::from_le_bytes(self.take(8, 0)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, ExportError> {
        let len = self.u32()? as usize;
        let raw = self.take(len, 0)?;
        String::from_utf8(raw.to_vec()).map_err(|_| ExportError::Malformed("name is not UTF-8".into()))
    }
}

fn check_magic(bytes: &[u8], expected: &[u8; 4]) -> Result<(), ExportError> {
    let found = bytes.get(..4).unwrap_or(bytes);
    if found != expected {
        return Err(ExportError::BadMagic {
            found: String::from_utf8_lossy(found).into_owned(),
            expected: String::from_utf8_lossy(expected).into_owned(),
        });
    }
    Ok(())
}

pub fn decode_track_header(bytes: &[u8]) -> Result<TrackFileHeader, ExportError> {
    check_magic(bytes, TRACK_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(4, 0)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ExportError::UnsupportedVersion(version));
    }
    let feature_name = r.string()?;
    let start_offset_s = r.f64()?;
    let period_s = r.f64()?;
    let frame_count = r.u64()?;
    Ok(TrackFileHeader {
        feature_name,
        start_offset_s,
        period_s,
        frame_count,
    })
}

pub fn decode_track(bytes: &[u8]) -> Result<FeatureTrack, ExportError> {
    let header = decode_track_header(bytes)?;
    let n = usize::try_from(header.frame_count).map_err(|_| ExportError::Malformed("frame count overflow".into()))?;
    let expected = track_file_size(header.feature_name.len(), n);
    if bytes.len() as u64 != expected {
        return Err(ExportError::TruncatedFile {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let body = &bytes[(TRACK_FIXED_HEADER_BYTES as usize + header.feature_name.len())..];
    let (payload, bitmap) = body.split_at(4 * n);
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let valid = (0..n).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
    FeatureTrack::new(header.feature_name, header.start_offset_s, header.period_s, values, valid)
        .map_err(|e| ExportError::Malformed(e.to_string()))
}

/// Publishes `track` at `path` (temp file + rename).
pub fn write_track(track: &FeatureTrack, path: &Path) -> Result<u64, ExportError> {
    let bytes = encode_track(track);
    fsutil::write_atomic(path, &bytes).map_err(|e| ExportError::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_track(path: &Path) -> Result<FeatureTrack, ExportError> {
    let bytes = fs::read(path).map_err(|e| ExportError::io(path, e))?;
    decode_track(&bytes)
}

pub fn read_track_header(path: &Path) -> Result<TrackFileHeader, ExportError> {
    let bytes = fs::read(path).map_err(|e| ExportError::io(path, e))?;
    decode_track_header(&bytes)
}

/// Windowed tensor contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub feature_names: Vec<String>,
    pub window_frames: usize,
    pub n_windows: usize,
    /// `n_windows * window_frames * n_features`, window-major.
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn window(&self, w: usize) -> &[f32] {
        let len = self.window_frames * self.n_features();
        &self.values[w * len..(w + 1) * len]
    }
}

pub fn window_count(rows: usize, window_frames: usize, hop_frames: usize) -> Result<usize, ExportError> {
    if hop_frames == 0 || window_frames == 0 {
        return Err(ExportError::InvalidRequest("window and hop must be at least one frame".into()));
    }
    if window_frames > rows {
        return Err(ExportError::WindowTooLarge {
            window: window_frames,
            rows,
        });
    }
    Ok((rows - window_frames) / hop_frames + 1)
}

pub fn tensor_file_size(names: &[String], n_windows: usize, window_frames: usize) -> u64 {
    let header = 4 + 4 + 8 + 4 + 4 + 4 + names.iter().map(|n| 4 + n.len() as u64).sum::<u64>();
    header + 4 * (n_windows * window_frames * names.len()) as u64
}

/// Slices `matrix` rows into overlapping windows; invalid cells become 0.0.
pub fn tensor_from_matrix(matrix: &FeatureMatrix, window_frames: usize, hop_frames: usize) -> Result<Tensor, ExportError> {
    let n_windows = window_count(matrix.n_rows(), window_frames, hop_frames)?;
    let n_features = matrix.n_columns();
    let mut values = Vec::with_capacity(n_windows * window_frames * n_features);
    for w in 0..n_windows {
        for row in w * hop_frames..w * hop_frames + window_frames {
            values.extend((0..n_features).map(|c| matrix.get(row, c).unwrap_or(0.0) as f32));
        }
    }
    Ok(Tensor {
        feature_names: matrix.columns().to_vec(),
        window_frames,
        n_windows,
        values,
    })
}

pub fn encode_tensor(tensor: &Tensor) -> Result<Vec<u8>, ExportError> {
    let mut seen = HashSet::new();
    if let Some(dup) = tensor.feature_names.iter().find(|n| !seen.insert(n.as_str())) {
        return Err(ExportError::DuplicateFeature(dup.clone()));
    }
    let expected = tensor.n_windows * tensor.window_frames * tensor.n_features();
    if tensor.values.len() != expected {
        return Err(ExportError::InvalidRequest(format!(
            "{} values for a {}x{}x{} tensor",
            tensor.values.len(),
            tensor.n_windows,
            tensor.window_frames,
            tensor.n_features()
        )));
    }
    let mut out = Vec::with_capacity(tensor_file_size(&tensor.feature_names, tensor.n_windows, tensor.window_frames) as usize);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.n_windows as u64).to_le_bytes());
    out.extend_from_slice(&(tensor.window_frames as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.n_features() as u32).to_le_bytes());
    out.extend_from_slice(&(tensor.feature_names.len() as u32).to_le_bytes());
    for name in &tensor.feature_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for v in &tensor.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, ExportError> {
    check_magic(bytes, TENSOR_MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(4, 0)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ExportError::UnsupportedVersion(version));
    }
    let n_windows = r.u64()? as usize;
    let window_frames = r.u32()? as usize;
    let n_features = r.u32()? as usize;
    let name_count = r.u32()? as usize;
    if name_count != n_features {
        return Err(ExportError::Malformed(format!("{name_count} names for {n_features} features")));
    }
    let mut feature_names = Vec::with_capacity(name_count.min(4096));
    let mut seen = HashSet::new();
    for _ in 0..name_count {
        let name = r.string()?;
        if !seen.insert(name.clone()) {
            return Err(ExportError::DuplicateFeature(name));
        }
        feature_names.push(name);
    }
    let expected = tensor_file_size(&feature_names, n_windows, window_frames);
    if bytes.len() as u64 != expected {
        return Err(ExportError::TruncatedFile {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let values = bytes[r.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor {
        feature_names,
        window_frames,
        n_windows,
        values,
    })
}

/// Writes the windowed tensor for `matrix` and returns the window count.
pub fn export_tensor(matrix: &FeatureMatrix, window_frames: usize, hop_frames: usize, path: &Path) -> Result<usize, ExportError> {
    let tensor = tensor_from_matrix(matrix, window_frames, hop_frames)?;
    let bytes = encode_tensor(&tensor)?;
    fsutil::write_atomic(path, &bytes).map_err(|e| ExportError::io(path, e))?;
    Ok(tensor.n_windows)
}

pub fn read_tensor(path: &Path) -> Result<Tensor, ExportError> {
    let bytes = fs::read(path).map_err(|e| ExportError::io(path, e))?;
    decode_tensor(&bytes)
}
