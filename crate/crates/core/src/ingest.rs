//! Audio decoding, filename metadata, and asset registration.
//!
//! Input audio is fixed to RIFF/WAVE, PCM, 16-bit, mono. Integer samples
//! are normalized by 32768 so that `-32768` maps to exactly `-1.0`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{AssetRecord, CatalogError, NewAsset, Store};
use crate::fsutil;

/// Default sample rate of the archive.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 22_050;

const PCM_SCALE: f32 = 32_768.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("filename {name:?} does not match template {pattern:?}")]
    TemplateMismatch { name: String, pattern: String },
    #[error("captured digits {digits:?} do not form a valid date/time")]
    InvalidDate { digits: String },
    #[error("invalid filename template {pattern:?}: {reason}")]
    InvalidTemplate { pattern: String, reason: String },
    #[error("expected a bare filename, got {0:?}")]
    NotBareFilename(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt WAV file: {0}")]
    CorruptFile(String),
    #[error("invalid audio buffer: {0}")]
    InvalidBuffer(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
}

impl IngestError {
    pub fn kind(&self) -> &'static str {
        match self {
            IngestError::TemplateMismatch { .. } => "TemplateMismatch",
            IngestError::InvalidDate { .. } => "InvalidDate",
            IngestError::InvalidTemplate { .. } => "InvalidTemplate",
            IngestError::NotBareFilename(_) => "NotBareFilename",
            IngestError::UnsupportedFormat(_) => "UnsupportedFormat",
            IngestError::CorruptFile(_) => "CorruptFile",
            IngestError::InvalidBuffer(_) => "InvalidBuffer",
            IngestError::Io { .. } => "IoFailure",
            IngestError::Catalog(e) => e.kind(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Metadata recovered from an archive filename.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetMetadata {
    pub zone: String,
    pub start_datetime: DateTime<Utc>,
    pub source_name: String,
}

/// Mono PCM samples normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, IngestError> {
        if sample_rate_hz == 0 {
            return Err(IngestError::InvalidBuffer("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(IngestError::InvalidBuffer("buffer holds no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !(-1.0..=1.0).contains(s)) {
            return Err(IngestError::InvalidBuffer(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a buffer from arbitrary reals, clamping each into `[-1, 1]`.
    pub fn from_clamped(samples: impl IntoIterator<Item = f64>, sample_rate_hz: u32) -> Result<Self, IngestError> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) as f32 })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Returns a copy with every sample multiplied by `gain` (clamped).
    pub fn scaled(&self, gain: f64) -> AudioBuffer {
        AudioBuffer {
            samples: self
                .samples
                .iter()
                .map(|&s| (s as f64 * gain).clamp(-1.0, 1.0) as f32)
                .collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placeholder {
    Zone,
    Date,
    Time,
}

impl Placeholder {
    fn token(self) -> &'static str {
        match self {
            Placeholder::Zone => "{zone}",
            Placeholder::Date => "{yyyymmdd}",
            Placeholder::Time => "{hhmmss}",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Field(Placeholder),
}

/// Filename pattern with `{zone}`, `{yyyymmdd}` and optional `{hhmmss}`
/// placeholders between literal separators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilenameTemplate {
    pattern: String,
    pieces: Vec<Piece>,
}

impl FilenameTemplate {
    pub const DEFAULT_PATTERN: &'static str = "zone{zone}_{yyyymmdd}_{hhmmss}.wav";

    pub fn parse(pattern: &str) -> Result<Self, IngestError> {
        let invalid = |reason: &str| IngestError::InvalidTemplate {
            pattern: pattern.to_string(),
            reason: reason.to_string(),
        };
        let mut pieces = Vec::new();
        let mut literal = String::new();
        let mut rest = pattern;
        let mut seen = Vec::new();
        while !rest.is_empty() {
            let field = [Placeholder::Zone, Placeholder::Date, Placeholder::Time]
                .into_iter()
                .find(|p| rest.starts_with(p.token()));
            match field {
                Some(p) => {
                    if seen.contains(&p) {
                        return Err(invalid(&format!("{} appears more than once", p.token())));
                    }
                    seen.push(p);
                    if !literal.is_empty() {
                        pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                    }
                    pieces.push(Piece::Field(p));
                    rest = &rest[p.token().len()..];
                }
                None => {
                    let c = rest.chars().next().expect("non-empty");
                    if c == '{' || c == '}' {
                        return Err(invalid("unknown placeholder"));
                    }
                    if c == '/' || c == '\\' {
                        return Err(invalid("pattern must not contain directory separators"));
                    }
                    literal.push(c);
                    rest = &rest[c.len_utf8()..];
                }
            }
        }
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        if !seen.contains(&Placeholder::Zone) {
            return Err(invalid("{zone} is mandatory"));
        }
        if !seen.contains(&Placeholder::Date) {
            return Err(invalid("{yyyymmdd} is mandatory"));
        }
        Ok(Self {
            pattern: pattern.to_string(),
            pieces,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn has_time(&self) -> bool {
        self.pieces.contains(&Piece::Field(Placeholder::Time))
    }

    /// Produces the filename for `zone` and `start`. Time-of-day is dropped
    /// when the template has no `{hhmmss}`.
    pub fn render(&self, zone: &str, start: &DateTime<Utc>) -> String {
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Field(Placeholder::Zone) => out.push_str(zone),
                Piece::Field(Placeholder::Date) => out.push_str(&start.format("%Y%m%d").to_string()),
                Piece::Field(Placeholder::Time) => out.push_str(&start.format("%H%M%S").to_string()),
            }
        }
        out
    }
}

impl Default for FilenameTemplate {
    fn default() -> Self {
        Self::parse(Self::DEFAULT_PATTERN).expect("default template is valid")
    }
}

impl fmt::Display for FilenameTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern)
    }
}

impl Serialize for FilenameTemplate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.pattern)
    }
}

impl<'de> Deserialize<'de> for FilenameTemplate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        FilenameTemplate::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Default, Clone)]
struct Captures<'a> {
    zone: Option<&'a str>,
    date: Option<&'a str>,
    time: Option<&'a str>,
}

fn fixed_digits(s: &str, n: usize) -> Option<&str> {
    let head = s.get(..n)?;
    head.bytes().all(|b| b.is_ascii_digit()).then_some(head)
}

// Left-to-right binding; {zone} takes the shortest non-empty span that lets
// the remainder of the pattern match.
fn bind<'a>(pieces: &[Piece], input: &'a str, caps: Captures<'a>) -> Option<Captures<'a>> {
    let Some((first, rest)) = pieces.split_first() else {
        return input.is_empty().then_some(caps);
    };
    match first {
        Piece::Literal(lit) => input.strip_prefix(lit.as_str()).and_then(|tail| bind(rest, tail, caps)),
        Piece::Field(Placeholder::Date) => {
            let d = fixed_digits(input, 8)?;
            bind(rest, &input[8..], Captures { date: Some(d), ..caps })
        }
        Piece::Field(Placeholder::Time) => {
            let t = fixed_digits(input, 6)?;
            bind(rest, &input[6..], Captures { time: Some(t), ..caps })
        }
        Piece::Field(Placeholder::Zone) => input
            .char_indices()
            .skip(1)
            .map(|(i, _)| i)
            .chain(std::iter::once(input.len()))
            .find_map(|end| {
                bind(
                    rest,
                    &input[end..],
                    Captures {
                        zone: Some(&input[..end]),
                        ..caps.clone()
                    },
                )
            }),
    }
}

/// Binds the template placeholders against `name`.
pub fn parse_filename_metadata(name: &str, template: &FilenameTemplate) -> Result<AssetMetadata, IngestError> {
    if name.contains('/') || name.contains('\\') {
        return Err(IngestError::NotBareFilename(name.to_string()));
    }
    let caps = bind(&template.pieces, name, Captures::default()).ok_or_else(|| IngestError::TemplateMismatch {
        name: name.to_string(),
        pattern: template.pattern.clone(),
    })?;
    let zone = caps.zone.expect("zone is mandatory");
    let date_digits = caps.date.expect("date is mandatory");
    let time_digits = caps.time.unwrap_or("000000");
    let digits = format!("{date_digits}{time_digits}");
    let invalid = || IngestError::InvalidDate { digits: digits.clone() };

    let date = NaiveDate::parse_from_str(date_digits, "%Y%m%d").map_err(|_| invalid())?;
    let num = |s: &str| s.parse::<u32>().expect("digits");
    let time = NaiveTime::from_hms_opt(num(&time_digits[0..2]), num(&time_digits[2..4]), num(&time_digits[4..6]))
        .ok_or_else(invalid)?;
    Ok(AssetMetadata {
        zone: zone.to_string(),
        start_datetime: Utc.from_utc_datetime(&NaiveDateTime::new(date, time)),
        source_name: name.to_string(),
    })
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Header facts of a 16-bit mono PCM WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate_hz: u32,
    pub n_samples: u64,
    data_offset: usize,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses the RIFF chunk structure without decoding samples.
pub fn parse_wav_header(bytes: &[u8]) -> Result<WavInfo, IngestError> {
    let corrupt = |m: &str| IngestError::CorruptFile(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(IngestError::UnsupportedFormat("not a RIFF/WAVE file".into()));
    }
    let riff_len = le_u32(bytes, 4) as usize;
    if riff_len + 8 > bytes.len() {
        return Err(corrupt("RIFF length exceeds file size"));
    }
    let end = riff_len + 8;
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= end {
        let id = &bytes[pos..pos + 4];
        let len = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + len > end {
            return Err(corrupt(&format!(
                "chunk {:?} length {len} runs past end of RIFF body",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(corrupt("fmt chunk shorter than 16 bytes"));
                }
                fmt = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => data = Some((body, len)),
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| corrupt("missing fmt chunk"))?;
    if format != 1 {
        return Err(IngestError::UnsupportedFormat(format!("format tag {format} is not PCM")));
    }
    if channels != 1 {
        return Err(IngestError::UnsupportedFormat(format!("{channels} channels, expected mono")));
    }
    if bits != 16 {
        return Err(IngestError::UnsupportedFormat(format!("{bits}-bit samples, expected 16-bit")));
    }
    if rate == 0 {
        return Err(corrupt("sample rate is zero"));
    }
    let (offset, len) = data.ok_or_else(|| corrupt("missing data chunk"))?;
    if len % 2 != 0 {
        return Err(corrupt("data chunk length is not a whole number of 16-bit samples"));
    }
    if len == 0 {
        return Err(corrupt("data chunk holds no samples"));
    }
    Ok(WavInfo {
        sample_rate_hz: rate,
        n_samples: (len / 2) as u64,
        data_offset: offset,
    })
}

/// Decodes a 16-bit mono PCM WAV held in memory.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, IngestError> {
    let info = parse_wav_header(bytes)?;
    let data = &bytes[info.data_offset..info.data_offset + info.n_samples as usize * 2];
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / PCM_SCALE)
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate_hz: info.sample_rate_hz,
    })
}

pub fn read_wav(path: &Path) -> Result<AudioBuffer, IngestError> {
    let bytes = fs::read(path).map_err(|e| IngestError::io(path, e))?;
    decode_wav(&bytes)
}

/// Quantizes to 16-bit PCM: `round(x * 32768)` saturated to the i16 range.
pub fn encode_wav(buffer: &AudioBuffer) -> Vec<u8> {
    let data_len = buffer.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buffer.samples {
        let q = (s as f64 * PCM_SCALE as f64).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, buffer: &AudioBuffer) -> Result<u64, IngestError> {
    let bytes = encode_wav(buffer);
    fsutil::write_atomic(path, &bytes).map_err(|e| IngestError::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Reads header, filename metadata and digest of `path` and records it in
/// `store`. Registering the same unchanged file again returns the existing
/// record.
pub fn register_asset(store: &mut Store, path: &Path, template: &FilenameTemplate) -> Result<AssetRecord, IngestError> {
    let path = fs::canonicalize(path).map_err(|e| IngestError::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| IngestError::NotBareFilename(path.display().to_string()))?;
    let metadata = parse_filename_metadata(&name, template)?;
    let bytes = fs::read(&path).map_err(|e| IngestError::io(&path, e))?;
    let info = parse_wav_header(&bytes)?;
    let digest = fingerprint(&bytes);
    Ok(store.insert_asset(NewAsset {
        path,
        digest,
        metadata,
        sample_rate_hz: info.sample_rate_hz,
        n_samples: info.n_samples,
    })?)
}
