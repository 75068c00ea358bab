//! Frame-level acoustic features.
//!
//! Three Praat-style tracks (intensity, pitch, harmonicity) plus seven
//! spectral low-level descriptors. Each family keeps its own hop, so one
//! buffer yields tracks at 8 ms, 10 ms and 12.5 ms periods by default;
//! putting them on a common grid is the job of [`crate::align`].
//!
//! Framing: a buffer of duration `D` analysed with window `w` and hop `h`
//! has `floor((D - w) / h) + 1` frames. The frame train is centred in the
//! buffer, so the first frame centre sits at `(D - (n - 1) h) / 2`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::AudioBuffer;

/// RMS floor; `20 log10(1e-6) = -120 dB`.
pub const RMS_FLOOR: f64 = 1e-6;
pub const FLOOR_DB: f64 = -120.0;

/// Fixed analysis window of the intensity track.
pub const INTENSITY_WINDOW_S: f64 = 0.032;

/// Per-octave penalty on long-lag pitch candidates, so that a period and
/// its multiples (which correlate equally well) resolve to the shortest.
pub const OCTAVE_COST: f64 = 0.01;

pub const HNR_MIN_DB: f64 = -20.0;
pub const HNR_MAX_DB: f64 = 60.0;

pub const INTENSITY: &str = "intensity_db";
pub const PITCH: &str = "pitch_hz";
pub const HNR: &str = "hnr_db";
pub const SPECTRAL_CENTROID: &str = "spectral_centroid_hz";
pub const ZCR: &str = "zcr_per_s";
pub const SPECTRAL_FLUX: &str = "spectral_flux";
pub const ROLLOFF85: &str = "rolloff85_hz";
pub const ALPHA_RATIO: &str = "alpha_ratio_db";
pub const SLOPE_0_500: &str = "slope0_500";
pub const SLOPE_500_1500: &str = "slope500_1500";

/// Names produced by [`extract_all`], in output order.
pub const ALL_FEATURES: [&str; 10] = [
    INTENSITY,
    PITCH,
    HNR,
    SPECTRAL_CENTROID,
    ZCR,
    SPECTRAL_FLUX,
    ROLLOFF85,
    ALPHA_RATIO,
    SLOPE_0_500,
    SLOPE_500_1500,
];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("buffer of {got_s:.6} s is shorter than the {needed_s:.6} s analysis window")]
    TooShort { needed_s: f64, got_s: f64 },
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("invalid feature track: {0}")]
    InvalidTrack(String),
}

impl FeatureError {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureError::TooShort { .. } => "TooShort",
            FeatureError::InvalidConfig(_) => "InvalidConfig",
            FeatureError::InvalidTrack(_) => "InvalidTrack",
        }
    }
}

/// Uniformly sampled feature values. Frame `i` sits at
/// `start_offset_s + i * period_s`; invalid frames hold `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    feature_name: String,
    start_offset_s: f64,
    period_s: f64,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl FeatureTrack {
    pub fn new(
        feature_name: impl Into<String>,
        start_offset_s: f64,
        period_s: f64,
        values: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, FeatureError> {
        let feature_name = feature_name.into();
        let bad = |m: String| Err(FeatureError::InvalidTrack(format!("{feature_name}: {m}")));
        if feature_name.is_empty() {
            return Err(FeatureError::InvalidTrack("empty feature name".into()));
        }
        if !(period_s.is_finite() && period_s > 0.0) {
            return bad(format!("period {period_s} must be positive"));
        }
        if !start_offset_s.is_finite() {
            return bad(format!("start offset {start_offset_s} must be finite"));
        }
        if values.len() != valid.len() {
            return bad(format!("{} values but {} validity flags", values.len(), valid.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return bad(format!("frame {i} is not finite"));
        }
        if let Some(i) = (0..values.len()).find(|&i| !valid[i] && values[i] != 0.0) {
            return bad(format!("invalid frame {i} carries non-zero value"));
        }
        Ok(Self {
            feature_name,
            start_offset_s,
            period_s,
            values,
            valid,
        })
    }

    /// Builds a track from `Option`s, `None` becoming an invalid 0.0 frame.
    pub fn from_options(
        feature_name: impl Into<String>,
        start_offset_s: f64,
        period_s: f64,
        frames: impl IntoIterator<Item = Option<f64>>,
    ) -> Result<Self, FeatureError> {
        let (values, valid) = frames
            .into_iter()
            .map(|f| match f {
                Some(v) => (v as f32, true),
                None => (0.0, false),
            })
            .unzip();
        Self::new(feature_name, start_offset_s, period_s, values, valid)
    }

    pub fn feature_name(&self) -> &str {
        &self.feature_name
    }

    pub fn start_offset_s(&self) -> f64 {
        self.start_offset_s
    }

    pub fn period_s(&self) -> f64 {
        self.period_s
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        self.start_offset_s + frame as f64 * self.period_s
    }

    /// `Some(value)` for valid frames.
    pub fn get(&self, frame: usize) -> Option<f64> {
        self.valid[frame].then(|| self.values[frame] as f64)
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    pub fn into_parts(self) -> (String, f64, f64, Vec<f32>, Vec<bool>) {
        (self.feature_name, self.start_offset_s, self.period_s, self.values, self.valid)
    }
}

fn default_pitch_floor() -> f64 {
    75.0
}
fn default_pitch_ceiling() -> f64 {
    600.0
}
fn default_voicing() -> f64 {
    0.45
}
fn default_pitch_hop() -> f64 {
    0.0125
}
fn default_intensity_hop() -> f64 {
    0.008
}
fn default_spectral_hop() -> f64 {
    0.010
}
fn default_spectral_window() -> f64 {
    0.025
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default = "default_pitch_floor")]
    pub pitch_floor_hz: f64,
    #[serde(default = "default_pitch_ceiling")]
    pub pitch_ceiling_hz: f64,
    #[serde(default = "default_voicing")]
    pub voicing_threshold: f64,
    #[serde(default = "default_pitch_hop")]
    pub pitch_hop_s: f64,
    #[serde(default = "default_intensity_hop")]
    pub intensity_hop_s: f64,
    #[serde(default = "default_spectral_hop")]
    pub spectral_hop_s: f64,
    #[serde(default = "default_spectral_window")]
    pub spectral_window_s: f64,
    /// `None` selects the next power of two at or above the window length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fft_size: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pitch_floor_hz: default_pitch_floor(),
            pitch_ceiling_hz: default_pitch_ceiling(),
            voicing_threshold: default_voicing(),
            pitch_hop_s: default_pitch_hop(),
            intensity_hop_s: default_intensity_hop(),
            spectral_hop_s: default_spectral_hop(),
            spectral_window_s: default_spectral_window(),
            fft_size: None,
        }
    }
}

impl FeatureConfig {
    /// Checks everything that does not depend on the sample rate.
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if !(self.pitch_floor_hz > 0.0 && self.pitch_floor_hz < self.pitch_ceiling_hz) {
            return bad(format!(
                "need 0 < pitch_floor_hz ({}) < pitch_ceiling_hz ({})",
                self.pitch_floor_hz, self.pitch_ceiling_hz
            ));
        }
        for (name, v) in [
            ("pitch_hop_s", self.pitch_hop_s),
            ("intensity_hop_s", self.intensity_hop_s),
            ("spectral_hop_s", self.spectral_hop_s),
            ("spectral_window_s", self.spectral_window_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.voicing_threshold > 0.0 && self.voicing_threshold < 1.0) {
            return bad(format!("voicing_threshold {} outside (0, 1)", self.voicing_threshold));
        }
        if let Some(n) = self.fft_size {
            if !n.is_power_of_two() {
                return bad(format!("fft_size {n} is not a power of two"));
            }
        }
        Ok(())
    }

    pub fn validate_for_rate(&self, sample_rate_hz: u32) -> Result<(), FeatureError> {
        self.validate()?;
        let nyquist = sample_rate_hz as f64 / 2.0;
        if self.pitch_ceiling_hz >= nyquist {
            return Err(FeatureError::InvalidConfig(format!(
                "pitch_ceiling_hz {} must be below Nyquist {nyquist}",
                self.pitch_ceiling_hz
            )));
        }
        let window = window_samples(self.spectral_window_s, sample_rate_hz);
        if let Some(n) = self.fft_size {
            if n < window {
                return Err(FeatureError::InvalidConfig(format!(
                    "fft_size {n} smaller than the {window}-sample spectral window"
                )));
            }
        }
        Ok(())
    }

    pub fn pitch_window_s(&self) -> f64 {
        3.0 / self.pitch_floor_hz
    }

    pub fn fft_size_for(&self, sample_rate_hz: u32) -> usize {
        self.fft_size
            .unwrap_or_else(|| window_samples(self.spectral_window_s, sample_rate_hz).next_power_of_two())
    }
}

pub(crate) fn window_samples(window_s: f64, sample_rate_hz: u32) -> usize {
    ((window_s * sample_rate_hz as f64).round() as usize).max(1)
}

/// Frame placement shared by every extractor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Framing {
    pub window_s: f64,
    pub hop_s: f64,
    pub window_len: usize,
    pub n_frames: usize,
    pub first_center_s: f64,
    sample_rate: f64,
}

impl Framing {
    /// Centred frame train: `floor((D - w) / h) + 1` frames.
    pub fn centered(buffer: &AudioBuffer, window_s: f64, hop_s: f64) -> Result<Self, FeatureError> {
        let n = Self::count(buffer.duration_s(), window_s, hop_s).ok_or(FeatureError::TooShort {
            needed_s: window_s,
            got_s: buffer.duration_s(),
        })?;
        let first_center_s = (buffer.duration_s() - (n - 1) as f64 * hop_s) / 2.0;
        Ok(Self::with_first_center(buffer, window_s, hop_s, n, first_center_s))
    }

    /// Left-aligned frame train starting at `t = 0`.
    pub fn left_aligned(buffer: &AudioBuffer, window_s: f64, hop_s: f64) -> Result<Self, FeatureError> {
        let n = Self::count(buffer.duration_s(), window_s, hop_s).ok_or(FeatureError::TooShort {
            needed_s: window_s,
            got_s: buffer.duration_s(),
        })?;
        Ok(Self::with_first_center(buffer, window_s, hop_s, n, window_s / 2.0))
    }

    fn with_first_center(buffer: &AudioBuffer, window_s: f64, hop_s: f64, n: usize, first_center_s: f64) -> Self {
        let sr = buffer.sample_rate_hz();
        Self {
            window_s,
            hop_s,
            window_len: window_samples(window_s, sr),
            n_frames: n,
            first_center_s,
            sample_rate: sr as f64,
        }
    }

    pub fn count(duration_s: f64, window_s: f64, hop_s: f64) -> Option<usize> {
        // slack absorbs representation error in e.g. (1800 - 0.032) / 0.008
        let span = duration_s - window_s;
        if span < -1e-9 {
            return None;
        }
        Some((span.max(0.0) / hop_s + 1e-9).floor() as usize + 1)
    }

    pub fn frame_start(&self, frame: usize) -> isize {
        let start_s = self.first_center_s - self.window_s / 2.0 + frame as f64 * self.hop_s;
        (start_s * self.sample_rate).round() as isize
    }

    /// Copies frame samples into `out`, zero-padding outside the buffer.
    pub fn fill(&self, samples: &[f32], frame: usize, out: &mut [f64]) {
        let start = self.frame_start(frame);
        for (j, o) in out.iter_mut().enumerate().take(self.window_len) {
            let idx = start + j as isize;
            *o = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize] as f64
            } else {
                0.0
            };
        }
    }
}

/// Hann window without zero end points: `0.5 (1 - cos(2π (n + ½) / L))`.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * (n as f64 + 0.5) / len as f64).cos()))
        .collect()
}

pub(crate) fn rms_to_db(rms: f64) -> f64 {
    20.0 * rms.max(RMS_FLOOR).log10()
}

fn weighted_rms(frame: &[f64], window: &[f64], window_sum: f64) -> f64 {
    let e: f64 = frame.iter().zip(window).map(|(x, w)| w * x * x).sum();
    (e / window_sum).sqrt()
}

/// Hann-weighted RMS level in dB, window fixed at 32 ms.
pub fn extract_intensity(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureTrack, FeatureError> {
    cfg.validate()?;
    let framing = Framing::centered(buffer, INTENSITY_WINDOW_S, cfg.intensity_hop_s)?;
    let window = hann(framing.window_len);
    let window_sum: f64 = window.iter().sum();
    let mut frame = vec![0.0; framing.window_len];
    let values = (0..framing.n_frames)
        .map(|t| {
            framing.fill(buffer.samples(), t, &mut frame);
            Some(rms_to_db(weighted_rms(&frame, &window, window_sum)))
        })
        .collect::<Vec<_>>();
    FeatureTrack::from_options(INTENSITY, framing.first_center_s, cfg.intensity_hop_s, values)
}

/// Per-frame outcome of the autocorrelation analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodicityFrame {
    /// Best period in seconds, 0 when no candidate exists.
    pub period_s: f64,
    /// Normalized autocorrelation at the chosen peak.
    pub strength: f64,
    pub voiced: bool,
}

/// Autocorrelation periodicity analysis shared by pitch and harmonicity.
#[derive(Debug, Clone)]
pub struct Periodicity {
    pub start_offset_s: f64,
    pub period_s: f64,
    pub frames: Vec<PeriodicityFrame>,
}

struct AutocorrelationKernel {
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    window_ac: Vec<f64>,
    size: usize,
    min_lag: usize,
    max_lag: usize,
}

impl AutocorrelationKernel {
    fn new(window_len: usize, min_lag: usize, max_lag: usize) -> Self {
        let size = (window_len + max_lag + 2).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(size);
        let ifft = planner.plan_fft_inverse(size);
        let window = hann(window_len);
        let mut kernel = Self {
            fft,
            ifft,
            window_ac: Vec::new(),
            window: window.clone(),
            size,
            min_lag,
            max_lag,
        };
        let mut scratch = vec![Complex::default(); size];
        let ac = kernel.raw_autocorrelation(&window, &mut scratch);
        kernel.window_ac = ac.iter().map(|v| v / ac[0]).collect();
        kernel
    }

    fn raw_autocorrelation(&self, x: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0);
        }
        self.fft.process(buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        self.ifft.process(buf);
        buf[..=self.max_lag + 1].iter().map(|c| c.re / self.size as f64).collect()
    }

    fn analyze(&self, frame: &mut [f64], buf: &mut [Complex<f64>], floor_hz: f64, sr: f64, threshold: f64) -> PeriodicityFrame {
        let unvoiced = PeriodicityFrame {
            period_s: 0.0,
            strength: 0.0,
            voiced: false,
        };
        let mean = frame.iter().sum::<f64>() / frame.len() as f64;
        for (x, w) in frame.iter_mut().zip(&self.window) {
            *x = (*x - mean) * w;
        }
        let ac = self.raw_autocorrelation(frame, buf);
        if !(ac[0] > 1e-20 * frame.len() as f64) {
            return unvoiced;
        }
        let r: Vec<f64> = ac.iter().zip(&self.window_ac).map(|(a, w)| (a / ac[0]) / w).collect();

        let mut best: Option<(f64, f64, f64)> = None;
        for k in self.min_lag.max(1)..=self.max_lag {
            if !(r[k] > 0.0 && r[k] > r[k - 1] && r[k] >= r[k + 1]) {
                continue;
            }
            let (prev, next) = (r[k - 1], r[k + 1]);
            let curvature = prev - 2.0 * r[k] + next;
            let (shift, peak) = if curvature < 0.0 {
                let d = 0.5 * (prev - next) / curvature;
                (d, r[k] - 0.25 * (prev - next) * d)
            } else {
                (0.0, r[k])
            };
            let lag = k as f64 + shift;
            let score = peak - OCTAVE_COST * (floor_hz * lag / sr).log2();
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((lag, peak, score));
            }
        }
        match best {
            Some((lag, peak, _)) => PeriodicityFrame {
                period_s: lag / sr,
                strength: peak,
                voiced: peak >= threshold,
            },
            None => unvoiced,
        }
    }
}

/// Runs the normalized-autocorrelation analysis: frames of `3 / floor`
/// seconds, Hann window, signal autocorrelation divided by the window's.
pub fn analyze_periodicity(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<Periodicity, FeatureError> {
    cfg.validate_for_rate(buffer.sample_rate_hz())?;
    let sr = buffer.sample_rate_hz() as f64;
    let framing = Framing::centered(buffer, cfg.pitch_window_s(), cfg.pitch_hop_s)?;
    let min_lag = (sr / cfg.pitch_ceiling_hz).floor().max(2.0) as usize;
    let max_lag = ((sr / cfg.pitch_floor_hz).ceil() as usize)
        .min(framing.window_len / 2)
        .max(min_lag + 1);
    let kernel = AutocorrelationKernel::new(framing.window_len, min_lag, max_lag);
    let mut frame = vec![0.0; framing.window_len];
    let mut scratch = vec![Complex::default(); kernel.size];
    let frames = (0..framing.n_frames)
        .map(|t| {
            framing.fill(buffer.samples(), t, &mut frame);
            kernel.analyze(&mut frame, &mut scratch, cfg.pitch_floor_hz, sr, cfg.voicing_threshold)
        })
        .collect();
    Ok(Periodicity {
        start_offset_s: framing.first_center_s,
        period_s: cfg.pitch_hop_s,
        frames,
    })
}

impl Periodicity {
    pub fn pitch_track(&self) -> FeatureTrack {
        let frames = self.frames.iter().map(|f| f.voiced.then(|| 1.0 / f.period_s));
        FeatureTrack::from_options(PITCH, self.start_offset_s, self.period_s, frames).expect("pitch frames are finite")
    }

    pub fn harmonicity_track(&self) -> FeatureTrack {
        let frames = self.frames.iter().map(|f| f.voiced.then(|| hnr_db(f.strength)));
        FeatureTrack::from_options(HNR, self.start_offset_s, self.period_s, frames).expect("hnr frames are finite")
    }
}

/// `10 log10(r / (1 - r))` clamped to `[-20, 60]` dB.
pub fn hnr_db(strength: f64) -> f64 {
    if strength >= 1.0 {
        HNR_MAX_DB
    } else if strength <= 0.0 {
        HNR_MIN_DB
    } else {
        (10.0 * (strength / (1.0 - strength)).log10()).clamp(HNR_MIN_DB, HNR_MAX_DB)
    }
}

/// Fundamental frequency of voiced frames; unvoiced frames are invalid.
pub fn extract_pitch(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureTrack, FeatureError> {
    Ok(analyze_periodicity(buffer, cfg)?.pitch_track())
}

/// Harmonics-to-noise ratio from the same analysis as [`extract_pitch`].
pub fn extract_harmonicity(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureTrack, FeatureError> {
    Ok(analyze_periodicity(buffer, cfg)?.harmonicity_track())
}

fn band_bins(fft_size: usize, sr: f64, lo_hz: f64, hi_hz: f64, inclusive_hi: bool) -> std::ops::Range<usize> {
    let bin_hz = sr / fft_size as f64;
    let n_bins = fft_size / 2 + 1;
    let lo = ((lo_hz / bin_hz).ceil() as usize).min(n_bins);
    let hi_f = hi_hz / bin_hz;
    let hi = if inclusive_hi { hi_f.floor() as usize + 1 } else { hi_f.ceil() as usize };
    lo..hi.min(n_bins).max(lo)
}

fn ls_slope(xs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let pts: Vec<(f64, f64)> = xs.collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 0.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Spectral low-level descriptors from Hann-windowed magnitude spectra.
///
/// Magnitudes are scaled by the window sum so a full-scale sinusoid peaks
/// near 0.5. Frames whose weighted RMS is at the floor are invalid for the
/// centroid, rolloff, alpha ratio and slopes; zcr and flux stay valid.
pub fn extract_spectral(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<Vec<FeatureTrack>, FeatureError> {
    cfg.validate_for_rate(buffer.sample_rate_hz())?;
    let sr = buffer.sample_rate_hz() as f64;
    let framing = Framing::centered(buffer, cfg.spectral_window_s, cfg.spectral_hop_s)?;
    let fft_size = cfg.fft_size_for(buffer.sample_rate_hz());
    let n_bins = fft_size / 2 + 1;
    let bin_hz = sr / fft_size as f64;
    let fft = FftPlanner::new().plan_fft_forward(fft_size);
    let window = hann(framing.window_len);
    let window_sum: f64 = window.iter().sum();
    let span_s = (framing.window_len.max(2) - 1) as f64 / sr;

    let low_band = band_bins(fft_size, sr, 50.0, 1000.0, false);
    let high_band = band_bins(fft_size, sr, 1000.0, 5000.0, false);
    let slope_lo = band_bins(fft_size, sr, 0.0, 500.0, true);
    let slope_hi = band_bins(fft_size, sr, 500.0, 1500.0, true);

    let n = framing.n_frames;
    let mut out: [Vec<Option<f64>>; 7] = Default::default();
    for col in out.iter_mut() {
        col.reserve_exact(n);
    }
    let mut frame = vec![0.0; framing.window_len];
    let mut buf = vec![Complex::default(); fft_size];
    let mut mag = vec![0.0; n_bins];
    let mut prev_mag = vec![0.0; n_bins];

    for t in 0..n {
        framing.fill(buffer.samples(), t, &mut frame);

        // zero crossings over the unwindowed frame, per second of frame span
        let crossings = frame.windows(2).filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0)).count();
        let zcr = crossings as f64 / span_s;

        let silent = weighted_rms(&frame, &window, window_sum) <= RMS_FLOOR;
        for (i, c) in buf.iter_mut().enumerate() {
            let x = if i < frame.len() { frame[i] * window[i] } else { 0.0 };
            *c = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm() / window_sum;
        }

        let flux = if t == 0 {
            0.0
        } else {
            mag.iter().zip(&prev_mag).map(|(a, b)| (a - b).max(0.0)).sum()
        };
        std::mem::swap(&mut mag, &mut prev_mag);
        let mag = &prev_mag;

        let spectral = (!silent).then(|| {
            let mag_sum: f64 = mag.iter().sum();
            let centroid = if mag_sum > 0.0 {
                mag.iter().enumerate().map(|(k, m)| k as f64 * bin_hz * m).sum::<f64>() / mag_sum
            } else {
                0.0
            };
            let power: Vec<f64> = mag.iter().map(|m| m * m).collect();
            let total: f64 = power.iter().sum();
            let mut acc = 0.0;
            let mut rolloff_bin = n_bins - 1;
            for (k, p) in power.iter().enumerate() {
                acc += p;
                if acc >= 0.85 * total {
                    rolloff_bin = k;
                    break;
                }
            }
            let e_low: f64 = power[low_band.clone()].iter().sum();
            let e_high: f64 = power[high_band.clone()].iter().sum();
            let alpha = 10.0 * (e_low.max(1e-20) / e_high.max(1e-20)).log10();
            let db = |k: usize| 20.0 * mag[k].max(1e-10).log10();
            let s_lo = ls_slope(slope_lo.clone().map(|k| (k as f64 * bin_hz, db(k))));
            let s_hi = ls_slope(slope_hi.clone().map(|k| (k as f64 * bin_hz, db(k))));
            (centroid, rolloff_bin as f64 * bin_hz, alpha, s_lo, s_hi)
        });

        out[0].push(spectral.map(|s| s.0));
        out[1].push(Some(zcr));
        out[2].push(Some(flux));
        out[3].push(spectral.map(|s| s.1));
        out[4].push(spectral.map(|s| s.2));
        out[5].push(spectral.map(|s| s.3));
        out[6].push(spectral.map(|s| s.4));
    }

    let names = [SPECTRAL_CENTROID, ZCR, SPECTRAL_FLUX, ROLLOFF85, ALPHA_RATIO, SLOPE_0_500, SLOPE_500_1500];
    names
        .into_iter()
        .zip(out)
        .map(|(name, frames)| FeatureTrack::from_options(name, framing.first_center_s, cfg.spectral_hop_s, frames))
        .collect()
}

/// All ten tracks, each at its own native period. The three analysis
/// families run on separate threads.
pub fn extract_all(buffer: &AudioBuffer, cfg: &FeatureConfig) -> Result<Vec<FeatureTrack>, FeatureError> {
    cfg.validate_for_rate(buffer.sample_rate_hz())?;
    let (intensity, periodicity, spectral) = std::thread::scope(|s| {
        let i = s.spawn(|| extract_intensity(buffer, cfg));
        let p = s.spawn(|| analyze_periodicity(buffer, cfg));
        let sp = extract_spectral(buffer, cfg);
        (i.join().expect("intensity thread"), p.join().expect("pitch thread"), sp)
    });
    let periodicity = periodicity?;
    let mut tracks = vec![intensity?, periodicity.pitch_track(), periodicity.harmonicity_track()];
    tracks.extend(spectral?);
    Ok(tracks)
}
