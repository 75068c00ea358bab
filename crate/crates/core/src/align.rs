//! Putting heterogeneous-rate tracks on one time grid.
//!
//! Timestamps are compared with a small absolute slack so that values
//! like `40 * 0.01` do not flap across boundaries; ties in nearest-frame
//! lookup go to the earlier frame.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureTrack, PITCH};
use crate::vad::VadSegment;

const EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("track {0:?} has no frames")]
    EmptyTrack(String),
    #[error("duplicate feature {0:?}")]
    DuplicateFeature(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("no tracks given")]
    NoTracks,
}

impl AlignError {
    pub fn kind(&self) -> &'static str {
        match self {
            AlignError::EmptyTrack(_) => "EmptyTrack",
            AlignError::DuplicateFeature(_) => "DuplicateFeature",
            AlignError::SchemaMismatch(_) => "SchemaMismatch",
            AlignError::InvalidGrid(_) => "InvalidGrid",
            AlignError::NoTracks => "NoTracks",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start_s: f64,
    pub period_s: f64,
    pub n_frames: usize,
}

impl TimeGrid {
    pub fn new(start_s: f64, period_s: f64, n_frames: usize) -> Result<Self, AlignError> {
        if !(period_s.is_finite() && period_s > 0.0) {
            return Err(AlignError::InvalidGrid(format!("period {period_s} must be positive")));
        }
        if !start_s.is_finite() {
            return Err(AlignError::InvalidGrid(format!("start {start_s} must be finite")));
        }
        if n_frames == 0 {
            return Err(AlignError::InvalidGrid("grid needs at least one frame".into()));
        }
        Ok(Self {
            start_s,
            period_s,
            n_frames,
        })
    }

    /// Grid from `t = 0` with every timestamp strictly before `duration_s`.
    pub fn covering(duration_s: f64, period_s: f64) -> Result<Self, AlignError> {
        let n = ((duration_s / period_s - EPS).floor().max(0.0) as usize) + 1;
        Self::new(0.0, period_s, n)
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        self.start_s + frame as f64 * self.period_s
    }

    pub fn timestamps(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_frames).map(|t| self.timestamp(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMethod {
    #[default]
    Nearest,
    Linear,
}

impl ResampleMethod {
    /// Pitch is only ever resampled by nearest frame; interpolating across a
    /// voicing boundary has no meaning.
    pub fn for_feature(self, feature_name: &str) -> ResampleMethod {
        if feature_name == PITCH {
            ResampleMethod::Nearest
        } else {
            self
        }
    }
}

impl std::str::FromStr for ResampleMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "linear" => Ok(Self::Linear),
            _ => Err(format!("unknown resample method {s:?} (nearest|linear)")),
        }
    }
}

/// What to do with rows outside VAD segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SilenceMode {
    /// Leave every row untouched.
    Keep,
    /// Remove rows outside segments.
    #[default]
    Drop,
    /// Keep rows but mark their cells invalid.
    Mask,
}

impl std::str::FromStr for SilenceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "keep" => Ok(Self::Keep),
            "drop" => Ok(Self::Drop),
            "mask" => Ok(Self::Mask),
            _ => Err(format!("unknown silence mode {s:?} (drop|mask|keep)")),
        }
    }
}

impl std::fmt::Display for SilenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SilenceMode::Keep => "keep",
            SilenceMode::Drop => "drop",
            SilenceMode::Mask => "mask",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResampledColumn {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Samples `track` at every grid timestamp.
///
/// Nearest: the closest frame, valid within half a period of the first and
/// last frame. Linear: interpolation between bracketing frames, valid only
/// when both are valid and the timestamp lies within `[first, last]`.
pub fn resample_track(track: &FeatureTrack, grid: &TimeGrid, method: ResampleMethod) -> Result<ResampledColumn, AlignError> {
    if track.is_empty() {
        return Err(AlignError::EmptyTrack(track.feature_name().to_string()));
    }
    let last = (track.len() - 1) as f64;
    let mut out = ResampledColumn {
        values: Vec::with_capacity(grid.n_frames),
        valid: Vec::with_capacity(grid.n_frames),
    };
    for t in grid.timestamps() {
        let x = (t - track.start_offset_s()) / track.period_s();
        let sample = match method {
            ResampleMethod::Nearest => {
                if x < -0.5 - EPS || x > last + 0.5 + EPS {
                    None
                } else {
                    let i = ((x - 0.5 - EPS).ceil().max(0.0) as usize).min(track.len() - 1);
                    track.get(i)
                }
            }
            ResampleMethod::Linear => {
                if x < -EPS || x > last + EPS {
                    None
                } else {
                    let nearest = x.round();
                    if (x - nearest).abs() < EPS {
                        track.get((nearest.max(0.0) as usize).min(track.len() - 1))
                    } else {
                        let i0 = x.floor() as usize;
                        let frac = x - i0 as f64;
                        match (track.get(i0), track.get(i0 + 1)) {
                            (Some(a), Some(b)) => Some((a + (b - a) * frac).clamp(a.min(b), a.max(b))),
                            _ => None,
                        }
                    }
                }
            }
        };
        out.values.push(sample.unwrap_or(0.0));
        out.valid.push(sample.is_some());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowProvenance {
    pub asset_id: u64,
    pub timestamp_s: f64,
}

/// Rows are frames, columns are features. Invalid cells hold 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    grid: TimeGrid,
    columns: Vec<String>,
    values: Vec<f64>,
    valid: Vec<bool>,
    provenance: Vec<RowProvenance>,
    source_valid: Option<Vec<bool>>,
}

impl FeatureMatrix {
    /// Builds a matrix from row-major cells; invalid cells are zeroed.
    pub fn from_rows(
        grid: TimeGrid,
        columns: Vec<String>,
        mut values: Vec<f64>,
        valid: Vec<bool>,
        provenance: Vec<RowProvenance>,
    ) -> Result<Self, AlignError> {
        let mut seen = HashSet::new();
        if let Some(dup) = columns.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(AlignError::DuplicateFeature(dup.clone()));
        }
        let cells = provenance.len() * columns.len();
        if values.len() != cells || valid.len() != cells {
            return Err(AlignError::SchemaMismatch(format!(
                "{} values / {} flags for {} rows x {} columns",
                values.len(),
                valid.len(),
                provenance.len(),
                columns.len()
            )));
        }
        for (v, ok) in values.iter_mut().zip(&valid) {
            if !ok {
                *v = 0.0;
            }
        }
        Ok(Self {
            grid,
            columns,
            values,
            valid,
            provenance,
            source_valid: None,
        })
    }

    /// Fully valid matrix from plain rows, timestamps taken from a 1 s grid.
    pub fn from_dense(columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, AlignError> {
        let grid = TimeGrid::new(0.0, 1.0, rows.len().max(1))?;
        let provenance = (0..rows.len())
            .map(|r| RowProvenance {
                asset_id: 0,
                timestamp_s: grid.timestamp(r),
            })
            .collect();
        if let Some(r) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(AlignError::SchemaMismatch(format!("row {r} has {} cells", rows[r].len())));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let valid = vec![true; values.len()];
        Self::from_rows(grid, columns, values, valid, provenance)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.provenance.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn provenance(&self) -> &[RowProvenance] {
        &self.provenance
    }

    /// Validity mask before imputation, set by standardization.
    pub fn source_valid(&self) -> Option<&[bool]> {
        self.source_valid.as_deref()
    }

    pub(crate) fn set_source_valid(&mut self, mask: Vec<bool>) {
        self.source_valid = Some(mask);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.columns.len();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn row_valid(&self, r: usize) -> &[bool] {
        let c = self.columns.len();
        &self.valid[r * c..(r + 1) * c]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.columns.len() + col;
        self.valid[i].then(|| self.values[i])
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    /// Tags every row with `asset_id`.
    pub fn with_asset_id(mut self, asset_id: u64) -> Self {
        for p in &mut self.provenance {
            p.asset_id = asset_id;
        }
        self
    }

    pub(crate) fn map_values(&mut self, f: impl Fn(usize, usize, f64, bool) -> (f64, bool)) {
        let n_cols = self.columns.len();
        for (i, (v, ok)) in self.values.iter_mut().zip(self.valid.iter_mut()).enumerate() {
            let (nv, nok) = f(i / n_cols, i % n_cols, *v, *ok);
            *v = if nok { nv } else { 0.0 };
            *ok = nok;
        }
    }

    fn select_rows(&self, keep: impl Fn(usize) -> bool) -> FeatureMatrix {
        let c = self.columns.len();
        let mut out = FeatureMatrix {
            grid: self.grid,
            columns: self.columns.clone(),
            values: Vec::new(),
            valid: Vec::new(),
            provenance: Vec::new(),
            source_valid: self.source_valid.as_ref().map(|_| Vec::new()),
        };
        for r in (0..self.n_rows()).filter(|&r| keep(r)) {
            out.values.extend_from_slice(self.row(r));
            out.valid.extend_from_slice(self.row_valid(r));
            out.provenance.push(self.provenance[r]);
            if let (Some(dst), Some(src)) = (out.source_valid.as_mut(), self.source_valid.as_ref()) {
                dst.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        out
    }
}

/// One column per track, in input order, sampled on `grid`.
pub fn build_matrix(tracks: &[FeatureTrack], grid: &TimeGrid, method: ResampleMethod) -> Result<FeatureMatrix, AlignError> {
    if tracks.is_empty() {
        return Err(AlignError::NoTracks);
    }
    let mut seen = HashSet::new();
    for t in tracks {
        if !seen.insert(t.feature_name()) {
            return Err(AlignError::DuplicateFeature(t.feature_name().to_string()));
        }
    }
    let columns: Vec<ResampledColumn> = tracks
        .iter()
        .map(|t| resample_track(t, grid, method.for_feature(t.feature_name())))
        .collect::<Result<_, _>>()?;
    let n_cols = columns.len();
    let mut values = Vec::with_capacity(grid.n_frames * n_cols);
    let mut valid = Vec::with_capacity(grid.n_frames * n_cols);
    for r in 0..grid.n_frames {
        for col in &columns {
            values.push(col.values[r]);
            valid.push(col.valid[r]);
        }
    }
    let provenance = grid
        .timestamps()
        .map(|timestamp_s| RowProvenance { asset_id: 0, timestamp_s })
        .collect();
    FeatureMatrix::from_rows(
        *grid,
        tracks.iter().map(|t| t.feature_name().to_string()).collect(),
        values,
        valid,
        provenance,
    )
}

fn in_segments(t: f64, segments: &[VadSegment]) -> bool {
    // segments are sorted; binary search on start
    let idx = segments.partition_point(|s| s.start_s - EPS <= t);
    idx > 0 && t < segments[idx - 1].end_s - EPS
}

/// Keeps rows whose timestamp lies in some `[start, end)` segment.
pub fn apply_silence_filter(matrix: &FeatureMatrix, segments: &[VadSegment], mode: SilenceMode) -> FeatureMatrix {
    match mode {
        SilenceMode::Keep => matrix.clone(),
        SilenceMode::Drop => matrix.select_rows(|r| in_segments(matrix.provenance[r].timestamp_s, segments)),
        SilenceMode::Mask => {
            let mut out = matrix.clone();
            let keep: Vec<bool> = matrix
                .provenance
                .iter()
                .map(|p| in_segments(p.timestamp_s, segments))
                .collect();
            out.map_values(|r, _, v, ok| (v, ok && keep[r]));
            out
        }
    }
}

/// Stacks rows of matrices with identical columns and grid period.
pub fn concat_matrices(matrices: &[FeatureMatrix]) -> Result<FeatureMatrix, AlignError> {
    let (first, rest) = matrices.split_first().ok_or(AlignError::NoTracks)?;
    for (i, m) in rest.iter().enumerate() {
        if m.columns != first.columns {
            return Err(AlignError::SchemaMismatch(format!(
                "matrix {} columns {:?} differ from {:?}",
                i + 1,
                m.columns,
                first.columns
            )));
        }
        if m.grid.period_s != first.grid.period_s {
            return Err(AlignError::SchemaMismatch(format!(
                "matrix {} grid period {} differs from {}",
                i + 1,
                m.grid.period_s,
                first.grid.period_s
            )));
        }
    }
    let mut out = FeatureMatrix {
        grid: first.grid,
        columns: first.columns.clone(),
        values: Vec::new(),
        valid: Vec::new(),
        provenance: Vec::new(),
        source_valid: None,
    };
    for m in matrices {
        out.values.extend_from_slice(&m.values);
        out.valid.extend_from_slice(&m.valid);
        out.provenance.extend_from_slice(&m.provenance);
    }
    out.grid.n_frames = out.n_rows().max(1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(name: &str, start: f64, period: f64, values: &[f64]) -> FeatureTrack {
        FeatureTrack::from_options(name, start, period, values.iter().map(|&v| Some(v))).unwrap()
    }

    #[test]
    fn constant_track_preserved() {
        let t = track("c", 0.0, 0.008, &[5.0; 200]);
        let grid = TimeGrid::new(0.1, 0.01, 50).unwrap();
        for m in [ResampleMethod::Nearest, ResampleMethod::Linear] {
            let col = resample_track(&t, &grid, m).unwrap();
            assert!(col.values.iter().all(|&v| v == 5.0));
            assert!(col.valid.iter().all(|&v| v));
        }
    }

    #[test]
    fn linear_midpoints() {
        let ramp: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let t = track("ramp", 0.0, 0.01, &ramp);
        let grid = TimeGrid::new(0.005, 0.01, 19).unwrap();
        let col = resample_track(&t, &grid, ResampleMethod::Linear).unwrap();
        for (i, v) in col.values.iter().enumerate() {
            assert!((v - (i as f64 + 0.5)).abs() < 1e-9, "{i}: {v}");
        }
    }

    #[test]
    fn beyond_extent_is_invalid() {
        let t = track("x", 0.0, 0.01, &[1.0; 100]);
        let grid = TimeGrid::new(0.0, 0.01, 200).unwrap();
        let col = resample_track(&t, &grid, ResampleMethod::Nearest).unwrap();
        assert!(col.valid[..100].iter().all(|&v| v));
        assert!(col.valid[101..].iter().all(|&v| !v));
        assert!(col.values[101..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_ties_go_earlier() {
        let t = track("x", 0.0, 0.02, &[1.0, 2.0, 3.0]);
        let grid = TimeGrid::new(0.01, 0.02, 2).unwrap();
        let col = resample_track(&t, &grid, ResampleMethod::Nearest).unwrap();
        assert_eq!(col.values, vec![1.0, 2.0]);
    }

    #[test]
    fn linear_needs_both_endpoints() {
        let t = FeatureTrack::from_options("p", 0.0, 0.01, [Some(1.0), None, Some(3.0)]).unwrap();
        let grid = TimeGrid::new(0.005, 0.01, 2).unwrap();
        let col = resample_track(&t, &grid, ResampleMethod::Linear).unwrap();
        assert_eq!(col.valid, vec![false, false]);
    }

    #[test]
    fn pitch_always_nearest() {
        assert_eq!(ResampleMethod::Linear.for_feature(PITCH), ResampleMethod::Nearest);
        assert_eq!(ResampleMethod::Linear.for_feature("intensity_db"), ResampleMethod::Linear);
    }

    #[test]
    fn matrix_shape_and_duplicates() {
        let a = track("a", 0.0, 0.01, &[1.0; 120]);
        let b = track("b", 0.0, 0.01, &[2.0; 120]);
        let grid = TimeGrid::new(0.0, 0.01, 100).unwrap();
        let m = build_matrix(&[a.clone(), b], &grid, ResampleMethod::Nearest).unwrap();
        assert_eq!((m.n_rows(), m.n_columns()), (100, 2));
        assert_eq!(m.row(3), &[1.0, 2.0]);
        assert!(matches!(
            build_matrix(&[a.clone(), a], &grid, ResampleMethod::Nearest),
            Err(AlignError::DuplicateFeature(_))
        ));
        let empty = FeatureTrack::new("e", 0.0, 0.01, vec![], vec![]).unwrap();
        assert!(matches!(
            build_matrix(&[empty], &grid, ResampleMethod::Nearest),
            Err(AlignError::EmptyTrack(_))
        ));
    }

    #[test]
    fn mixed_rates_fill_interior() {
        // 8 ms and 12.5 ms tracks spanning ~2 s
        let a = track("a", 0.016, 0.008, &vec![1.0; 247]);
        let b = track("b", 0.02, 0.0125, &vec![1.0; 157]);
        let grid = TimeGrid::new(0.0, 0.01, 200).unwrap();
        let m = build_matrix(&[a, b], &grid, ResampleMethod::Nearest).unwrap();
        for r in 3..197 {
            assert!(m.row_valid(r).iter().all(|&v| v), "row {r}");
        }
    }

    #[test]
    fn silence_filter_modes() {
        let t = track("x", 0.0, 0.01, &[1.0; 100]);
        let grid = TimeGrid::new(0.0, 0.01, 100).unwrap();
        let m = build_matrix(&[t], &grid, ResampleMethod::Nearest).unwrap();
        let segs = [VadSegment::new(0.0, 0.4).unwrap()];
        let dropped = apply_silence_filter(&m, &segs, SilenceMode::Drop);
        assert_eq!(dropped.n_rows(), 40);
        assert!(dropped.provenance().iter().all(|p| p.timestamp_s < 0.4));
        assert_eq!(apply_silence_filter(&m, &[], SilenceMode::Drop).n_rows(), 0);
        let masked = apply_silence_filter(&m, &segs, SilenceMode::Mask);
        assert_eq!(masked.n_rows(), 100);
        assert_eq!(masked.valid().iter().filter(|&&v| v).count(), 40);
        assert_eq!(apply_silence_filter(&m, &segs, SilenceMode::Keep), m);
    }

    #[test]
    fn concat_rules() {
        let cols = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64; 3]).collect();
        let m = FeatureMatrix::from_dense(cols.clone(), &rows).unwrap();
        let both = concat_matrices(&[m.clone(), m.clone().with_asset_id(7)]).unwrap();
        assert_eq!((both.n_rows(), both.n_columns()), (20, 3));
        assert_eq!(both.provenance()[15].asset_id, 7);
        assert_eq!(concat_matrices(std::slice::from_ref(&m)).unwrap(), m);
        let swapped = FeatureMatrix::from_dense(vec!["b".into(), "a".into(), "c".into()], &rows).unwrap();
        assert!(matches!(concat_matrices(&[m, swapped]), Err(AlignError::SchemaMismatch(_))));
    }

    #[test]
    fn covering_grid() {
        let g = TimeGrid::covering(60.0, 0.01).unwrap();
        assert_eq!(g.n_frames, 6000);
        assert!(TimeGrid::new(0.0, 0.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 0.01, 0).is_err());
    }
}
