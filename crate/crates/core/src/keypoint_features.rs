//! Keypoint stream preparation: box-relative normalization, lag-offset
//! motion features, body/face/hand group splitting, and gap-constrained
//! frame sampling.
//!
//! The offset features are the interesting part: each keypoint carries its
//! current coordinates plus coordinate differences against several earlier
//! frames, so the downstream encoders see short-horizon motion rather than
//! absolute pose.

use crate::error::{Error, Result};
use crate::seeding::seeded_rng;
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use std::ops::Range;

/// Total keypoints per frame: 25 body + 70 face + 42 hands.
pub const KEYPOINT_COUNT: usize = 137;

/// One raw detector frame: pixel-space keypoints plus the detection box
/// they live in.
#[derive(Debug, Clone)]
pub struct RawKeypointFrame {
    /// (x_px, y_px) per keypoint, length 137.
    pub coords: Vec<(f64, f64)>,
    /// Detection box as (x0_px, y0_px, width_px, height_px).
    pub bbox: (f64, f64, f64, f64),
}

/// A normalized keypoint stream, `[T, 137, 2]` with every component in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSequence {
    pub coords: Array3<f64>,
}

impl KeypointSequence {
    /// Wrap an already normalized `[T, 137, 2]` array, validating the range
    /// invariant. Used when loading feature files that were written
    /// normalized.
    pub fn new(coords: Array3<f64>) -> Result<Self> {
        let shape = coords.shape();
        if shape[1] != KEYPOINT_COUNT || shape[2] != 2 {
            return Err(Error::validation(format!(
                "keypoint sequence must be [T, {KEYPOINT_COUNT}, 2], got {shape:?}"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::validation("keypoint sequence is empty".to_string()));
        }
        for &v in coords.iter() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::validation(format!(
                    "keypoint coordinate {v} outside [0,1]"
                )));
            }
        }
        Ok(KeypointSequence { coords })
    }

    /// Build from the flat f32 layout used by the keypoint file formats
    /// (T frames of 274 floats).
    pub fn from_flat(frames: usize, data: &[f32]) -> Result<Self> {
        if data.len() != frames * KEYPOINT_COUNT * 2 {
            return Err(Error::validation(format!(
                "flat keypoint buffer has {} floats, expected {}",
                data.len(),
                frames * KEYPOINT_COUNT * 2
            )));
        }
        let coords = Array3::from_shape_vec(
            (frames, KEYPOINT_COUNT, 2),
            data.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape matches length");
        KeypointSequence::new(coords)
    }

    pub fn frames(&self) -> usize {
        self.coords.shape()[0]
    }
}

/// Lags (in frames) for the offset features and the policy for frames that
/// have no history that far back.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetConfig {
    pub lags: Vec<usize>,
    pub missing_lag_policy: MissingLagPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingLagPolicy {
    /// Offsets against frames before the start of the clip are (0,0),
    /// i.e. "no observed motion".
    ZeroFill,
}

impl Default for OffsetConfig {
    fn default() -> Self {
        OffsetConfig {
            lags: vec![8, 16, 24],
            missing_lag_policy: MissingLagPolicy::ZeroFill,
        }
    }
}

impl OffsetConfig {
    /// An empty lag list is the raw-coordinates mode: features carry only
    /// (x, y) per keypoint, used as the no-offsets baseline.
    pub fn validate(&self) -> Result<()> {
        for w in self.lags.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::validation(format!(
                    "lags must be strictly increasing, got {:?}",
                    self.lags
                )));
            }
        }
        if self.lags.first() == Some(&0) {
            return Err(Error::validation("lags must be positive".to_string()));
        }
        Ok(())
    }

    /// Raw-coordinates mode, the offsets-disabled baseline.
    pub fn raw_coordinates() -> OffsetConfig {
        OffsetConfig {
            lags: vec![],
            missing_lag_policy: MissingLagPolicy::ZeroFill,
        }
    }

    /// Per-keypoint feature width: coordinates plus one offset pair per lag.
    pub fn feature_width(&self) -> usize {
        2 + 2 * self.lags.len()
    }
}

/// Contiguous keypoint index ranges for the three anatomical groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSpec {
    pub skeleton: Range<usize>,
    pub face: Range<usize>,
    pub hands: Range<usize>,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            skeleton: 0..25,
            face: 25..95,
            hands: 95..137,
        }
    }
}

impl GroupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.skeleton.start != 0
            || self.skeleton.end != self.face.start
            || self.face.end != self.hands.start
            || self.hands.end != KEYPOINT_COUNT
        {
            return Err(Error::validation(format!(
                "group ranges must partition 0..{KEYPOINT_COUNT} in order, got {:?} {:?} {:?}",
                self.skeleton, self.face, self.hands
            )));
        }
        Ok(())
    }

    pub fn ranges(&self) -> [(&'static str, Range<usize>); 3] {
        [
            ("skeleton", self.skeleton.clone()),
            ("face", self.face.clone()),
            ("hands", self.hands.clone()),
        ]
    }
}

/// Model-ready features for one sample: per-group arrays of shape
/// `[n_sampled_frames, n_group_keypoints, F]` plus the frame indices they
/// were gathered from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub skeleton: Array3<f64>,
    pub face: Array3<f64>,
    pub hands: Array3<f64>,
    pub sampled_indices: Vec<usize>,
}

impl FeatureTensor {
    pub fn feature_width(&self) -> usize {
        self.skeleton.shape()[2]
    }

    pub fn n_frames(&self) -> usize {
        self.sampled_indices.len()
    }

    pub fn group(&self, name: &str) -> Option<&Array3<f64>> {
        match name {
            "skeleton" => Some(&self.skeleton),
            "face" => Some(&self.face),
            "hands" => Some(&self.hands),
            _ => None,
        }
    }
}

/// Map one raw pixel frame into box-relative ratio coordinates, clamped to
/// [0,1] (detectors occasionally place a keypoint a few pixels outside the
/// box; clamping keeps the invariant instead of failing the sample).
pub fn normalize_frame(raw: &RawKeypointFrame) -> Result<Vec<(f64, f64)>> {
    let (x0, y0, w, h) = raw.bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::validation(format!(
            "detection box must have positive dimensions, got {w}x{h}"
        )));
    }
    if raw.coords.len() != KEYPOINT_COUNT {
        return Err(Error::validation(format!(
            "raw frame has {} keypoints, expected {KEYPOINT_COUNT}",
            raw.coords.len()
        )));
    }
    Ok(raw
        .coords
        .iter()
        .map(|&(x, y)| {
            (
                ((x - x0) / w).clamp(0.0, 1.0),
                ((y - y0) / h).clamp(0.0, 1.0),
            )
        })
        .collect())
}

/// Normalize a whole raw stream into a [`KeypointSequence`].
pub fn normalize_sequence(raw: &[RawKeypointFrame]) -> Result<KeypointSequence> {
    if raw.is_empty() {
        return Err(Error::validation("raw keypoint stream is empty".to_string()));
    }
    let mut coords = Array3::zeros((raw.len(), KEYPOINT_COUNT, 2));
    for (t, frame) in raw.iter().enumerate() {
        let normalized = normalize_frame(frame)?;
        for (k, (x, y)) in normalized.into_iter().enumerate() {
            coords[[t, k, 0]] = x;
            coords[[t, k, 1]] = y;
        }
    }
    KeypointSequence::new(coords)
}

/// Per-frame, per-keypoint features `[x, y, x−x_{t−l}, y−y_{t−l}, ...]` for
/// each configured lag `l`, in lag order. Frames earlier than a lag get a
/// (0,0) pair for that lag.
pub fn compute_offsets(seq: &KeypointSequence, cfg: &OffsetConfig) -> Result<Array3<f64>> {
    cfg.validate()?;
    let t_total = seq.frames();
    let f = cfg.feature_width();
    let mut out = Array3::zeros((t_total, KEYPOINT_COUNT, f));
    for t in 0..t_total {
        for k in 0..KEYPOINT_COUNT {
            let x = seq.coords[[t, k, 0]];
            let y = seq.coords[[t, k, 1]];
            out[[t, k, 0]] = x;
            out[[t, k, 1]] = y;
            for (li, &lag) in cfg.lags.iter().enumerate() {
                let col = 2 + 2 * li;
                if t >= lag {
                    out[[t, k, col]] = x - seq.coords[[t - lag, k, 0]];
                    out[[t, k, col + 1]] = y - seq.coords[[t - lag, k, 1]];
                }
            }
        }
    }
    Ok(out)
}

/// Split one frame's `137×F` feature matrix into the three group streams.
/// Concatenating the returned streams in order reconstructs the input.
pub fn split_groups(
    frame: ArrayView2<'_, f64>,
    spec: &GroupSpec,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    spec.validate()?;
    if frame.shape()[0] != KEYPOINT_COUNT {
        return Err(Error::validation(format!(
            "frame has {} keypoints, expected {KEYPOINT_COUNT}",
            frame.shape()[0]
        )));
    }
    let slice = |r: &Range<usize>| frame.slice(ndarray::s![r.clone(), ..]).to_owned();
    Ok((
        slice(&spec.skeleton),
        slice(&spec.face),
        slice(&spec.hands),
    ))
}

/// Gather offset features at `indices` and split into group tensors.
/// Offsets are computed over the full sequence first, so each sampled frame
/// keeps its true motion history regardless of which frames were sampled.
pub fn build_feature_tensor(
    seq: &KeypointSequence,
    cfg: &OffsetConfig,
    spec: &GroupSpec,
    indices: &[usize],
) -> Result<FeatureTensor> {
    spec.validate()?;
    if indices.is_empty() {
        return Err(Error::validation("no frame indices to gather".to_string()));
    }
    if indices.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::validation("sampled indices must be non-decreasing".to_string()));
    }
    let t_total = seq.frames();
    if let Some(&bad) = indices.iter().find(|&&i| i >= t_total) {
        return Err(Error::validation(format!(
            "sampled index {bad} out of range for {t_total} frames"
        )));
    }
    let features = compute_offsets(seq, cfg)?;
    let f = cfg.feature_width();
    let gather = |range: &Range<usize>| {
        let mut out = Array3::zeros((indices.len(), range.len(), f));
        for (row, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&features.slice(
                ndarray::s![idx, range.clone(), ..],
            ));
        }
        out
    };
    Ok(FeatureTensor {
        skeleton: gather(&spec.skeleton),
        face: gather(&spec.face),
        hands: gather(&spec.hands),
        sampled_indices: indices.to_vec(),
    })
}

/// Draw `n_samples` frame indices from `[0, total_frames)`, one per equal
/// stratum, keeping consecutive indices at least `max(min_gap, 1)` apart.
///
/// When the stream is too short for that gap, the gap degrades to
/// `max(1, total/n)`; when there are fewer frames than samples, indices are
/// drawn with replacement and returned sorted. Deterministic per seed.
pub fn sample_frames(
    total_frames: usize,
    n_samples: usize,
    min_gap: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_samples == 0 {
        return Err(Error::validation("n_samples must be positive".to_string()));
    }
    if total_frames == 0 {
        return Err(Error::validation("total_frames must be positive".to_string()));
    }
    let mut rng = seeded_rng(seed);
    if total_frames < n_samples {
        let mut picks: Vec<usize> =
            (0..n_samples).map(|_| rng.gen_range(0..total_frames)).collect();
        picks.sort_unstable();
        return Ok(picks);
    }
    let gap = {
        let wanted = min_gap.max(1);
        if total_frames >= n_samples * wanted {
            wanted
        } else {
            (total_frames / n_samples).max(1)
        }
    };
    // Stratum s is [floor(s·T/n), floor((s+1)·T/n)). Because T ≥ n·gap each
    // stratum is at least `gap` wide, so the gap-feasible part of every
    // stratum is non-empty and a clamped uniform draw is exactly the
    // rejection-sampled distribution.
    let mut picks = Vec::with_capacity(n_samples);
    let mut prev: Option<usize> = None;
    for s in 0..n_samples {
        let lo = s * total_frames / n_samples;
        let hi = (s + 1) * total_frames / n_samples;
        let lo = match prev {
            Some(p) => lo.max(p + gap),
            None => lo,
        };
        debug_assert!(lo < hi, "stratum {s} infeasible: [{lo}, {hi})");
        let pick = rng.gen_range(lo..hi);
        picks.push(pick);
        prev = Some(pick);
    }
    Ok(picks)
}
