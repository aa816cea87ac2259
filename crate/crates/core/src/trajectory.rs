//! Trajectory representations, fixed-length windowing and the
//! last-observed-position normalization used by every model.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// Number of observed steps per window.
pub const T_OBS: usize = 8;
/// Number of predicted steps per window.
pub const T_PRED: usize = 12;
/// Total window length.
pub const T_SEQ: usize = T_OBS + T_PRED;

/// A 2D location in scene-native units (meters or pixels).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Rotates about the origin by `angle` radians.
    pub fn rotate(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// A raw annotated track: one agent's positions keyed by frame id.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub agent_id: String,
    pub label: Option<String>,
    pub samples: Vec<(i64, Point2)>,
}

impl RawTrack {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The common frame stride, or `None` when consecutive frame gaps differ
    /// (or the track has fewer than two samples).
    pub fn uniform_stride(&self) -> Option<i64> {
        let mut gaps = self.samples.windows(2).map(|w| w[1].0 - w[0].0);
        let first = gaps.next()?;
        if first > 0 && gaps.all(|g| g == first) {
            Some(first)
        } else {
            None
        }
    }
}

/// A fixed-length slice of one agent's path.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub scene_id: String,
    pub agent_id: String,
    pub positions: Vec<Point2>,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl TrajectoryWindow {
    pub fn new(scene_id: impl Into<String>, agent_id: impl Into<String>, positions: Vec<Point2>) -> Self {
        TrajectoryWindow {
            scene_id: scene_id.into(),
            agent_id: agent_id.into(),
            positions,
            t_obs: T_OBS,
            t_pred: T_PRED,
        }
    }

    pub fn t_seq(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn observed(&self) -> &[Point2] {
        &self.positions[..self.t_obs]
    }

    pub fn future(&self) -> &[Point2] {
        &self.positions[self.t_obs..]
    }

    pub fn last_observed(&self) -> Point2 {
        self.positions[self.t_obs - 1]
    }

    pub fn final_position(&self) -> Point2 {
        self.positions[self.t_seq() - 1]
    }

    /// The same window shifted by a constant offset.
    pub fn translated(&self, by: Point2) -> TrajectoryWindow {
        TrajectoryWindow {
            positions: self.positions.iter().map(|&p| p + by).collect(),
            ..self.clone()
        }
    }
}

/// A window expressed relative to its last observed position.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWindow {
    pub positions: Vec<Point2>,
    pub offset: Point2,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl NormalizedWindow {
    pub fn observed(&self) -> &[Point2] {
        &self.positions[..self.t_obs]
    }

    pub fn future(&self) -> &[Point2] {
        &self.positions[self.t_obs..]
    }
}

/// Windows cut from a set of tracks plus the tracks that were rejected.
#[derive(Debug, Clone, Default)]
pub struct WindowSet {
    pub windows: Vec<TrajectoryWindow>,
    pub rejected: Vec<String>,
}

/// Number of windows a track of `len` samples yields.
pub fn window_count(len: usize, t_seq: usize, stride: usize) -> usize {
    if len < t_seq {
        0
    } else {
        (len - t_seq) / stride + 1
    }
}

/// Cuts every track into contiguous `t_obs + t_pred` slices taken every
/// `stride` samples. Tracks whose frame stride is not uniform are skipped
/// and listed in [`WindowSet::rejected`].
pub fn build_windows(
    scene_id: &str,
    tracks: &[RawTrack],
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<WindowSet> {
    if stride == 0 {
        return Err(Error::InvalidArgument("window stride must be >= 1".into()));
    }
    if t_obs == 0 || t_pred == 0 {
        return Err(Error::InvalidArgument("t_obs and t_pred must be >= 1".into()));
    }
    let t_seq = t_obs + t_pred;
    let mut out = WindowSet::default();
    for track in tracks {
        if track.len() < t_seq {
            continue;
        }
        if track.uniform_stride().is_none() {
            log::warn!("rejecting track {}: non-uniform frame stride", track.agent_id);
            out.rejected.push(track.agent_id.clone());
            continue;
        }
        let mut start = 0;
        while start + t_seq <= track.len() {
            let positions = track.samples[start..start + t_seq].iter().map(|s| s.1).collect();
            out.windows.push(TrajectoryWindow {
                scene_id: scene_id.to_string(),
                agent_id: track.agent_id.clone(),
                positions,
                t_obs,
                t_pred,
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Subtracts the last observed position (index `t_obs - 1`) from every position.
pub fn normalize_window(w: &TrajectoryWindow) -> NormalizedWindow {
    let offset = w.last_observed();
    NormalizedWindow {
        positions: w.positions.iter().map(|&p| p - offset).collect(),
        offset,
        t_obs: w.t_obs,
        t_pred: w.t_pred,
    }
}

pub fn denormalize(points: &[Point2], offset: Point2) -> Vec<Point2> {
    points.iter().map(|&p| p + offset).collect()
}
