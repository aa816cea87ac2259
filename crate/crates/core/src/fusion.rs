//! Goal-conditioning features and the sites where they enter the backbone.

use crate::error::{Error, Result};
use crate::trajectory::{normalize_window, Point2, TrajectoryWindow, T_SEQ};

/// Number of scalars in an encoded [`GoalFeatures`] vector.
pub const GOAL_FEATURES: usize = 7;

/// Where goal features are concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Per-step embeddings before the temporal block only.
    Early,
    /// Last hidden state before the decoder only.
    Late,
    /// Both sites.
    Skip,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Early, FusionMode::Late, FusionMode::Skip];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::Skip => "skip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            "skip" => Ok(FusionMode::Skip),
            other => Err(Error::InvalidArgument(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn feeds_encoder(self) -> bool {
        matches!(self, FusionMode::Early | FusionMode::Skip)
    }

    pub fn feeds_decoder(self) -> bool {
        matches!(self, FusionMode::Late | FusionMode::Skip)
    }
}

/// Encoding of the time-step feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeFeature {
    Absolute,
    Remaining,
}

impl TimeFeature {
    pub fn name(self) -> &'static str {
        match self {
            TimeFeature::Absolute => "absolute",
            TimeFeature::Remaining => "remaining",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(TimeFeature::Absolute),
            "remaining" => Ok(TimeFeature::Remaining),
            other => Err(Error::InvalidArgument(format!("unknown time feature {other:?}"))),
        }
    }
}

/// Goal-conditioning inputs for one rollout step, in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalFeatures {
    pub goal: Point2,
    pub last_position: Point2,
    pub distance_to_goal: f64,
    pub time_step: usize,
}

impl GoalFeatures {
    /// `[goal / s, last / s, distance / s, time / T_SEQ, 1]`; the trailing
    /// one marks the goal as present.
    pub fn encode(&self, coord_scale: f64, time: TimeFeature) -> [f64; GOAL_FEATURES] {
        let t = match time {
            TimeFeature::Absolute => self.time_step as f64,
            TimeFeature::Remaining => T_SEQ as f64 - self.time_step as f64,
        };
        [
            self.goal.x / coord_scale,
            self.goal.y / coord_scale,
            self.last_position.x / coord_scale,
            self.last_position.y / coord_scale,
            self.distance_to_goal / coord_scale,
            t / T_SEQ as f64,
            1.0,
        ]
    }
}

pub fn goal_features(current: Point2, goal: Point2, t: usize) -> GoalFeatures {
    GoalFeatures {
        goal,
        last_position: current,
        distance_to_goal: current.dist(goal),
        time_step: t,
    }
}

/// Input widths `(temporal block, decoder)` for a backbone of width
/// `d_model`, noise width `z_dim` and goal embedding width `goal_dim`.
pub fn fusion_widths(mode: Option<FusionMode>, d_model: usize, z_dim: usize, goal_dim: usize) -> (usize, usize) {
    let enc = d_model + if mode.is_some_and(FusionMode::feeds_encoder) { goal_dim } else { 0 };
    let dec = d_model + z_dim + if mode.is_some_and(FusionMode::feeds_decoder) { goal_dim } else { 0 };
    (enc, dec)
}

/// The goal used while training: the window's true final position in the
/// normalized frame.
pub fn training_goal(window: &TrajectoryWindow) -> Point2 {
    let n = normalize_window(window);
    n.positions[n.positions.len() - 1]
}
