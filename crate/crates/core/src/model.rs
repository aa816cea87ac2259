//! Complete forecasters and the prediction interface used by evaluation.

use crate::dataset::Scene;
use crate::error::{Error, Result};
use crate::raster::{build_input_tensor, ProbabilityMap, RasterConfig};
use crate::sampling::sample_goals;
use crate::fusion::FusionMode;
use crate::sar::{Backbone, RolloutConfig, RolloutMode, SarConfig, SarModel};
use crate::trajectory::{denormalize, normalize_window, Point2, TrajectoryWindow, T_PRED};
use crate::unet::{UnetConfig, UnetModel};

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Model families selectable from the command line. `Rnn` and `Lstm` are
/// goal-conditioned with a recurrent cell in place of attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sar,
    GoalSar,
    Rnn,
    Lstm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Sar, ModelKind::GoalSar, ModelKind::Rnn, ModelKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Sar => "sar",
            ModelKind::GoalSar => "goal_sar",
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sar" => Ok(ModelKind::Sar),
            "goal_sar" | "goal-sar" => Ok(ModelKind::GoalSar),
            "rnn" => Ok(ModelKind::Rnn),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }

    pub fn backbone(self) -> Backbone {
        match self {
            ModelKind::Sar | ModelKind::GoalSar => Backbone::Sar,
            ModelKind::Rnn => Backbone::Rnn,
            ModelKind::Lstm => Backbone::Lstm,
        }
    }

    pub fn goal_conditioned(self) -> bool {
        self != ModelKind::Sar
    }

    /// Builds a fresh forecaster. `sar.backbone` and `sar.fusion` are
    /// overridden by the kind and `fusion`.
    pub fn build(self, mut sar: SarConfig, fusion: FusionMode, unet: UnetConfig, raster: RasterConfig, seed: u64) -> Result<Forecaster> {
        sar.backbone = self.backbone();
        if self.goal_conditioned() {
            sar.fusion = Some(fusion);
            Forecaster::goal_conditioned(sar, unet, raster, seed)
        } else {
            sar.fusion = None;
            Forecaster::plain(sar, seed)
        }
    }
}

/// Anything that produces `k` candidate futures for a window, in world units.
pub trait Predictor: Sync {
    fn predict(&self, window: &TrajectoryWindow, scene: &Scene, k: usize, seed: u64) -> Result<Vec<Vec<Point2>>>;
}

/// Goal estimator plus the rasterization it was trained with.
#[derive(Debug, Clone)]
pub struct GoalModule {
    pub unet: UnetModel,
    pub raster: RasterConfig,
    /// Use the test-time sampling trick when more than one goal is needed.
    pub ttst: bool,
}

impl GoalModule {
    pub fn new(unet: UnetConfig, raster: RasterConfig, seed: u64) -> Result<Self> {
        raster.validate()?;
        Ok(GoalModule {
            unet: UnetModel::new(unet, seed)?,
            raster,
            ttst: true,
        })
    }

    pub fn probability_map(&self, window: &TrajectoryWindow, scene: &Scene) -> Result<ProbabilityMap> {
        let input = build_input_tensor(scene, window.observed(), &self.raster)?;
        self.unet.predict(&input, self.raster.downsample_factor)
    }

    /// `k` goals in world units, clamped to the raster.
    pub fn sample(&self, window: &TrajectoryWindow, scene: &Scene, k: usize, seed: u64) -> Result<Vec<Point2>> {
        let map = self.probability_map(window, scene)?;
        let px = sample_goals(&map, k, self.ttst, seed)?;
        let (w, h) = (scene.raster.width() as f64 - 1.0, scene.raster.height() as f64 - 1.0);
        Ok(px
            .goals
            .iter()
            .map(|g| scene.to_world(Point2::new(g.x.clamp(0.0, w), g.y.clamp(0.0, h))))
            .collect())
    }
}

/// A backbone, optionally conditioned on goals from a goal module.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub sar: SarModel,
    pub goal: Option<GoalModule>,
}

impl Forecaster {
    pub fn plain(cfg: SarConfig, seed: u64) -> Result<Self> {
        if cfg.fusion.is_some() {
            return Err(Error::Config("a goal-free forecaster cannot have a fusion mode".into()));
        }
        Ok(Forecaster {
            sar: SarModel::new(cfg, seed)?,
            goal: None,
        })
    }

    pub fn goal_conditioned(cfg: SarConfig, unet: UnetConfig, raster: RasterConfig, seed: u64) -> Result<Self> {
        if cfg.fusion.is_none() {
            return Err(Error::Config("a goal-conditioned forecaster needs a fusion mode".into()));
        }
        Ok(Forecaster {
            sar: SarModel::new(cfg, seed)?,
            goal: Some(GoalModule::new(unet, raster, seed.wrapping_add(1))?),
        })
    }

    pub fn is_goal_conditioned(&self) -> bool {
        self.goal.is_some()
    }

    /// One autoregressive rollout in world units, with an optional goal in
    /// world units.
    pub fn rollout_world(&self, window: &TrajectoryWindow, goal: Option<Point2>, noise_seed: u64) -> Result<Vec<Point2>> {
        let n = normalize_window(window);
        let goal = goal.map(|g| g - n.offset);
        let preds = self
            .sar
            .rollout(n.observed(), None, goal, &RolloutConfig::autoregressive(noise_seed))?;
        Ok(denormalize(&preds, n.offset))
    }

    /// Like [`Forecaster::rollout_world`] but with `z = 0`.
    pub fn rollout_world_mean(&self, window: &TrajectoryWindow, goal: Option<Point2>) -> Result<Vec<Point2>> {
        let n = normalize_window(window);
        let goal = goal.map(|g| g - n.offset);
        let cfg = RolloutConfig {
            mode: RolloutMode::Autoregressive,
            noise_seed: 0,
            steps: T_PRED,
            zero_noise: true,
        };
        let preds = self.sar.rollout(n.observed(), None, goal, &cfg)?;
        Ok(denormalize(&preds, n.offset))
    }
}

impl Predictor for Forecaster {
    /// Goal-conditioned: `k` sampled goals, one rollout each with its own
    /// noise. Goal-free: `k` rollouts with independent noise.
    fn predict(&self, window: &TrajectoryWindow, scene: &Scene, k: usize, seed: u64) -> Result<Vec<Vec<Point2>>> {
        let goals: Vec<Option<Point2>> = match &self.goal {
            Some(gm) => gm.sample(window, scene, k, seed)?.into_iter().map(Some).collect(),
            None => vec![None; k],
        };
        goals
            .iter()
            .enumerate()
            .map(|(i, &g)| self.rollout_world(window, g, derive_seed(seed, i as u64)))
            .collect()
    }
}

/// Extrapolates the last observed velocity.
pub fn constant_velocity(window: &TrajectoryWindow) -> Vec<Point2> {
    let obs = window.observed();
    let last = obs[obs.len() - 1];
    let v = if obs.len() >= 2 { last - obs[obs.len() - 2] } else { Point2::ZERO };
    (1..=window.t_pred).map(|i| last + v * i as f64).collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

impl Predictor for ConstantVelocity {
    fn predict(&self, window: &TrajectoryWindow, _scene: &Scene, k: usize, _seed: u64) -> Result<Vec<Vec<Point2>>> {
        Ok(vec![constant_velocity(window); k])
    }
}

/// Walks straight from the last observed position to each sampled goal,
/// ending exactly on it.
pub struct GoalSnapping<'a>(pub &'a GoalModule);

impl Predictor for GoalSnapping<'_> {
    fn predict(&self, window: &TrajectoryWindow, scene: &Scene, k: usize, seed: u64) -> Result<Vec<Vec<Point2>>> {
        let last = window.last_observed();
        let steps = window.t_pred;
        Ok(self
            .0
            .sample(window, scene, k, seed)?
            .into_iter()
            .map(|g| (1..=steps).map(|i| last + (g - last) * (i as f64 / steps as f64)).collect())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_examples() {
        let mut pts = vec![Point2::ZERO; 8];
        pts[7] = Point2::new(1.0, 0.0);
        pts.extend(vec![Point2::ZERO; 12]);
        let w = TrajectoryWindow::new("s", "a", pts);
        let cv = constant_velocity(&w);
        assert_eq!(cv.len(), 12);
        assert_eq!(cv[0], Point2::new(2.0, 0.0));
        assert_eq!(cv[11], Point2::new(13.0, 0.0));

        let still = TrajectoryWindow::new("s", "a", vec![Point2::new(3.0, 3.0); 20]);
        assert!(constant_velocity(&still).iter().all(|&p| p == Point2::new(3.0, 3.0)));

        let rot = std::f64::consts::FRAC_PI_3;
        let rotated = TrajectoryWindow::new("s", "a", w.positions.iter().map(|p| p.rotate(rot)).collect());
        for (a, b) in constant_velocity(&rotated).iter().zip(&cv) {
            assert!(a.dist(b.rotate(rot)) < 1e-12);
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
