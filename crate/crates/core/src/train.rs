//! Joint optimization of the goal module and the backbone.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Sample, SceneSet};
use crate::dataset::{augment, AugmentParams};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::fusion::training_goal;
use crate::model::{derive_seed, Forecaster};
use crate::nn::{Adam, Grads, ParamStore};
use crate::raster::{build_input_tensor, gt_goal_map};
use crate::trajectory::normalize_window;

/// `L_goal + lambda * L_traj`.
pub fn total_loss(goal_loss: f64, traj_loss: f64, lambda: f64) -> f64 {
    goal_loss + lambda * traj_loss
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    /// Both modules every step.
    #[default]
    Joint,
    /// The goal module for `epochs` epochs, then the backbone for `epochs`.
    Sequential,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "sequential" => Ok(TrainMode::Sequential),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` disables augmentation.
    pub augment: Option<AugmentParams>,
    pub seed: u64,
    pub mode: TrainMode,
    /// Validation frequency in epochs when a validation set is given.
    pub val_every: usize,
    pub val_k: usize,
    /// Where the offending batch is written when a loss goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-6,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 500,
            augment: Some(AugmentParams::standard(0)),
            seed: 0,
            mode: TrainMode::Joint,
            val_every: 10,
            val_k: 20,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings for CPU-scale runs on synthetic scenes.
    pub fn desk(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            lambda: 1.0,
            learning_rate: 3e-3,
            epochs,
            augment: None,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.val_every == 0 || self.val_k == 0 {
            return Err(Error::Config("batch size, epochs, val_every and val_k must be >= 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub goal_loss: f64,
    pub traj_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub steps: usize,
    /// Epoch whose parameters were kept; the last one without validation.
    pub best_epoch: usize,
    pub best_val_ade: Option<f64>,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,goal_loss,traj_loss,total\n");
        for e in &self.curve {
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.goal_loss, e.traj_loss, e.total);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Phase {
    goal: bool,
    traj: bool,
}

struct SampleGrads {
    goal: Option<(f64, Grads)>,
    traj: Option<(f64, Grads)>,
}

fn sample_grads(model: &Forecaster, set: &SceneSet, s: &Sample, aug: Option<AugmentParams>, z_seed: u64, phase: Phase) -> Result<SampleGrads> {
    let scene = set.scene_of(s);
    let (window, scene) = match aug {
        Some(p) => {
            let (w, r) = augment(&s.window, scene, &p)?;
            (w, scene.with_raster(r))
        }
        None => (s.window.clone(), scene.clone()),
    };
    let goal = match (&model.goal, phase.goal) {
        (Some(gm), true) => {
            let input = build_input_tensor(&scene, window.observed(), &gm.raster)?;
            let target = gt_goal_map(window.final_position(), &scene, &gm.raster)?;
            Some(gm.unet.goal_loss_grads(&input, &target)?)
        }
        _ => None,
    };
    let traj = if phase.traj {
        let n = normalize_window(&window);
        let g = model.is_goal_conditioned().then(|| training_goal(&window));
        let z = model.sar.sample_noise(z_seed);
        Some(model.sar.traj_loss_grads(n.observed(), n.future(), g, &z)?)
    } else {
        None
    };
    Ok(SampleGrads { goal, traj })
}

fn mean_grads(parts: impl Iterator<Item = (f64, Grads)>, n_params: usize, count: usize) -> (f64, Grads) {
    let mut acc = Grads::new(n_params);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        acc.merge(&g);
    }
    acc.scale(1.0 / count as f64);
    (loss / count as f64, acc)
}

fn dump_batch(cfg: &TrainConfig, set: &SceneSet, batch: &[usize], epoch: usize, index: usize) {
    let mut text = String::new();
    for &i in batch {
        let w = &set.samples[i].window;
        let _ = write!(text, "{} {}", w.scene_id, w.agent_id);
        for p in &w.positions {
            let _ = write!(text, " {} {}", p.x, p.y);
        }
        text.push('\n');
    }
    log::error!("non-finite loss at epoch {epoch}, batch {index}:\n{text}");
    if let Some(dir) = &cfg.dump_dir {
        let path = dir.join("nonfinite_batch.txt");
        if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, &text)) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
}

struct Optimizers {
    sar: Adam,
    goal: Adam,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Forecaster,
    set: &SceneSet,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    phase: Phase,
    epoch: usize,
    steps: &mut usize,
) -> Result<EpochLoss> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64)));
    let (mut goal_sum, mut traj_sum, mut n_batches) = (0.0, 0.0, 0usize);
    for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
        let base = (epoch * set.len() + b * cfg.batch_size) as u64;
        let results = {
            let m: &Forecaster = model;
            batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let stream = base + j as u64;
                    let aug = cfg.augment.as_ref().map(|a| AugmentParams {
                        seed: derive_seed(a.seed ^ cfg.seed, stream),
                        ..*a
                    });
                    sample_grads(m, set, &set.samples[i], aug, derive_seed(cfg.seed.wrapping_add(1), stream), phase)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let mut goal_parts = Vec::new();
        let mut traj_parts = Vec::new();
        for r in results {
            if let Some(g) = r.goal {
                goal_parts.push(g);
            }
            if let Some(t) = r.traj {
                traj_parts.push(t);
            }
        }
        let goal = (!goal_parts.is_empty()).then(|| {
            let n = goal_parts.len();
            let len = model.goal.as_ref().map_or(0, |g| g.unet.store().len());
            mean_grads(goal_parts.into_iter(), len, n)
        });
        let traj = (!traj_parts.is_empty()).then(|| {
            let n = traj_parts.len();
            mean_grads(traj_parts.into_iter(), model.sar.store().len(), n)
        });
        let gl = goal.as_ref().map_or(0.0, |g| g.0);
        let tl = traj.as_ref().map_or(0.0, |t| t.0);
        let finite = gl.is_finite()
            && tl.is_finite()
            && goal.as_ref().is_none_or(|g| g.1.is_finite())
            && traj.as_ref().is_none_or(|t| t.1.is_finite());
        if !finite {
            dump_batch(cfg, set, batch, epoch, b);
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                goal_loss: gl,
                traj_loss: tl,
            });
        }
        if let (Some((_, g)), Some(gm)) = (&goal, model.goal.as_mut()) {
            opt.goal.step(gm.unet.store_mut(), g);
        }
        if let Some((_, mut t)) = traj {
            t.scale(cfg.lambda);
            opt.sar.step(model.sar.store_mut(), &t);
        }
        *steps += 1;
        goal_sum += gl;
        traj_sum += tl;
        n_batches += 1;
    }
    let goal_loss = goal_sum / n_batches as f64;
    let traj_loss = traj_sum / n_batches as f64;
    Ok(EpochLoss {
        epoch,
        goal_loss,
        traj_loss,
        total: total_loss(goal_loss, traj_loss, cfg.lambda),
    })
}

fn snapshot(model: &Forecaster) -> (ParamStore, Option<ParamStore>) {
    (model.sar.store().clone(), model.goal.as_ref().map(|g| g.unet.store().clone()))
}

fn restore(model: &mut Forecaster, snap: (ParamStore, Option<ParamStore>)) {
    *model.sar.store_mut() = snap.0;
    if let (Some(gm), Some(s)) = (model.goal.as_mut(), snap.1) {
        *gm.unet.store_mut() = s;
    }
}

/// Trains `model` on `train` in place. With a validation set, the
/// parameters with the lowest validation min-K ADE are kept.
pub fn train(model: &mut Forecaster, train: &SceneSet, cfg: &TrainConfig, val: Option<&SceneSet>) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split has no windows".into()));
    }
    let val = val.filter(|v| !v.is_empty());
    let mut opt = Optimizers {
        sar: Adam::new(cfg.learning_rate),
        goal: Adam::new(cfg.learning_rate),
    };
    let phases: Vec<Phase> = match cfg.mode {
        TrainMode::Joint => vec![Phase { goal: true, traj: true }; cfg.epochs],
        TrainMode::Sequential if model.is_goal_conditioned() => {
            let mut p = vec![Phase { goal: true, traj: false }; cfg.epochs];
            p.extend(vec![Phase { goal: false, traj: true }; cfg.epochs]);
            p
        }
        TrainMode::Sequential => vec![Phase { goal: false, traj: true }; cfg.epochs],
    };
    let last = phases.len() - 1;
    let mut curve = Vec::with_capacity(phases.len());
    let mut steps = 0;
    let mut best: Option<(f64, usize, (ParamStore, Option<ParamStore>))> = None;
    for (epoch, &phase) in phases.iter().enumerate() {
        let e = run_epoch(model, train, cfg, &mut opt, phase, epoch, &mut steps)?;
        log::info!(
            "epoch {epoch}: goal {:.6} traj {:.6} total {:.6}",
            e.goal_loss,
            e.traj_loss,
            e.total
        );
        curve.push(e);
        if let Some(v) = val {
            if (epoch + 1) % cfg.val_every == 0 || epoch == last {
                let ade = evaluate(&*model, v, cfg.val_k, cfg.seed)?.mean_ade;
                log::info!("epoch {epoch}: validation min-{} ADE {ade:.4}", cfg.val_k);
                if best.as_ref().is_none_or(|b| ade < b.0) {
                    best = Some((ade, epoch, snapshot(model)));
                }
            }
        }
    }
    let (best_epoch, best_val_ade) = match best {
        Some((ade, epoch, snap)) => {
            restore(model, snap);
            (epoch, Some(ade))
        }
        None => (last, None),
    };
    Ok(TrainReport {
        curve,
        steps,
        best_epoch,
        best_val_ade,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SyntheticConfig;
    use crate::sar::SarConfig;

    fn small_set(agents: usize) -> SceneSet {
        let cfg = SyntheticConfig {
            agents,
            ..SyntheticConfig::default()
        };
        SceneSet::synthetic(&cfg, 1, 20).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.5, 100.0, 1e-6) - 0.5001).abs() < 1e-15);
        assert_eq!(total_loss(0.7, 3.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 5.0), 0.0);
    }

    #[test]
    fn one_batch_is_one_step() {
        let set = small_set(64).truncated(32);
        assert_eq!(set.len(), 32);
        let mut m = Forecaster::plain(SarConfig::default(), 0).unwrap();
        let r = train(&mut m, &set, &TrainConfig::desk(1, 0), None).unwrap();
        assert_eq!(r.steps, 1);
        assert_eq!(r.curve.len(), 1);
    }

    #[test]
    fn identical_seeds_identical_parameters() {
        let set = small_set(8);
        let cfg = TrainConfig {
            batch_size: 4,
            augment: Some(AugmentParams::standard(3)),
            ..TrainConfig::desk(2, 9)
        };
        let mut a = Forecaster::plain(SarConfig::default(), 1).unwrap();
        let mut b = a.clone();
        train(&mut a, &set, &cfg, None).unwrap();
        train(&mut b, &set, &cfg, None).unwrap();
        for id in a.sar.store().ids() {
            assert_eq!(a.sar.store().get(id).data(), b.sar.store().get(id).data());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let set = small_set(4);
        let mut m = Forecaster::plain(SarConfig::default(), 0).unwrap();
        for cfg in [
            TrainConfig { batch_size: 0, ..TrainConfig::desk(1, 0) },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::desk(1, 0) },
            TrainConfig { lambda: f64::NAN, ..TrainConfig::desk(1, 0) },
        ] {
            assert!(train(&mut m, &set, &cfg, None).is_err());
        }
        assert!(train(&mut m, &SceneSet::default(), &TrainConfig::desk(1, 0), None).is_err());
    }
}
