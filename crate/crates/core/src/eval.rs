//! Min-of-K metrics, evaluation reports and goal ablations.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::SceneSet;
use crate::error::{Error, Result};
use crate::model::{Forecaster, GoalModule, Predictor};
use crate::trajectory::Point2;

/// Min-K ADE and FDE of `preds` against `gt`. Each minimum is taken over
/// samples independently of the other.
pub fn min_k_ade_fde(preds: &[Vec<Point2>], gt: &[Point2]) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("need at least one predicted sample".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty ground truth".into()));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for p in preds {
        if p.len() != gt.len() {
            return Err(Error::Shape(format!("prediction of length {} vs ground truth {}", p.len(), gt.len())));
        }
        let ade = p.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / gt.len() as f64;
        let fde = p[p.len() - 1].dist(gt[gt.len() - 1]);
        best.0 = best.0.min(ade);
        best.1 = best.1.min(fde);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryResult {
    pub trajectory_id: String,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub per_trajectory: Vec<TrajectoryResult>,
    pub mean_ade: f64,
    pub mean_fde: f64,
    pub stride: usize,
    pub unit: String,
}

impl EvalReport {
    pub fn count(&self) -> usize {
        self.per_trajectory.len()
    }

    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "trajectories = {}", self.count());
        let _ = writeln!(s, "min_ade = {}", self.mean_ade);
        let _ = writeln!(s, "min_fde = {}", self.mean_fde);
        let _ = writeln!(s, "window_stride = {}", self.stride);
        let _ = writeln!(s, "unit = {}", self.unit);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory_id,ade,fde\n");
        for r in &self.per_trajectory {
            let _ = writeln!(s, "{},{},{}", r.trajectory_id, r.ade, r.fde);
        }
        s
    }
}

fn trajectory_id(set: &SceneSet, idx: usize) -> String {
    let w = &set.samples[idx].window;
    format!("{idx}:{}:{}", w.scene_id, w.agent_id)
}

fn report(set: &SceneSet, k: usize, seed: u64, per: Vec<(f64, f64)>) -> EvalReport {
    let n = per.len() as f64;
    let mean_ade = per.iter().map(|r| r.0).sum::<f64>() / n;
    let mean_fde = per.iter().map(|r| r.1).sum::<f64>() / n;
    EvalReport {
        k,
        seed,
        per_trajectory: per
            .into_iter()
            .enumerate()
            .map(|(i, (ade, fde))| TrajectoryResult {
                trajectory_id: trajectory_id(set, i),
                ade,
                fde,
            })
            .collect(),
        mean_ade,
        mean_fde,
        stride: set.stride,
        unit: set.unit.clone(),
    }
}

fn eval_one<P: Predictor + ?Sized>(predictor: &P, set: &SceneSet, k: usize, seed: u64, i: usize) -> Result<(f64, f64)> {
    let s = &set.samples[i];
    let preds = predictor.predict(&s.window, set.scene_of(s), k, seed.wrapping_add(i as u64))?;
    if preds.len() != k {
        return Err(Error::Shape(format!("predictor returned {} samples, expected {k}", preds.len())));
    }
    min_k_ade_fde(&preds, s.window.future())
}

/// Min-K evaluation over every sample, parallel across trajectories.
/// Trajectory `i` uses seed `seed + i`.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, set: &SceneSet, k: usize, seed: u64) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set has no trajectories".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let per = (0..set.len())
        .into_par_iter()
        .map(|i| eval_one(predictor, set, k, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(set, k, seed, per))
}

/// [`evaluate`] on the calling thread only.
pub fn evaluate_serial<P: Predictor + ?Sized>(predictor: &P, set: &SceneSet, k: usize, seed: u64) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set has no trajectories".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let per = (0..set.len())
        .map(|i| eval_one(predictor, set, k, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(set, k, seed, per))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePoint {
    pub sigma: f64,
    pub ade_mean: f64,
    pub ade_std: f64,
    pub fde_mean: f64,
    pub fde_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAblationCurve {
    pub points: Vec<NoisePoint>,
}

impl NoiseAblationCurve {
    pub fn sigmas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.sigma).collect()
    }

    pub fn fde(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.fde_mean).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,ade_mean,ade_std,fde_mean,fde_std\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{},{}", p.sigma, p.ade_mean, p.ade_std, p.fde_mean, p.fde_std);
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Single-sample ADE and FDE when the backbone is handed ground-truth goals
/// perturbed by isotropic Gaussian noise of `sigma` full-resolution pixels.
/// Trajectory `i` draws one unit noise vector and one latent from seed
/// `seed + i`, reused across every sigma.
pub fn ablate_goal_noise(model: &Forecaster, set: &SceneSet, sigmas: &[f64], seed: u64) -> Result<NoiseAblationCurve> {
    if !model.is_goal_conditioned() {
        return Err(Error::InvalidArgument("goal-noise ablation needs a goal-conditioned model".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {s}")));
    }
    if set.is_empty() {
        return Err(Error::Empty("ablation set has no trajectories".into()));
    }
    let unit: Vec<Point2> = (0..set.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            Point2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
        })
        .collect();
    let mut points = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let per = (0..set.len())
            .into_par_iter()
            .map(|i| {
                let s = &set.samples[i];
                let scene = set.scene_of(s);
                let gt = s.window.final_position();
                let goal = scene.to_world(scene.to_pixel(gt) + unit[i] * sigma);
                let pred = model.rollout_world(&s.window, Some(goal), seed.wrapping_add(i as u64))?;
                min_k_ade_fde(&[pred], s.window.future())
            })
            .collect::<Result<Vec<_>>>()?;
        let (ade_mean, ade_std) = mean_std(&per.iter().map(|r| r.0).collect::<Vec<_>>());
        let (fde_mean, fde_std) = mean_std(&per.iter().map(|r| r.1).collect::<Vec<_>>());
        points.push(NoisePoint {
            sigma,
            ade_mean,
            ade_std,
            fde_mean,
            fde_std,
        });
    }
    Ok(NoiseAblationCurve { points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalFdeHistogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub per_trajectory: Vec<f64>,
    pub mean: f64,
}

impl GoalFdeHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{c}", i as f64 * self.bin_width, (i + 1) as f64 * self.bin_width);
        }
        s
    }
}

/// Distance from the closest of `k` sampled goals to the true final
/// position, per trajectory, binned by `bin_width` world units. Goals for
/// trajectory `i` are sampled with seed `seed + i`.
pub fn goal_fde_distribution(goal: &GoalModule, set: &SceneSet, k: usize, seed: u64, bin_width: f64) -> Result<GoalFdeHistogram> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument("bin width must be > 0".into()));
    }
    if set.is_empty() {
        return Err(Error::Empty("no trajectories".into()));
    }
    let per = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let s = &set.samples[i];
            let gt = s.window.final_position();
            let goals = goal.sample(&s.window, set.scene_of(s), k, seed.wrapping_add(i as u64))?;
            Ok(goals.iter().map(|g| g.dist(gt)).fold(f64::INFINITY, f64::min))
        })
        .collect::<Result<Vec<f64>>>()?;
    let bins = per.iter().map(|d| (d / bin_width) as usize).max().unwrap_or(0) + 1;
    let mut counts = vec![0; bins];
    for d in &per {
        counts[(d / bin_width) as usize] += 1;
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok(GoalFdeHistogram {
        bin_width,
        counts,
        per_trajectory: per,
        mean,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("need two equal-length series of at least 2 values".into()));
    }
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &t in &idx[i..=j] {
                r[t] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
