//! Goal sampling from probability maps and weighted k-means.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::ProbabilityMap;
use crate::trajectory::Point2;

/// Draws taken before clustering in the test-time sampling trick.
pub const TTST_DRAWS: usize = 10_000;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_TOL: f64 = 1e-6;

/// Where sampled goals are placed inside their cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleResolution {
    /// Cell centers on the down-sampled grid.
    #[default]
    Grid,
    /// A uniformly drawn full-resolution pixel inside the cell.
    Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalSamples {
    /// Full-resolution pixel coordinates.
    pub goals: Vec<Point2>,
}

impl GoalSamples {
    pub fn to_text(&self) -> String {
        self.goals.iter().map(|g| format!("{} {}\n", g.x, g.y)).collect()
    }
}

/// Divides map values by their sum.
pub fn normalize_map(map: &ProbabilityMap) -> Result<Vec<f64>> {
    if map.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("map values must be finite and non-negative".into()));
    }
    let total: f64 = map.data.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateMap);
    }
    Ok(map.data.iter().map(|v| v / total).collect())
}

fn cell_point(map: &ProbabilityMap, idx: usize, res: SampleResolution, rng: &mut ChaCha8Rng) -> Point2 {
    let (u, v) = (idx % map.width, idx / map.width);
    match res {
        SampleResolution::Grid => map.cell_center_px(u, v),
        SampleResolution::Pixel => {
            let d = map.downsample_factor;
            Point2::new((u * d + rng.random_range(0..d)) as f64, (v * d + rng.random_range(0..d)) as f64)
        }
    }
}

/// Samples `k` goals. With `ttst` and `k > 1`, 10,000 draws are clustered
/// into `k` centers; without it the `k` draws are returned directly.
/// `k == 1` returns the most likely cell.
pub fn sample_goals(map: &ProbabilityMap, k: usize, ttst: bool, seed: u64) -> Result<GoalSamples> {
    sample_goals_at(map, k, ttst, seed, SampleResolution::Grid)
}

pub fn sample_goals_at(map: &ProbabilityMap, k: usize, ttst: bool, seed: u64, res: SampleResolution) -> Result<GoalSamples> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let dist = normalize_map(map)?;
    if k == 1 {
        let (u, v) = map.argmax();
        return Ok(GoalSamples {
            goals: vec![map.cell_center_px(u, v)],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = WeightedIndex::new(&dist).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if !ttst {
        let goals = (0..k)
            .map(|_| {
                let i = index.sample(&mut rng);
                cell_point(map, i, res, &mut rng)
            })
            .collect();
        return Ok(GoalSamples { goals });
    }
    let mut counts: Vec<(Point2, f64)> = Vec::new();
    match res {
        SampleResolution::Grid => {
            let mut per_cell = vec![0usize; dist.len()];
            for _ in 0..TTST_DRAWS {
                per_cell[index.sample(&mut rng)] += 1;
            }
            for (i, &c) in per_cell.iter().enumerate() {
                if c > 0 {
                    counts.push((map.cell_center_px(i % map.width, i / map.width), c as f64));
                }
            }
        }
        SampleResolution::Pixel => {
            let mut pts: Vec<Point2> = (0..TTST_DRAWS)
                .map(|_| {
                    let i = index.sample(&mut rng);
                    cell_point(map, i, res, &mut rng)
                })
                .collect();
            pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
            for p in pts {
                match counts.last_mut() {
                    Some((q, c)) if *q == p => *c += 1.0,
                    _ => counts.push((p, 1.0)),
                }
            }
        }
    }
    let (points, weights): (Vec<Point2>, Vec<f64>) = counts.into_iter().unzip();
    let goals = weighted_kmeans(&points, &weights, k, rng.random())?;
    Ok(GoalSamples { goals })
}

/// Lloyd's algorithm from a k-means++ start.
pub fn kmeans(points: &[Point2], k: usize, seed: u64) -> Result<Vec<Point2>> {
    weighted_kmeans(points, &vec![1.0; points.len()], k, seed)
}

fn sq(a: Point2, b: Point2) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y
}

fn nearest(centers: &[Point2], p: Point2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &c) in centers.iter().enumerate() {
        let d = sq(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Weighted sum of squared distances to the nearest center.
pub fn kmeans_objective(points: &[Point2], weights: &[f64], centers: &[Point2]) -> f64 {
    points.iter().zip(weights).map(|(&p, &w)| w * nearest(centers, p).1).sum()
}

/// k-means on weighted points. When fewer than `k` distinct points exist,
/// every distinct point becomes a center and the remainder repeat the
/// heaviest points.
pub fn weighted_kmeans(points: &[Point2], weights: &[f64], k: usize, seed: u64) -> Result<Vec<Point2>> {
    if points.is_empty() {
        return Err(Error::Empty("k-means over no points".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if weights.len() != points.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidArgument("weights must be positive, one per point".into()));
    }
    let mut distinct: Vec<(Point2, f64)> = Vec::new();
    for (&p, &w) in points.iter().zip(weights) {
        match distinct.iter_mut().find(|(q, _)| *q == p) {
            Some((_, acc)) => *acc += w,
            None => distinct.push((p, w)),
        }
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() <= k {
        let mut by_weight = distinct.clone();
        by_weight.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut centers: Vec<Point2> = distinct.iter().map(|d| d.0).collect();
        let mut i = 0;
        while centers.len() < k {
            centers.push(by_weight[i % by_weight.len()].0);
            i += 1;
        }
        return Ok(centers);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<Point2>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let centers = lloyd(points, weights, k, &mut rng)?;
        let obj = kmeans_objective(points, weights, &centers);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, centers));
        }
    }
    Ok(best.map(|b| b.1).unwrap_or_default())
}

/// One k-means++ seeding followed by Lloyd iterations.
fn lloyd(points: &[Point2], weights: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Point2>> {
    let first = WeightedIndex::new(weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut centers = vec![points[first.sample(rng)]];
    let mut d2: Vec<f64> = points.iter().map(|&p| sq(p, centers[0])).collect();
    while centers.len() < k {
        let score: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let next = match WeightedIndex::new(&score) {
            Ok(ix) => points[ix.sample(rng)],
            Err(_) => points[rng.random_range(0..points.len())],
        };
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, next));
        }
        centers.push(next);
    }

    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![(0.0, 0.0, 0.0); k];
        for (&p, &w) in points.iter().zip(weights) {
            let (j, _) = nearest(&centers, p);
            sums[j].0 += w * p.x;
            sums[j].1 += w * p.y;
            sums[j].2 += w;
        }
        let mut moved: f64 = 0.0;
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0.0 {
                let n = Point2::new(s.0 / s.2, s.1 / s.2);
                moved = moved.max(n.dist(*c));
                *c = n;
            }
        }
        if moved < KMEANS_TOL {
            break;
        }
    }
    Ok(centers)
}
