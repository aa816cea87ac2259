//! Gaussian heat-maps on the down-sampled grid and the trajectory-on-scene
//! input tensor.
//!
//! Cell `(u, v)` of a grid with down-sampling factor `d` is centered on the
//! full-resolution pixel `(u d + (d - 1) / 2, v d + (d - 1) / 2)`.

use crate::dataset::{Scene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::trajectory::{Point2, T_OBS};

/// Channels of the input tensor: one-hot classes then observation maps.
pub const INPUT_CHANNELS: usize = NUM_CLASSES + T_OBS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    /// Gaussian standard deviation in full-resolution pixels.
    pub sigma_s: f64,
    pub downsample_factor: usize,
    /// Peak value 1 when true; otherwise the map sums to 1 over the grid.
    pub peak_normalize: bool,
}

impl RasterConfig {
    /// Desk preset: one sixteenth of the shorter down-sampled side.
    pub fn desk(width: usize, height: usize, downsample_factor: usize) -> Self {
        let (w, h) = grid_dims(width, height, downsample_factor);
        RasterConfig {
            sigma_s: (w.min(h) as f64 / 16.0).max(0.5) * downsample_factor as f64,
            downsample_factor,
            peak_normalize: true,
        }
    }

    /// `sigma_s = min(H, W)` in full-resolution pixels.
    pub fn literal(width: usize, height: usize, downsample_factor: usize) -> Self {
        RasterConfig {
            sigma_s: width.min(height) as f64,
            downsample_factor,
            peak_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s > 0.0) || !self.sigma_s.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma_s must be > 0, got {}", self.sigma_s)));
        }
        if self.downsample_factor == 0 {
            return Err(Error::InvalidArgument("downsample_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Standard deviation in grid cells.
    pub fn sigma_cells(&self) -> f64 {
        self.sigma_s / self.downsample_factor as f64
    }
}

/// `(ceil(W / d), ceil(H / d))`.
pub fn grid_dims(width: usize, height: usize, d: usize) -> (usize, usize) {
    (width.div_ceil(d), height.div_ceil(d))
}

/// Full-resolution pixel coordinate to fractional grid cell.
pub fn pixel_to_cell(p: Point2, d: usize) -> Point2 {
    let half = (d as f64 - 1.0) / 2.0;
    Point2::new((p.x - half) / d as f64, (p.y - half) / d as f64)
}

/// Grid cell center to full-resolution pixel coordinate.
pub fn cell_to_pixel(c: Point2, d: usize) -> Point2 {
    let half = (d as f64 - 1.0) / 2.0;
    Point2::new(c.x * d as f64 + half, c.y * d as f64 + half)
}

/// Down-sampled grid of values in `[0, 1]`, row-major `[height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub downsample_factor: usize,
    pub data: Vec<f64>,
    /// Set when the generating center lies more than 3 sigma outside the grid.
    pub off_grid: bool,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, downsample_factor: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!("{} values for a {width}x{height} map", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("map value {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap {
            width,
            height,
            downsample_factor,
            data,
            off_grid: false,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    /// First cell holding the maximum value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn cell_center_px(&self, u: usize, v: usize) -> Point2 {
        cell_to_pixel(Point2::new(u as f64, v as f64), self.downsample_factor)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone())
    }

    /// Whitespace-separated dump, one grid row per line.
    pub fn to_text(&self) -> String {
        self.data
            .chunks(self.width)
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Gaussian bump centered on a full-resolution pixel, evaluated at the
/// cell centers of a `w x h` grid.
pub fn rasterize_gaussian(center_px: Point2, cfg: &RasterConfig, w: usize, h: usize) -> Result<ProbabilityMap> {
    cfg.validate()?;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument(format!("grid must be non-empty, got {w}x{h}")));
    }
    let c = pixel_to_cell(center_px, cfg.downsample_factor);
    let sigma = cfg.sigma_cells();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut data = Vec::with_capacity(w * h);
    for v in 0..h {
        let dy = v as f64 - c.y;
        for u in 0..w {
            let dx = u as f64 - c.x;
            data.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    if !cfg.peak_normalize {
        let total: f64 = data.iter().sum();
        if total > 0.0 {
            data.iter_mut().for_each(|v| *v /= total);
        }
    }
    let gap_x = (-c.x).max(c.x - (w as f64 - 1.0)).max(0.0);
    let gap_y = (-c.y).max(c.y - (h as f64 - 1.0)).max(0.0);
    let off_grid = gap_x.hypot(gap_y) > 3.0 * sigma;
    if off_grid {
        log::debug!("gaussian center {center_px:?} lies more than 3 sigma outside the {w}x{h} grid");
    }
    Ok(ProbabilityMap {
        width: w,
        height: h,
        downsample_factor: cfg.downsample_factor,
        data,
        off_grid,
    })
}

/// `[14, H', W']` trajectory-on-scene tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub width: usize,
    pub height: usize,
    pub tensor: Tensor,
}

impl InputTensor {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.tensor.data()[c * n..(c + 1) * n]
    }
}

/// Grid size of a scene under `cfg`.
pub fn scene_grid(scene: &Scene, cfg: &RasterConfig) -> (usize, usize) {
    grid_dims(scene.raster.width(), scene.raster.height(), cfg.downsample_factor)
}

/// One-hot class planes of the down-sampled raster (nearest pixel to each
/// cell center) followed by one Gaussian map per observed position.
pub fn build_input_tensor(scene: &Scene, observed: &[Point2], cfg: &RasterConfig) -> Result<InputTensor> {
    cfg.validate()?;
    if observed.len() != T_OBS {
        return Err(Error::Shape(format!("expected {T_OBS} observed points, got {}", observed.len())));
    }
    let d = cfg.downsample_factor;
    let (w, h) = scene_grid(scene, cfg);
    let n = w * h;
    let mut data = vec![0.0; INPUT_CHANNELS * n];
    let (rw, rh) = (scene.raster.width(), scene.raster.height());
    for v in 0..h {
        for u in 0..w {
            let p = cell_to_pixel(Point2::new(u as f64, v as f64), d);
            let x = (p.x.round() as usize).min(rw - 1);
            let y = (p.y.round() as usize).min(rh - 1);
            let class = scene.raster.get(x, y) as usize;
            data[class * n + v * w + u] = 1.0;
        }
    }
    for (t, &p) in observed.iter().enumerate() {
        let map = rasterize_gaussian(scene.to_pixel(p), cfg, w, h)?;
        data[(NUM_CLASSES + t) * n..(NUM_CLASSES + t + 1) * n].copy_from_slice(&map.data);
    }
    Ok(InputTensor {
        width: w,
        height: h,
        tensor: Tensor::new(vec![INPUT_CHANNELS, h, w], data),
    })
}

/// Target map for a ground-truth goal given in world units.
pub fn gt_goal_map(goal_world: Point2, scene: &Scene, cfg: &RasterConfig) -> Result<ProbabilityMap> {
    let (w, h) = scene_grid(scene, cfg);
    rasterize_gaussian(scene.to_pixel(goal_world), cfg, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Affine, SemanticClass, SemanticRaster};
    use proptest::prelude::*;

    fn unit(sigma: f64) -> RasterConfig {
        RasterConfig {
            sigma_s: sigma,
            downsample_factor: 1,
            peak_normalize: true,
        }
    }

    fn scene(w: usize, h: usize, class: SemanticClass) -> Scene {
        Scene::new("s", SemanticRaster::filled(w, h, class), Affine::IDENTITY, 2.5).unwrap()
    }

    #[test]
    fn gaussian_examples() {
        let m = rasterize_gaussian(Point2::new(2.0, 2.0), &unit(1.0), 5, 5).unwrap();
        assert_eq!(m.get(2, 2), 1.0);
        assert!((m.get(3, 2) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(m.get(3, 2), m.get(1, 2));
        let flat = rasterize_gaussian(Point2::new(2.0, 2.0), &unit(1e6), 5, 5).unwrap();
        assert!(flat.data.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn sum_normalized_variant() {
        let cfg = RasterConfig {
            peak_normalize: false,
            ..unit(1.5)
        };
        let m = rasterize_gaussian(Point2::new(4.0, 3.0), &cfg, 9, 7).unwrap();
        assert!((m.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn input_tensor_examples() {
        let s = scene(64, 48, SemanticClass::Road);
        let cfg = RasterConfig {
            sigma_s: 8.0,
            downsample_factor: 8,
            peak_normalize: true,
        };
        let obs = vec![Point2::new(20.0, 20.0); 8];
        let t = build_input_tensor(&s, &obs, &cfg).unwrap();
        assert_eq!(t.tensor.shape(), &[14, 6, 8]);
        for c in 0..NUM_CLASSES {
            let expected = if c == SemanticClass::Road.id() as usize { 1.0 } else { 0.0 };
            assert!(t.channel(c).iter().all(|&v| v == expected));
        }
        for c in NUM_CLASSES + 1..INPUT_CHANNELS {
            assert_eq!(t.channel(c), t.channel(NUM_CLASSES));
        }
        assert!(build_input_tensor(&s, &obs[..7], &cfg).is_err());
    }

    #[test]
    fn goal_maps() {
        let s = scene(65, 65, SemanticClass::Pavement);
        let cfg = unit(3.0);
        let m = gt_goal_map(Point2::new(32.0, 32.0), &s, &cfg).unwrap();
        assert_eq!(m.argmax(), (32, 32));

        let a = gt_goal_map(Point2::new(10.0, 20.0), &s, &cfg).unwrap();
        let b = gt_goal_map(Point2::new(54.0, 20.0), &s, &cfg).unwrap();
        for v in 0..65 {
            for u in 0..65 {
                assert!((a.get(u, v) - b.get(64 - u, v)).abs() < 1e-15);
            }
        }

        let beyond = 3.0 * 3.0;
        let off = gt_goal_map(Point2::new(-beyond, 32.0), &s, &cfg).unwrap();
        let max = off.data.iter().cloned().fold(0.0, f64::max);
        let expected = (-(beyond * beyond) / (2.0 * 9.0f64)).exp();
        assert!((max - expected).abs() < 1e-15);
        assert_eq!(off.argmax(), (0, 32));
    }

    #[test]
    fn off_grid_flag() {
        let m = rasterize_gaussian(Point2::new(-100.0, 0.0), &unit(1.0), 4, 4).unwrap();
        assert!(m.off_grid);
        assert!(m.data.iter().all(|&v| v < 1e-100));
    }

    #[test]
    fn presets() {
        let d = RasterConfig::desk(64, 64, 4);
        assert_eq!(d.sigma_cells(), 1.0);
        assert_eq!(RasterConfig::literal(64, 48, 4).sigma_s, 48.0);
    }

    proptest! {
        #[test]
        fn semantic_channels_one_hot(seed in any::<u64>(), d in 1usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
            let data = (0..w * h).map(|_| rng.random_range(0..6u8)).collect();
            let s = Scene::new("s", SemanticRaster::new(w, h, data).unwrap(), Affine::IDENTITY, 2.5).unwrap();
            let cfg = RasterConfig { sigma_s: 2.0, downsample_factor: d, peak_normalize: true };
            let t = build_input_tensor(&s, &[Point2::new(3.0, 4.0); 8], &cfg).unwrap();
            let n = t.width * t.height;
            for i in 0..n {
                let total: f64 = (0..NUM_CLASSES).map(|c| t.channel(c)[i]).sum();
                prop_assert_eq!(total, 1.0);
            }
            for c in NUM_CLASSES..INPUT_CHANNELS {
                prop_assert!(t.channel(c).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn peak_at_rounded_center(cx in 0.0f64..19.0, cy in 0.0f64..14.0, sigma in 0.3f64..5.0) {
            let m = rasterize_gaussian(Point2::new(cx, cy), &unit(sigma), 20, 15).unwrap();
            let (u, v) = m.argmax();
            prop_assert!((u as f64 - cx).abs() <= 0.5 + 1e-9);
            prop_assert!((v as f64 - cy).abs() <= 0.5 + 1e-9);
        }

        #[test]
        fn monotone_decay(cx in 0.0f64..30.0, cy in 0.0f64..30.0, sigma in 0.5f64..6.0) {
            let m = rasterize_gaussian(Point2::new(cx, cy), &unit(sigma), 31, 31).unwrap();
            let mut cells: Vec<(f64, f64)> = (0..31 * 31)
                .map(|i| (Point2::new((i % 31) as f64, (i / 31) as f64).dist(Point2::new(cx, cy)), m.data[i]))
                .collect();
            cells.sort_by(|a, b| a.0.total_cmp(&b.0));
            for pair in cells.windows(2) {
                if pair[1].0 > pair[0].0 + 1e-9 {
                    prop_assert!(pair[1].1 <= pair[0].1);
                }
            }
        }

        #[test]
        fn downsampling_consistency(px in 0.0f64..127.0, py in 0.0f64..127.0) {
            let peak = |d: usize| {
                let cfg = RasterConfig { sigma_s: 8.0, downsample_factor: d, peak_normalize: true };
                let (w, h) = grid_dims(128, 128, d);
                let m = rasterize_gaussian(Point2::new(px, py), &cfg, w, h).unwrap();
                let (u, v) = m.argmax();
                m.cell_center_px(u, v)
            };
            let (a, b) = (peak(4), peak(8));
            prop_assert!((a.x - b.x).abs() <= 5.0 && (a.y - b.y).abs() <= 5.0);
        }
    }
}
