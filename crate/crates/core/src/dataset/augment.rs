use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{Scene, SemanticClass, SemanticRaster};
use crate::error::{Error, Result};
use crate::trajectory::{Point2, TrajectoryWindow};

/// Redraws allowed before a sample is passed through unchanged.
pub const AUGMENT_RETRY_CAP: usize = 10;

/// Random geometric augmentation ranges. Every transform is applied about
/// the raster center in pixel space.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Rotation drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    pub flip_x: f64,
    pub flip_y: f64,
    /// Translation drawn from `±translation * size` per axis.
    pub translation: f64,
    /// Shear angles drawn from `±shear_deg` per axis.
    pub shear_deg: f64,
    /// Projective terms drawn from `±perspective / max(w, h)`.
    pub perspective: f64,
    pub seed: u64,
}

impl AugmentParams {
    /// No-op augmentation.
    pub fn none() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            flip_x: 0.0,
            flip_y: 0.0,
            translation: 0.0,
            shear_deg: 0.0,
            perspective: 0.0,
            seed: 0,
        }
    }

    /// Rotations, flips, small translations, shears and perspective.
    pub fn standard(seed: u64) -> Self {
        AugmentParams {
            rotation_deg: 180.0,
            flip_x: 0.5,
            flip_y: 0.5,
            translation: 0.05,
            shear_deg: 5.0,
            perspective: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_x", self.flip_x), ("flip_y", self.flip_y)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("translation", self.translation),
            ("shear_deg", self.shear_deg),
            ("perspective", self.perspective),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.flip_x == 0.0
            && self.flip_y == 0.0
            && self.translation == 0.0
            && self.shear_deg == 0.0
            && self.perspective == 0.0
    }
}

/// Row-major 3x3 projective transform on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(t: Point2) -> Self {
        Homography([1.0, 0.0, t.x, 0.0, 1.0, t.y, 0.0, 0.0, 1.0])
    }

    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Homography([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])
    }

    /// `self` applied after `other`.
    pub fn then_after(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography(m)
    }

    /// Conjugates `self` so it acts about `center` instead of the origin.
    pub fn about(&self, center: Point2) -> Homography {
        Homography::translation(center)
            .then_after(self)
            .then_after(&Homography::translation(Point2::new(-center.x, -center.y)))
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = &self.0;
        let w = m[6] * p.x + m[7] * p.y + m[8];
        Point2::new((m[0] * p.x + m[1] * p.y + m[2]) / w, (m[3] * p.x + m[4] * p.y + m[5]) / w)
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.0;
        let cof = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let det = m[0] * cof[0] + m[1] * cof[3] + m[2] * cof[6];
        if det.abs() < 1e-12 {
            return None;
        }
        Some(Homography(cof.map(|v| v / det)))
    }
}

#[cfg(test)]
fn raster_center(r: &SemanticRaster) -> Point2 {
    Point2::new((r.width() as f64 - 1.0) / 2.0, (r.height() as f64 - 1.0) / 2.0)
}

/// Draws a random transform about the raster center.
pub fn sample_transform(params: &AugmentParams, width: usize, height: usize, rng: &mut impl Rng) -> Homography {
    let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let fx = if params.flip_x > 0.0 && rng.random_bool(params.flip_x) { -1.0 } else { 1.0 };
    let fy = if params.flip_y > 0.0 && rng.random_bool(params.flip_y) { -1.0 } else { 1.0 };
    let theta = sym(rng, params.rotation_deg).to_radians();
    let sx = sym(rng, params.shear_deg).to_radians().tan();
    let sy = sym(rng, params.shear_deg).to_radians().tan();
    let span = width.max(height) as f64;
    let px = sym(rng, params.perspective) / span;
    let py = sym(rng, params.perspective) / span;
    let tx = sym(rng, params.translation) * width as f64;
    let ty = sym(rng, params.translation) * height as f64;

    let flip = Homography([fx, 0.0, 0.0, 0.0, fy, 0.0, 0.0, 0.0, 1.0]);
    let shear = Homography([1.0, sx, 0.0, sy, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let persp = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0]);
    let center = Point2::new((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let local = persp.then_after(&shear).then_after(&Homography::rotation(theta)).then_after(&flip);
    Homography::translation(Point2::new(tx, ty)).then_after(&local.about(center))
}

/// Resamples a class raster through `h` with nearest-neighbour lookup;
/// cells mapping outside the source become `NotDefined`.
pub fn warp_raster(raster: &SemanticRaster, h: &Homography) -> SemanticRaster {
    let inv = h.inverse().expect("augmentation transforms are invertible");
    let (w, ht) = (raster.width(), raster.height());
    let mut data = Vec::with_capacity(w * ht);
    for y in 0..ht {
        for x in 0..w {
            let src = inv.apply(Point2::new(x as f64, y as f64));
            data.push(raster.class_at(src).unwrap_or(SemanticClass::NotDefined.id()));
        }
    }
    SemanticRaster::new(w, ht, data).expect("warped raster keeps its shape")
}

/// Applies a given pixel-space transform jointly to a window (in world
/// units) and the scene raster.
pub fn apply_transform(window: &TrajectoryWindow, scene: &Scene, h: &Homography) -> (TrajectoryWindow, SemanticRaster) {
    let positions = window
        .positions
        .iter()
        .map(|&p| scene.to_world(h.apply(scene.to_pixel(p))))
        .collect();
    (
        TrajectoryWindow {
            positions,
            ..window.clone()
        },
        warp_raster(&scene.raster, h),
    )
}

/// Randomly transforms a window and its scene raster with one shared
/// spatial transform. A draw that moves more than half of the window
/// outside the raster is redrawn up to [`AUGMENT_RETRY_CAP`] times, then the
/// sample is returned unchanged.
pub fn augment(window: &TrajectoryWindow, scene: &Scene, params: &AugmentParams) -> Result<(TrajectoryWindow, SemanticRaster)> {
    params.validate()?;
    if params.is_identity() {
        return Ok((window.clone(), scene.raster.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (w, h) = (scene.raster.width(), scene.raster.height());
    for _ in 0..AUGMENT_RETRY_CAP {
        let t = sample_transform(params, w, h, &mut rng);
        if t.inverse().is_none() {
            continue;
        }
        let outside = window
            .positions
            .iter()
            .filter(|&&p| !scene.raster.contains(t.apply(scene.to_pixel(p))))
            .count();
        if 2 * outside > window.positions.len() {
            continue;
        }
        return Ok(apply_transform(window, scene, &t));
    }
    Ok((window.clone(), scene.raster.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Affine;

    fn scene(w: usize, h: usize) -> Scene {
        let data = (0..w * h).map(|i| ((i / 7 + i % 5) % 6) as u8).collect();
        Scene::new("s", SemanticRaster::new(w, h, data).unwrap(), Affine::IDENTITY, 2.5).unwrap()
    }

    fn window() -> TrajectoryWindow {
        TrajectoryWindow::new("s", "a", (0..20).map(|i| Point2::new(10.0 + i as f64, 12.0 + 0.5 * i as f64)).collect())
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let s = scene(48, 40);
        let r = Homography::rotation(std::f64::consts::PI).about(raster_center(&s.raster));
        let (w1, r1) = apply_transform(&window(), &s, &r);
        let s1 = s.with_raster(r1);
        let (w2, r2) = apply_transform(&w1, &s1, &r);
        for (a, b) in w2.positions.iter().zip(&window().positions) {
            assert!(a.dist(*b) < 1e-6);
        }
        assert_eq!(r2, s.raster);
    }

    #[test]
    fn x_flip_mirrors_pixels() {
        let s = scene(48, 40);
        let params = AugmentParams {
            flip_x: 1.0,
            ..AugmentParams::none()
        };
        let (w, r) = augment(&window(), &s, &params).unwrap();
        for (a, b) in w.positions.iter().zip(&window().positions) {
            assert!((a.x - (47.0 - b.x)).abs() < 1e-12);
            assert!((a.y - b.y).abs() < 1e-12);
        }
        assert_eq!(r.get(0, 3), s.raster.get(47, 3));
    }

    #[test]
    fn zero_strength_is_identity() {
        let s = scene(32, 32);
        let (w, r) = augment(&window(), &s, &AugmentParams::none()).unwrap();
        assert_eq!(w, window());
        assert_eq!(r, s.raster);
    }

    #[test]
    fn deterministic_and_validated() {
        let s = scene(64, 64);
        let p = AugmentParams::standard(9);
        assert_eq!(augment(&window(), &s, &p).unwrap(), augment(&window(), &s, &p).unwrap());
        let bad = AugmentParams {
            flip_x: 1.5,
            ..AugmentParams::none()
        };
        assert!(augment(&window(), &s, &bad).is_err());
    }

    #[test]
    fn excessive_translation_falls_back_to_identity() {
        let s = scene(32, 32);
        let p = AugmentParams {
            translation: 50.0,
            seed: 1,
            ..AugmentParams::none()
        };
        // Shifts of up to 50 raster widths essentially never keep the window inside.
        let (w, _) = augment(&window(), &s, &p).unwrap();
        assert_eq!(w, window());
    }

    #[test]
    fn joint_transform_keeps_classes_under_points() {
        let s = scene(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..50 {
            let params = AugmentParams::standard(trial);
            let t = sample_transform(&params, 64, 64, &mut rng);
            let warped = warp_raster(&s.raster, &t);
            for _ in 0..40 {
                let p = Point2::new(rng.random_range(8.0..56.0), rng.random_range(8.0..56.0));
                let q = t.apply(p);
                let Some(found) = warped.class_at(q) else { continue };
                let near = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dx, dy))).any(|(dx, dy)| {
                    s.raster.class_at(Point2::new(p.x.round() + dx as f64, p.y.round() + dy as f64)) == Some(found)
                });
                assert!(near, "trial {trial}: class {found} at {q:?} not within 1px of {p:?}");
            }
        }
    }
}
