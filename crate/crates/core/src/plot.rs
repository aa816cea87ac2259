//! PNG rendering of trajectories, probability maps and curves.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::dataset::Scene;
use crate::error::Result;
use crate::raster::ProbabilityMap;
use crate::trajectory::{Point2, TrajectoryWindow};

pub const OBSERVED: Rgb<u8> = Rgb([230, 200, 20]);
pub const GROUND_TRUTH: Rgb<u8> = Rgb([30, 180, 60]);
pub const PREDICTED: Rgb<u8> = Rgb([210, 40, 40]);
pub const GOAL: Rgb<u8> = Rgb([40, 90, 220]);

const CLASS_COLORS: [[u8; 3]; 6] = [
    [200, 200, 200],
    [170, 150, 110],
    [110, 110, 120],
    [90, 140, 80],
    [70, 70, 70],
    [30, 30, 30],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment.
pub fn draw_line(img: &mut RgbImage, a: Point2, b: Point2, c: Rgb<u8>) {
    if !a.is_finite() || !b.is_finite() {
        return;
    }
    let (mut x0, mut y0) = (a.x.round() as i64, a.y.round() as i64);
    let (x1, y1) = (b.x.round() as i64, b.y.round() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    let limit = 4 * (img.width() + img.height()) as i64;
    for _ in 0..=(dx.max(-dy)).min(limit) {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn draw_dot(img: &mut RgbImage, p: Point2, r: i64, c: Rgb<u8>) {
    if !p.is_finite() {
        return;
    }
    let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

fn draw_path(img: &mut RgbImage, pts: &[Point2], c: Rgb<u8>) {
    for w in pts.windows(2) {
        draw_line(img, w[0], w[1], c);
    }
    for &p in pts {
        draw_dot(img, p, 1, c);
    }
}

/// The scene raster at `scale` pixels per scene pixel.
pub fn scene_image(scene: &Scene, scale: u32) -> RgbImage {
    let r = &scene.raster;
    ImageBuffer::from_fn(r.width() as u32 * scale, r.height() as u32 * scale, |x, y| {
        let id = r.get((x / scale) as usize, (y / scale) as usize) as usize;
        Rgb(CLASS_COLORS[id.min(CLASS_COLORS.len() - 1)])
    })
}

/// Observed path in yellow, ground truth in green, predictions in red and
/// goals in blue, over the scene.
pub fn overlay(scene: &Scene, window: &TrajectoryWindow, preds: &[Vec<Point2>], goals: &[Point2], scale: u32) -> RgbImage {
    let mut img = scene_image(scene, scale);
    let s = scale as f64;
    let px = |p: &Point2| {
        let q = scene.to_pixel(*p);
        Point2::new((q.x + 0.5) * s, (q.y + 0.5) * s)
    };
    for p in preds {
        let mut path = vec![px(&window.last_observed())];
        path.extend(p.iter().map(px));
        draw_path(&mut img, &path, PREDICTED);
    }
    let mut gt = vec![px(&window.last_observed())];
    gt.extend(window.future().iter().map(px));
    draw_path(&mut img, &gt, GROUND_TRUTH);
    let obs: Vec<Point2> = window.observed().iter().map(px).collect();
    draw_path(&mut img, &obs, OBSERVED);
    for g in goals {
        draw_dot(&mut img, px(g), 2, GOAL);
    }
    img
}

/// Grey-scale rendering of a map, brightest at its maximum.
pub fn probability_image(map: &ProbabilityMap, scale: u32) -> RgbImage {
    let max = map.data.iter().cloned().fold(0.0, f64::max);
    ImageBuffer::from_fn(map.width as u32 * scale, map.height as u32 * scale, |x, y| {
        let v = map.get((x / scale) as usize, (y / scale) as usize);
        let g = if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 };
        Rgb([g, g, g])
    })
}

/// Line chart of several series on shared axes; no labels.
pub fn curves(series: &[(Rgb<u8>, Vec<(f64, f64)>)], width: u32, height: u32) -> RgbImage {
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([255, 255, 255]));
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return img;
    }
    y0 = y0.min(0.0);
    let (xr, yr) = ((x1 - x0).max(1e-12), (y1 - y0).max(1e-12));
    let m = 10.0;
    let (w, h) = (width as f64 - 2.0 * m, height as f64 - 2.0 * m);
    let map = |x: f64, y: f64| Point2::new(m + (x - x0) / xr * w, m + h - (y - y0) / yr * h);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, map(x0, y0), map(x1, y0), axis);
    draw_line(&mut img, map(x0, y0), map(x0, y1), axis);
    for (c, s) in series {
        let path: Vec<Point2> = s.iter().map(|&(x, y)| map(x, y)).collect();
        draw_path(&mut img, &path, *c);
    }
    img
}

/// Bar chart of bin counts.
pub fn histogram(counts: &[usize], width: u32, height: u32) -> RgbImage {
    let mut img = ImageBuffer::from_pixel(width, height, Rgb([255, 255, 255]));
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return img;
    }
    let bw = (width as f64 / counts.len() as f64).max(1.0);
    for (i, &c) in counts.iter().enumerate() {
        let top = height as f64 * (1.0 - c as f64 / max as f64);
        for x in (i as f64 * bw) as u32..(((i + 1) as f64 * bw) as u32).min(width) {
            for y in top as u32..height {
                img.put_pixel(x, y, PREDICTED);
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Affine, SemanticClass, SemanticRaster};

    #[test]
    fn overlay_colors_paths() {
        let scene = Scene::new("s", SemanticRaster::filled(40, 40, SemanticClass::Pavement), Affine::IDENTITY, 2.5).unwrap();
        let pts: Vec<Point2> = (0..20).map(|i| Point2::new(5.0 + i as f64, 10.0)).collect();
        let w = TrajectoryWindow::new("s", "a", pts);
        let pred: Vec<Point2> = (0..12).map(|i| Point2::new(13.0 + i as f64, 30.0)).collect();
        let img = overlay(&scene, &w, &[pred], &[], 2);
        assert_eq!(img.dimensions(), (80, 80));
        assert_eq!(*img.get_pixel(2 * 6 + 1, 21), OBSERVED);
        assert_eq!(*img.get_pixel(2 * 18 + 1, 21), GROUND_TRUTH);
        assert_eq!(*img.get_pixel(2 * 20 + 1, 61), PREDICTED);
    }

    #[test]
    fn lines_stay_in_bounds() {
        let mut img = RgbImage::new(10, 10);
        draw_line(&mut img, Point2::new(-50.0, -50.0), Point2::new(60.0, 60.0), PREDICTED);
        draw_line(&mut img, Point2::new(f64::NAN, 0.0), Point2::new(5.0, 5.0), PREDICTED);
        assert_eq!(*img.get_pixel(4, 4), PREDICTED);
        let c = curves(&[(PREDICTED, vec![(0.0, 1.0), (1.0, 3.0)])], 50, 40);
        assert_eq!(c.dimensions(), (50, 40));
        assert_eq!(histogram(&[1, 0, 3], 30, 10).dimensions(), (30, 10));
    }
}
