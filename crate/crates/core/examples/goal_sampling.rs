//! Draw 20 goals from a probability map, with and without clustering.

use goalsar::dataset::{Affine, Scene, SemanticClass, SemanticRaster};
use goalsar::raster::{gt_goal_map, RasterConfig};
use goalsar::sampling::sample_goals;
use goalsar::trajectory::Point2;

fn main() -> goalsar::Result<()> {
    let scene = Scene::new("demo", SemanticRaster::filled(64, 64, SemanticClass::Pavement), Affine::IDENTITY, 2.5)?;
    let cfg = RasterConfig::desk(64, 64, 2);
    let map = gt_goal_map(Point2::new(40.0, 20.0), &scene, &cfg)?;

    let plain = sample_goals(&map, 20, false, 0)?;
    let clustered = sample_goals(&map, 20, true, 0)?;
    let spread = |g: &[Point2]| g.iter().map(|p| p.dist(Point2::new(40.0, 20.0))).sum::<f64>() / g.len() as f64;
    println!("mean distance to mode: plain {:.2} px, clustered {:.2} px", spread(&plain.goals), spread(&clustered.goals));
    print!("{}", clustered.to_text());
    Ok(())
}
