//! Build the trajectory-on-scene tensor and the ground-truth goal map.

use goalsar::data::SceneSet;
use goalsar::dataset::{SyntheticConfig, NUM_CLASSES};
use goalsar::plot;
use goalsar::raster::{build_input_tensor, gt_goal_map, scene_grid, RasterConfig};

fn main() -> goalsar::Result<()> {
    let set = SceneSet::synthetic(&SyntheticConfig::default(), 1, 8)?;
    let sample = &set.samples[0];
    let scene = set.scene_of(sample);
    let cfg = RasterConfig::desk(scene.raster.width(), scene.raster.height(), 2);

    let input = build_input_tensor(scene, sample.window.observed(), &cfg)?;
    println!("grid {:?}, tensor shape {:?}", scene_grid(scene, &cfg), input.tensor.shape());
    let last = input.channel(NUM_CLASSES + 7);
    let peak = last.iter().cloned().fold(0.0, f64::max);
    println!("last observation channel peak {peak:.3}");

    let goal = gt_goal_map(sample.window.final_position(), scene, &cfg)?;
    println!("goal map argmax cell {:?}", goal.argmax());
    let path = std::env::temp_dir().join("goalsar-goal-map.png");
    plot::save_png(&plot::probability_image(&goal, 8), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
