//! Generate a cross-junction scene, write it to disk and render it.

use std::path::PathBuf;

use goalsar::data::SceneSet;
use goalsar::dataset::{gen_synthetic, PathFamily, SyntheticConfig};
use goalsar::plot;

fn main() -> goalsar::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("goalsar-synthetic"));
    let cfg = SyntheticConfig { agents: 12, family: PathFamily::Mixed, seed: 7, ..SyntheticConfig::default() };
    let (scene, tracks) = gen_synthetic(&cfg)?;
    println!("scene {} with {} classes, {} tracks", scene.scene_id, scene.raster.distinct_classes(), tracks.len());

    SceneSet::save_raw(&[(scene.clone(), tracks)], &out)?;
    plot::save_png(&plot::scene_image(&scene, 4), &out.join("scene.png"))?;

    let set = SceneSet::synthetic(&cfg, 2, 4)?;
    println!("{} windows over {:?}, mean step {:.2} px", set.len(), set.scene_ids(), set.mean_step_length());
    println!("wrote {}", out.display());
    Ok(())
}
