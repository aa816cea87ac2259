//! Train Goal-SAR jointly with its U-Net, evaluate with sampled goals,
//! plot predictions and round-trip a checkpoint.

use std::path::PathBuf;

use goalsar::checkpoint::{self, Manifest};
use goalsar::data::SceneSet;
use goalsar::dataset::SyntheticConfig;
use goalsar::eval::evaluate;
use goalsar::fusion::FusionMode;
use goalsar::model::Forecaster;
use goalsar::plot;
use goalsar::raster::RasterConfig;
use goalsar::sar::SarConfig;
use goalsar::train::{train, TrainConfig};
use goalsar::unet::UnetConfig;

fn main() -> goalsar::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("goalsar-goal-sar"));
    let epochs = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let cfg = SyntheticConfig { agents: 24, position_noise: 0.5, ..SyntheticConfig::default() };
    let train_set = SceneSet::synthetic(&cfg, 2, 8)?;
    let test_set = SceneSet::synthetic(&SyntheticConfig { seed: 99, scene_id: "held-out".into(), ..cfg }, 1, 20)?;

    let build = || {
        Forecaster::goal_conditioned(SarConfig::goal_sar(FusionMode::Skip), UnetConfig::desk(), RasterConfig::desk(64, 64, 4), 0)
    };
    let mut model = build()?;
    let report = train(&mut model, &train_set, &TrainConfig::desk(epochs, 0), Some(&test_set))?;
    let last = report.curve.last().expect("at least one epoch");
    println!("goal loss {:.4}, trajectory loss {:.4}", last.goal_loss, last.traj_loss);

    let eval = evaluate(&model, &test_set, 20, 0)?;
    println!("min20 ADE {:.3} FDE {:.3} over {} windows", eval.mean_ade, eval.mean_fde, eval.count());

    let s = &test_set.samples[0];
    let scene = test_set.scene_of(s);
    let gm = model.goal.as_ref().expect("goal module");
    let goals = gm.sample(&s.window, scene, 20, 0)?;
    let preds = goals
        .iter()
        .enumerate()
        .map(|(i, g)| model.rollout_world(&s.window, Some(*g), i as u64))
        .collect::<goalsar::Result<Vec<_>>>()?;
    plot::save_png(&plot::overlay(scene, &s.window, &preds, &goals, 4), &out.join("overlay.png"))?;

    let manifest = Manifest::new(vec![("model".into(), "goal_sar".into()), ("fusion".into(), "skip".into())], 0);
    let dir = out.join("checkpoint");
    checkpoint::save(&dir, &model, &manifest)?;
    let restored = checkpoint::load(&dir, &manifest, build)?;
    let again = evaluate(&restored, &test_set, 20, 0)?;
    println!("restored checkpoint reproduces ADE: {}", again.mean_ade == eval.mean_ade);
    println!("wrote {}", out.display());
    Ok(())
}
