//! Sensitivity of a trained Goal-SAR to perturbed ground-truth goals.

use goalsar::data::SceneSet;
use goalsar::dataset::SyntheticConfig;
use goalsar::eval::{ablate_goal_noise, spearman};
use goalsar::fusion::FusionMode;
use goalsar::model::Forecaster;
use goalsar::raster::RasterConfig;
use goalsar::sar::SarConfig;
use goalsar::train::{train, TrainConfig};
use goalsar::unet::UnetConfig;

fn main() -> goalsar::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = SyntheticConfig { agents: 24, position_noise: 0.5, ..SyntheticConfig::default() };
    let train_set = SceneSet::synthetic(&cfg, 2, 8)?;
    let test_set = SceneSet::synthetic(&SyntheticConfig { seed: 99, scene_id: "held-out".into(), ..cfg }, 1, 20)?;

    let mut model = Forecaster::goal_conditioned(SarConfig::goal_sar(FusionMode::Skip), UnetConfig::desk(), RasterConfig::desk(64, 64, 8), 0)?;
    train(&mut model, &train_set, &TrainConfig::desk(epochs, 0), None)?;

    let sigmas = [0.0, 10.0, 25.0, 50.0, 100.0];
    let curve = ablate_goal_noise(&model, &test_set, &sigmas, 0)?;
    print!("{}", curve.to_csv());
    println!("spearman(sigma, fde) = {:.2}", spearman(&curve.sigmas(), &curve.fde())?);
    Ok(())
}
