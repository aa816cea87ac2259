//! Train the goal-free backbone and compare it with constant velocity.

use goalsar::data::SceneSet;
use goalsar::dataset::SyntheticConfig;
use goalsar::eval::evaluate;
use goalsar::model::{ConstantVelocity, Forecaster};
use goalsar::sar::SarConfig;
use goalsar::train::{train, TrainConfig};

fn main() -> goalsar::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = SyntheticConfig { agents: 24, position_noise: 0.5, ..SyntheticConfig::default() };
    let train_set = SceneSet::synthetic(&cfg, 2, 8)?;
    let test_set = SceneSet::synthetic(&SyntheticConfig { seed: 99, scene_id: "held-out".into(), ..cfg }, 1, 20)?;

    let mut model = Forecaster::plain(SarConfig::default(), 0)?;
    let report = train(&mut model, &train_set, &TrainConfig::desk(epochs, 0), None)?;
    for e in report.curve.iter().step_by(epochs.div_ceil(5).max(1)) {
        println!("epoch {:3} loss {:.4}", e.epoch, e.traj_loss);
    }

    let sar = evaluate(&model, &test_set, 20, 0)?;
    let cv = evaluate(&ConstantVelocity, &test_set, 20, 0)?;
    println!("min20 ADE/FDE  sar {:.3}/{:.3}  constant velocity {:.3}/{:.3}", sar.mean_ade, sar.mean_fde, cv.mean_ade, cv.mean_fde);
    Ok(())
}
