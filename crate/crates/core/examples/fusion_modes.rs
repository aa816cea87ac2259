//! Attention and decoder widths under each way of injecting goal features.

use goalsar::fusion::{fusion_widths, goal_features, FusionMode};
use goalsar::sar::SarConfig;
use goalsar::trajectory::Point2;

fn main() -> goalsar::Result<()> {
    let f = goal_features(Point2::new(0.0, 0.0), Point2::new(3.0, 4.0), 8);
    println!("features {f:?}");
    let base = SarConfig::default();
    println!("plain: {:?}", fusion_widths(None, base.d_model, base.z_dim, base.goal_dim));
    for mode in [FusionMode::Early, FusionMode::Late, FusionMode::Skip] {
        let cfg = SarConfig::goal_sar(mode);
        cfg.validate()?;
        println!("{:5}: (attention, decoder) = {:?}", mode.name(), cfg.widths());
    }
    Ok(())
}
