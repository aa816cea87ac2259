//! Load a flat key-value run configuration and apply overrides.

use goalsar::config::RunConfig;

fn main() -> goalsar::Result<()> {
    let text = "model = sar\nsar.d_model = 64\n# short run\ntrain.epochs = 3\neval.k = 5\n";
    let mut cfg = RunConfig::from_text(text)?;
    cfg.set("fusion", "late")?;
    cfg.validate()?;
    println!("{:?} with {} epochs, checkpoint at {}", cfg.model, cfg.training()?.epochs, cfg.checkpoint_dir().display());
    match RunConfig::from_text("sar.heads = 7\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    print!("{}", cfg.to_text());
    Ok(())
}
