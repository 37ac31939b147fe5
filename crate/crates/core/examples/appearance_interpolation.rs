//! Blends the day and night codes in latent space and renders the same
//! held-out view at each blend weight. Trains the toy model first if no
//! checkpoint exists.
//!
//! cargo run --example appearance_interpolation -- [steps]

use std::path::Path;

use ava_nvs::cli::{cmd_gen_data, cmd_interp, cmd_train, RunConfig};
use ava_nvs::Image;

fn main() -> anyhow::Result<()> {
    std::env::set_current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))?;
    let mut config = RunConfig::load(Path::new("configs/toy.json"))?;
    if let Some(s) = std::env::args().nth(1) {
        config.interp.steps = s.parse()?;
    }
    if !config.data_root().join("manifest.json").is_file() {
        cmd_gen_data(&config)?;
    }
    if !config.checkpoint_path().is_file() {
        cmd_train(&config, None)?;
    }
    let frames = cmd_interp(&config, &config.checkpoint_path(), None)?;
    let n = frames.len();
    for (i, f) in frames.iter().enumerate() {
        let img = Image::load_png(f)?;
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
        let alpha = i as f64 / (n - 1) as f64;
        println!("alpha {alpha:.2} ({} {:.0}%)  mean intensity {mean:.3}  {}", config.interp.cond_a, alpha * 100.0, f.display());
    }
    Ok(())
}
