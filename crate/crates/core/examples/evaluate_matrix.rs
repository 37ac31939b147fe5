//! Scores the toy model on the held-out street: the source × target
//! PSNR/SSIM matrix against the no-transfer baseline, and temporal
//! consistency. Trains the toy model first if no checkpoint exists.
//!
//! cargo run --example evaluate_matrix

use std::path::Path;

use ava_nvs::cli::{cmd_eval, cmd_gen_data, cmd_train, RunConfig};

fn main() -> anyhow::Result<()> {
    std::env::set_current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))?;
    let config = RunConfig::load(Path::new("configs/toy.json"))?;
    if !config.data_root().join("manifest.json").is_file() {
        cmd_gen_data(&config)?;
    }
    if !config.checkpoint_path().is_file() {
        cmd_train(&config, None)?;
    }
    let report = cmd_eval(&config, &config.checkpoint_path(), None)?;
    print!("{}", report.markdown());
    let gain = report.off_diagonal_mean(|c| c.psnr - c.baseline_psnr);
    println!("\nmean off-diagonal gain over baseline: {gain:+.2} dB");
    println!("tables written to {}", config.output_dir.display());
    Ok(())
}
