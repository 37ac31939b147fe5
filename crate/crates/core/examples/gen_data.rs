//! Generates the toy dataset (4 training streets, 1 held-out street, all
//! four conditions) and prints its manifest.
//!
//! cargo run --example gen_data -- [config.json]

use std::path::{Path, PathBuf};

use ava_nvs::cli::{cmd_gen_data, RunConfig};

fn main() -> anyhow::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| root.join("configs/toy.json"));
    let config = RunConfig::load(&path)?;
    let manifest = cmd_gen_data(&config)?;
    println!(
        "{}x{} images, conditions {:?}, root {}",
        manifest.width,
        manifest.height,
        manifest.conditions,
        config.data_root().display()
    );
    for s in &manifest.scenes {
        println!("{:>10}  {:<5}  seed {:>20}  {} views", s.id, s.split.name(), s.seed, s.views);
    }
    Ok(())
}
