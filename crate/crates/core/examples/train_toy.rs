//! Trains the toy model in memory and prints a smoothed loss curve, then
//! saves the checkpoint used by the rendering examples.
//!
//! cargo run --example train_toy -- [iterations]

use std::path::Path;

use ava_nvs::cli::{load_split, RunConfig};
use ava_nvs::scenegen::Region;
use ava_nvs::trainer::{smooth, Trainer};

fn main() -> anyhow::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    std::env::set_current_dir(&root)?;
    let mut config = RunConfig::load(Path::new("configs/toy.json"))?;
    if let Some(n) = std::env::args().nth(1) {
        config.train.iterations = n.parse()?;
    }
    if !config.data_root().join("manifest.json").is_file() {
        ava_nvs::cli::cmd_gen_data(&config)?;
    }
    let data = load_split(&config, Region::Train)?;
    let mut trainer = Trainer::from_scratch(config.model.clone(), config.train_config())?;
    let start = std::time::Instant::now();
    let rows = trainer.run(&data, None, |_| Ok(()))?;
    let totals: Vec<f64> = rows.iter().map(|r| r.total).collect();
    let smoothed = smooth(&totals, 25);
    let every = (rows.len() / 10).max(1);
    for (r, s) in rows.iter().zip(&smoothed).step_by(every) {
        println!("{:>6}  rec {:.5}  app {:.5}  smoothed total {:.5}", r.iteration, r.l_rec, r.l_app, s);
    }
    println!("{} iterations in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    let out = config.checkpoint_path();
    std::fs::create_dir_all(&config.output_dir)?;
    trainer.save(&out)?;
    println!("saved {}", out.display());
    Ok(())
}
