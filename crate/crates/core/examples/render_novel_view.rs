//! Renders a held-out pose of the evaluation street from day sources,
//! once with each condition's code, and writes a strip next to the
//! ground truth. Trains the toy model first if no checkpoint exists.
//!
//! cargo run --example render_novel_view -- [pose]

use std::path::Path;

use ava_nvs::cli::{cmd_gen_data, cmd_train, load_split, render_pose, RunConfig};
use ava_nvs::metrics::psnr;
use ava_nvs::nvsnet::Renderer;
use ava_nvs::scenegen::Region;
use ava_nvs::Image;

fn main() -> anyhow::Result<()> {
    std::env::set_current_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../.."))?;
    let config = RunConfig::load(Path::new("configs/toy.json"))?;
    let pose: usize = std::env::args().nth(1).map_or(Ok(config.render.pose), |s| s.parse())?;
    if !config.data_root().join("manifest.json").is_file() {
        cmd_gen_data(&config)?;
    }
    if !config.checkpoint_path().is_file() {
        cmd_train(&config, None)?;
    }
    let (renderer, _) = Renderer::<f32>::load(&config.checkpoint_path())?;
    let scene = &load_split(&config, Region::Eval)?[0];
    let conds: Vec<String> = renderer.registry.names().iter().map(|s| s.to_string()).collect();
    let codes = conds.iter().map(|c| renderer.code(c)).collect::<Result<Vec<_>, _>>()?;
    let src = &config.render.source_condition;
    let renders = render_pose(&renderer, scene, src, pose, config.render.sources, &codes, 256)?;

    let (w, h) = scene.size();
    let mut strip = Image::new(w * conds.len(), h * 2);
    for (i, (c, img)) in conds.iter().zip(&renders).enumerate() {
        let gt = &scene.images(c)?[pose];
        println!("{src} -> {c:<8} psnr {:6.2} dB", psnr(img, gt)?);
        for y in 0..h {
            for x in 0..w {
                strip.set_pixel(i * w + x, y, img.pixel(x, y));
                strip.set_pixel(i * w + x, h + y, gt.pixel(x, y));
            }
        }
    }
    let out = config.output_dir.join(format!("novel_view_{}_{pose}.png", scene.id));
    std::fs::create_dir_all(&config.output_dir)?;
    strip.save_png(&out)?;
    println!("wrote {} (top: renders, bottom: ground truth)", out.display());
    Ok(())
}
