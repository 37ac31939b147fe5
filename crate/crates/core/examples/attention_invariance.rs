//! Shows that the rendered color of a ray does not depend on the order in
//! which source views are supplied, and reports how the rendering block
//! spreads its attention over the ray's samples.
//!
//! cargo run --example attention_invariance -- [seed]

use ava_nvs::applat::CONDITIONS;
use ava_nvs::nvsnet::{ModelConfig, RenderOptions, Renderer, SourceView};
use ava_nvs::scenegen::{Region, SceneBundle};
use ava_nvs::trainer::nearest_sources;

fn main() -> anyhow::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let conditions: Vec<String> = CONDITIONS.iter().map(|s| s.to_string()).collect();
    let scene = SceneBundle::generate("perm", seed, Region::Train, &conditions, 32, 24)?;
    let config = ModelConfig {
        d_token: 16,
        samples: 8,
        ..ModelConfig::default()
    };
    let renderer = Renderer::<f32>::new(config, seed)?;
    let target = 5;
    let src = nearest_sources(&scene.cameras, target, 4);
    let images = scene.images("day")?;
    let views = |order: &[usize]| -> Vec<SourceView<'_>> {
        order
            .iter()
            .map(|&i| SourceView {
                image: &images[src[i]],
                camera: &scene.cameras[src[i]],
            })
            .collect()
    };
    let z = renderer.code("night")?;
    let cam = &scene.cameras[target];
    let c = &renderer.config;
    let ray = cam.pixel_center_ray(16, 12, c.near, c.far)?;
    let opts = RenderOptions::default();
    let (base, maps) = renderer.render_ray(&ray, &views(&[0, 1, 2, 3]), &z, opts)?;
    println!("sources {src:?}, color {base:.5?}");
    for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        let (rgb, _) = renderer.render_ray(&ray, &views(&order), &z, opts)?;
        let diff = (0..3).map(|k| (rgb[k] - base[k]).abs()).fold(0.0, f64::max);
        println!("order {order:?}: max channel difference {diff:.2e}");
    }
    let last = maps.last().expect("rendering block attention");
    for h in 0..last.heads {
        let row = last.row(0, h, 0);
        let (peak, w) = row.iter().enumerate().fold((0, 0.0f32), |a, (i, &w)| if w > a.1 { (i, w) } else { a });
        let entropy: f32 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        println!("rendering head {h}: peak at sample {peak}/{} (weight {w:.3}), entropy {entropy:.3}", last.lk);
    }
    Ok(())
}
