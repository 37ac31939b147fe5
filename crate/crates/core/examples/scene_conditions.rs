//! Renders one procedural street under every condition and writes a
//! contact sheet (rows: conditions, columns: views 0, 4, 9).
//!
//! cargo run --example scene_conditions -- out/sheet.png [width height seed]

use ava_nvs::scenegen::{generate_scene, render_scene, ConditionParams, Region};
use ava_nvs::Image;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map(String::as_str).unwrap_or("scene_conditions.png");
    let width: usize = args.get(1).map_or(Ok(128), |s| s.parse())?;
    let height: usize = args.get(2).map_or(Ok(96), |s| s.parse())?;
    let seed: u64 = args.get(3).map_or(Ok(0), |s| s.parse())?;

    let spec = generate_scene(seed, Region::Train);
    println!("scene {seed}: {} primitives, first camera at z = {:.1}", spec.primitives.len(), spec.origin_z);
    let views = [0, 4, 9];
    let conditions = ConditionParams::all();
    let mut sheet = Image::new(width * views.len(), height * conditions.len());
    for (row, cond) in conditions.iter().enumerate() {
        let rendered = render_scene(&spec, cond, width, height)?;
        for (col, v) in views.iter().enumerate() {
            let im = &rendered.images[*v];
            for y in 0..height {
                for x in 0..width {
                    sheet.set_pixel(col * width + x, row * height + y, im.pixel(x, y));
                }
            }
        }
        let mean: f32 = rendered.images[0].data().iter().sum::<f32>() / rendered.images[0].data().len() as f32;
        println!("{:>8}: mean intensity {mean:.3}", cond.name);
    }
    sheet.save_png(std::path::Path::new(out))?;
    println!("wrote {out}");
    Ok(())
}
