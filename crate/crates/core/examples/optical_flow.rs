//! Estimates dense flow between two views of a street and between an
//! image and a shifted copy of itself, then scores temporal consistency
//! of a sequence against a noisy copy.
//!
//! cargo run --example optical_flow -- [shift]

use ava_nvs::applat::CONDITIONS;
use ava_nvs::metrics::{consistency, optical_flow, DEFAULT_LEVELS, DEFAULT_PATCH};
use ava_nvs::scenegen::{Region, SceneBundle};
use ava_nvs::Image;
use rand::{Rng, SeedableRng};

fn shifted(img: &Image, dx: usize) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(x, y, img.pixel(x.saturating_sub(dx), y));
        }
    }
    out
}

fn main() -> anyhow::Result<()> {
    let shift: usize = std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?;
    let conditions: Vec<String> = CONDITIONS.iter().map(|s| s.to_string()).collect();
    let scene = SceneBundle::generate("flow", 4, Region::Eval, &conditions, 96, 72)?;
    let day = scene.images("day")?;

    let f = optical_flow(&day[2], &shifted(&day[2], shift), DEFAULT_LEVELS, DEFAULT_PATCH)?;
    let mut u: Vec<f64> = f.data.iter().map(|v| v[0]).collect();
    u.sort_by(f64::total_cmp);
    println!("synthetic {shift}px shift: median horizontal flow {:.2}", u[u.len() / 2]);

    let f = optical_flow(&day[2], &day[3], DEFAULT_LEVELS, DEFAULT_PATCH)?;
    let mean = f.data.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / f.data.len() as f64;
    println!("consecutive street views: mean flow magnitude {mean:.2}px");

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0f32, 0.02, 0.08] {
        let noisy: Vec<Image> = day
            .iter()
            .map(|im| {
                let mut n = im.clone();
                n.data_mut().iter_mut().for_each(|v| *v = (*v + sigma * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0));
                n
            })
            .collect();
        let (tof, tss) = consistency(&noisy, day)?;
        println!("noise {sigma:.2}: tOF {tof:.4}  tSS {tss:.4}");
    }
    Ok(())
}
