//! Compares reverse-mode gradients of the full training loss against
//! central differences, for a few coordinates of every parameter tensor
//! of a small double-precision model.
//!
//! cargo run --example gradient_check -- [structured|free]

use ava_nvs::applat::{LatentMode, CONDITIONS};
use ava_nvs::diffcore::{grad_check_inputs, Bound, Tensor};
use ava_nvs::nvsnet::{ModelConfig, RenderOptions, Renderer};
use ava_nvs::scenegen::{Region, SceneBundle};
use ava_nvs::trainer::{sample_training_rays, step_graph};
use rand::{Rng, SeedableRng};

fn main() -> anyhow::Result<()> {
    let mode = match std::env::args().nth(1).as_deref() {
        None | Some("structured") => LatentMode::Structured,
        Some("free") => LatentMode::Free,
        Some(other) => anyhow::bail!("unknown latent mode {other:?}"),
    };
    let conditions: Vec<String> = CONDITIONS.iter().map(|s| s.to_string()).collect();
    let scene = SceneBundle::generate("check", 3, Region::Train, &conditions, 32, 24)?;
    let config = ModelConfig {
        d_token: 8,
        heads: 2,
        blocks: 1,
        samples: 6,
        latent_dim: 5,
        ffn_hidden: 12,
        rgb_hidden: 8,
        pe_freqs: 2,
        latent_mode: mode,
        ..ModelConfig::default()
    };
    let mut renderer = Renderer::<f64>::new(config, 1)?;
    // a fresh model ignores the code; perturb its injection weights so the
    // latent parameters receive gradient
    let id = renderer.store.find("fz.w").expect("code injection weights");
    let mut w = renderer.store.get(id).clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    w.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    renderer.store.set(id, w)?;
    let batch = sample_training_rays(&scene, "evening", "night", 4, 2, &renderer.config, 2)?;
    let inputs: Vec<Tensor<f64>> = renderer.store.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<&str> = renderer.store.iter().map(|(n, _)| n).collect();

    let loss = |g: &mut _, vars: &[_]| {
        let bound = Bound::from_vars(vars.to_vec());
        Ok(step_graph(&renderer, g, &bound, &scene, &batch, (1.0, 1.0), RenderOptions::default())?.total)
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        let coords: Vec<(usize, usize)> = [0, n / 2, n - 1].iter().map(|&j| (i, j)).collect();
        let report = grad_check_inputs(loss, &inputs, 1e-5, Some(&coords))?;
        println!("{:<28} {:>6} values  max rel err {:.2e}", names[i], n, report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    println!("{mode:?} latents: worst relative error {worst:.2e} over {} tensors", inputs.len());
    Ok(())
}
