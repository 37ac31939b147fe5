//! Joint optimization of the reconstruction and appearance-transfer losses.
//!
//! Each iteration draws a scene, a source condition `c` and a different
//! target condition `c′`, a target pose and a pixel batch. The batch is
//! rendered twice from sources in `c` through shared geometry: with `z_c`
//! against the condition-`c` target image, and with `z_c′` against the
//! condition-`c′` image of the same pose.

mod optim;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Graph, Real, Tensor, Var};
use crate::error::{bail_input, Error, Result};
use crate::geomcam::{Camera, Ray};
use crate::nvsnet::{ModelConfig, Record, RenderOptions, Renderer};
use crate::scenegen::SceneBundle;
use crate::{seed, Image};

pub use optim::{cosine_lr, Adam};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_step: usize,
    pub lr: f64,
    /// Learning rate reached at the final iteration by cosine decay.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Source views per target (`N`).
    pub sources: usize,
    /// Conditions drawn for `c` and `c′`; empty means every registered one.
    pub conditions: Vec<String>,
    /// Set from the run's master seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub w_rec: f64,
    pub w_app: f64,
    /// Checkpoint period in iterations; `0` disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_step: 32,
            lr: 5e-4,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            sources: 4,
            conditions: Vec::new(),
            seed: 0,
            w_rec: 1.0,
            w_app: 1.0,
            checkpoint_every: 1000,
            stratified: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 || self.sources == 0 {
            bail_input!("rays_per_step and sources must be at least 1");
        }
        if !(self.w_rec > 0.0 && self.w_app > 0.0) {
            bail_input!("loss weights must be positive");
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            bail_input!("learning rates must satisfy 0 <= lr_min <= lr, lr > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            bail_input!("invalid Adam hyperparameters");
        }
        if !(self.grad_clip >= 0.0) {
            bail_input!("grad_clip must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_app: f64,
    pub total: f64,
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l_rec: f64,
    pub l_app: f64,
    pub total: f64,
}

/// Pixel rays of one target pose with ground truth in both conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub target: usize,
    /// Source pose indices, nearest first; never contains `target`.
    pub sources: Vec<usize>,
    pub condition: String,
    pub target_condition: String,
    pub pixels: Vec<(usize, usize)>,
    pub rays: Vec<Ray>,
    /// Target image colors in `condition`.
    pub gt: Vec<[f32; 3]>,
    /// Target image colors in `target_condition`.
    pub gt_target: Vec<[f32; 3]>,
}

/// Indices of the `n` poses nearest to `target` by camera-center distance.
pub fn nearest_sources(cameras: &[Camera], target: usize, n: usize) -> Vec<usize> {
    let c = cameras[target].center();
    let mut others: Vec<(f64, usize)> = cameras
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, cam)| ((cam.center() - c).norm(), i))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Picks a target pose, its `sources` nearest poses and `n` uniformly drawn
/// pixels of the target.
pub fn sample_training_rays(
    scene: &SceneBundle,
    condition: &str,
    target_condition: &str,
    n: usize,
    sources: usize,
    model: &ModelConfig,
    rng_seed: u64,
) -> Result<RayBatch> {
    let img_c = scene.images(condition)?;
    let img_t = scene.images(target_condition)?;
    if scene.views() < 2 {
        bail_input!("scene {} needs at least 2 poses", scene.id);
    }
    if n == 0 || sources == 0 {
        bail_input!("ray and source counts must be positive");
    }
    let mut rng = seed::rng(rng_seed);
    let target = rng.gen_range(0..scene.views());
    let src = nearest_sources(&scene.cameras, target, sources);
    let cam = &scene.cameras[target];
    let (w, h) = (cam.width(), cam.height());
    let mut batch = RayBatch {
        target,
        sources: src,
        condition: condition.to_string(),
        target_condition: target_condition.to_string(),
        pixels: Vec::with_capacity(n),
        rays: Vec::with_capacity(n),
        gt: Vec::with_capacity(n),
        gt_target: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        batch.pixels.push((x, y));
        batch.rays.push(cam.pixel_center_ray(x, y, model.near, model.far)?);
        batch.gt.push(img_c[target].pixel(x, y));
        batch.gt_target.push(img_t[target].pixel(x, y));
    }
    Ok(batch)
}

fn color_tensor<T: Real>(colors: &[[f32; 3]]) -> Result<Tensor<T>> {
    let data: Vec<f64> = colors.iter().flat_map(|c| c.map(f64::from)).collect();
    Tensor::from_f64(&[colors.len(), 3], &data)
}

/// Graph handles of one training step.
pub struct StepGraph {
    pub l_rec: Var,
    pub l_app: Var,
    pub total: Var,
    pub rgb: Var,
    pub rgb_target: Var,
}

/// Builds the loss of `batch` on `g`. Source images are taken from the
/// batch's source condition.
pub fn step_graph<T: Real>(
    renderer: &Renderer<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    scene: &SceneBundle,
    batch: &RayBatch,
    weights: (f64, f64),
    opts: RenderOptions,
) -> Result<StepGraph> {
    if batch.rays.is_empty() {
        bail_input!("ray batch is empty");
    }
    let imgs = scene.images(&batch.condition)?;
    let images: Vec<&Image> = batch.sources.iter().map(|&i| &imgs[i]).collect();
    let cameras: Vec<&Camera> = batch.sources.iter().map(|&i| &scene.cameras[i]).collect();
    let geo = renderer.ray_geometry(&batch.rays, &cameras, opts)?;
    let maps = renderer.encode_sources(g, bound, &images)?;
    let (tokens, _) = renderer.geometry_tokens(g, bound, maps, &geo)?;
    let z_c = renderer.code_var(g, bound, &batch.condition)?;
    let z_t = renderer.code_var(g, bound, &batch.target_condition)?;
    let (rgb, _) = renderer.render_tokens(g, bound, tokens, z_c, batch.rays.len())?;
    let (rgb_target, _) = renderer.render_tokens(g, bound, tokens, z_t, batch.rays.len())?;
    let l_rec = g.mse(rgb, &color_tensor(&batch.gt)?)?;
    let l_app = g.mse(rgb_target, &color_tensor(&batch.gt_target)?)?;
    let a = g.scale(l_rec, T::of(weights.0));
    let b = g.scale(l_app, T::of(weights.1));
    let total = g.add(a, b)?;
    Ok(StepGraph {
        l_rec,
        l_app,
        total,
        rgb,
        rgb_target,
    })
}

/// Forward-only loss of `batch` with unit weights.
pub fn step_loss<T: Real>(renderer: &Renderer<T>, scene: &SceneBundle, batch: &RayBatch, opts: RenderOptions) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = renderer.store.bind(&mut g, false);
    let s = step_graph(renderer, &mut g, &bound, scene, batch, (1.0, 1.0), opts)?;
    Ok(LossBreakdown {
        l_rec: g.value(s.l_rec).item().f64(),
        l_app: g.value(s.l_app).item().f64(),
        total: g.value(s.total).item().f64(),
    })
}

/// Training state: parameters, optimizer moments and iteration counter.
pub struct Trainer {
    pub renderer: Renderer<f32>,
    pub optimizer: Adam,
    pub config: TrainConfig,
    /// Iterations completed so far.
    pub iteration: usize,
    conditions: Vec<String>,
}

const ITERATION_RECORD: &str = "train.iteration";

impl Trainer {
    pub fn new(renderer: Renderer<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let registered: Vec<String> = renderer.registry.names().iter().map(|s| s.to_string()).collect();
        let conditions = if config.conditions.is_empty() { registered } else { config.conditions.clone() };
        for c in &conditions {
            renderer.registry.index(c)?;
        }
        if conditions.len() < 2 {
            bail_input!("training needs at least 2 conditions");
        }
        let optimizer = Adam::new(&renderer.store, config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            renderer,
            optimizer,
            config,
            iteration: 0,
            conditions,
        })
    }

    /// Fresh model with parameters derived from the training seed.
    pub fn from_scratch(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        let renderer = Renderer::new(model, seed::derive(config.seed, seed::STREAM_PARAMS))?;
        Self::new(renderer, config)
    }

    pub fn conditions(&self) -> &[String] {
        &self.conditions
    }

    fn check_data(&self, data: &[SceneBundle]) -> Result<()> {
        if data.is_empty() {
            bail_input!("training needs at least one scene");
        }
        for s in data {
            if s.views() < 2 {
                bail_input!("scene {} needs at least 2 poses", s.id);
            }
            for c in &self.conditions {
                s.images(c)?;
            }
        }
        Ok(())
    }

    /// Scene, conditions and ray batch of iteration `t`.
    pub fn draw(&self, data: &[SceneBundle], t: usize) -> Result<(usize, RayBatch)> {
        let step_seed = seed::derive_indexed(self.config.seed, seed::STREAM_TRAIN_STEPS, t as u64);
        let mut rng = seed::rng(step_seed);
        let scene = rng.gen_range(0..data.len());
        let c = self.conditions.choose(&mut rng).expect("nonempty").clone();
        let others: Vec<&String> = self.conditions.iter().filter(|x| **x != c).collect();
        let ct = (*others.choose(&mut rng).expect("at least two conditions")).clone();
        let n_src = self.config.sources.min(data[scene].views() - 1);
        let batch = sample_training_rays(&data[scene], &c, &ct, self.config.rays_per_step, n_src, &self.renderer.config, rng.gen())?;
        Ok((scene, batch))
    }

    /// Runs one optimization step and returns its log row.
    pub fn step(&mut self, data: &[SceneBundle]) -> Result<LogRow> {
        self.check_data(data)?;
        let t = self.iteration;
        let (scene, batch) = self.draw(data, t)?;
        let opts = RenderOptions {
            stratified: self.config.stratified,
            seed: seed::derive_indexed(self.config.seed, seed::STREAM_RENDER, t as u64),
        };
        let mut g = Graph::new();
        let bound = self.renderer.store.bind(&mut g, true);
        let s = step_graph(&self.renderer, &mut g, &bound, &data[scene], &batch, (self.config.w_rec, self.config.w_app), opts)?;
        let row = LogRow {
            iteration: t,
            l_rec: g.value(s.l_rec).item().f64(),
            l_app: g.value(s.l_app).item().f64(),
            total: g.value(s.total).item().f64(),
        };
        if !row.total.is_finite() {
            bail_input!("loss diverged at iteration {t}");
        }
        let mut grads = g.backward(s.total)?;
        let grads: Vec<Option<Tensor<f32>>> = bound.vars().iter().map(|v| grads.take(*v)).collect();
        let lr = cosine_lr(self.config.lr, self.config.lr_min, t, self.config.iterations);
        self.optimizer.update(&mut self.renderer.store, &grads, lr, self.config.grad_clip);
        self.iteration += 1;
        Ok(row)
    }

    /// Steps until `config.iterations`, calling `on_row` after each step and
    /// writing `ckpt_<iteration>.avnv` into `checkpoint_dir` every
    /// `checkpoint_every` iterations.
    pub fn run(&mut self, data: &[SceneBundle], checkpoint_dir: Option<&Path>, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        self.check_data(data)?;
        let mut rows = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step(data)?;
            on_row(&row)?;
            rows.push(row);
            if let Some(dir) = checkpoint_dir {
                let k = self.config.checkpoint_every;
                if k > 0 && self.iteration % k == 0 {
                    self.save(&checkpoint_path(dir, self.iteration))?;
                }
            }
        }
        Ok(rows)
    }

    /// Saves parameters, optimizer state and the iteration counter.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = self.optimizer.records(&self.renderer.store);
        extra.push(Record::scalar(ITERATION_RECORD, self.iteration as f32));
        self.renderer.save(path, &extra)
    }

    /// Restores a [`Trainer::save`] checkpoint; training continues with
    /// `config`, whose seed should match the original run.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let (renderer, extra) = Renderer::<f32>::load(path)?;
        let mut t = Self::new(renderer, config)?;
        let iteration = extra
            .iter()
            .find(|r| r.name == ITERATION_RECORD)
            .ok_or_else(|| Error::format(path, "checkpoint has no training state"))?;
        t.iteration = iteration.data[0] as usize;
        t.optimizer.restore(&t.renderer.store, &extra).map_err(|e| Error::format(path, e.to_string()))?;
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.avnv"))
}

/// Trains a fresh model on `data` for `config.iterations` steps.
pub fn train(data: &[SceneBundle], model: ModelConfig, config: TrainConfig, checkpoint_dir: Option<&Path>) -> Result<(Trainer, Vec<LogRow>)> {
    let mut trainer = Trainer::from_scratch(model, config)?;
    let rows = trainer.run(data, checkpoint_dir, |_| Ok(()))?;
    Ok((trainer, rows))
}

pub const LOG_HEADER: [&str; 4] = ["iteration", "l_rec", "l_app", "total"];

/// Loss log writer; appends when the file already has rows.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl LossLog {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let exists = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if !exists {
            writer.write_record(LOG_HEADER).map_err(|e| csv_io(path, e))?;
        }
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, row: &LogRow) -> Result<()> {
        self.writer.serialize(row).map_err(|e| csv_io(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Reads a loss log, checking its header.
pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let header = r.headers().map_err(|e| csv_io(path, e))?;
    if header.iter().collect::<Vec<_>>() != LOG_HEADER {
        return Err(Error::format(path, format!("loss log header must be {}", LOG_HEADER.join(","))));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1))))
        .collect()
}

/// Trailing moving average over `window` values.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() + 1 - window);
    let mut s: f64 = values[..window].iter().sum();
    out.push(s / window as f64);
    for i in window..values.len() {
        s += values[i] - values[i - window];
        out.push(s / window as f64);
    }
    out
}
