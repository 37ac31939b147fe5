//! Reproducible command-line runs: dataset generation, training, rendering,
//! latent interpolation and evaluation.
//!
//! Every command reads one JSON [`RunConfig`]. Every artifact gets a
//! `<file>.meta.json` sidecar recording the SHA-256 of the effective
//! configuration, the command and the master seed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::applat::{interpolate, CONDITIONS};
use crate::error::{bail_input, Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::nvsnet::{ModelConfig, Renderer, SourceView};
use crate::scenegen::{read_dataset, write_dataset, Manifest, Region, SceneBundle};
use crate::trainer::{nearest_sources, read_loss_log, LossLog, TrainConfig, Trainer};
use crate::{seed, Image};

/// Default dataset root when the config leaves `data_root` unset.
pub const DATA_ROOT_ENV: &str = "AVA_NVS_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub width: usize,
    pub height: usize,
    pub conditions: Vec<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_scenes: 8,
            eval_scenes: 2,
            width: 64,
            height: 48,
            conditions: CONDITIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Shared by `render` and `interp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Scene id; `None` picks the first evaluation scene.
    pub scene: Option<String>,
    pub source_condition: String,
    pub target_condition: String,
    /// Held-out pose rendered from the remaining views.
    pub pose: usize,
    pub sources: usize,
    pub batch_size: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            scene: None,
            source_condition: "day".into(),
            target_condition: "night".into(),
            pose: 4,
            sources: 4,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpConfig {
    pub cond_a: String,
    pub cond_b: String,
    pub steps: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self {
            cond_a: "day".into(),
            cond_b: "night".into(),
            steps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every subsystem seed is derived from it.
    pub seed: u64,
    /// Dataset root; unset means `$AVA_NVS_DATA_ROOT`, then `data`.
    pub data_root: Option<PathBuf>,
    /// Checkpoints, logs, renders and reports go here.
    pub output_dir: PathBuf,
    /// Worker threads; `0` uses every available core.
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
    pub interp: InterpConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            output_dir: PathBuf::from("runs/default"),
            threads: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            render: RenderConfig::default(),
            interp: InterpConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn data_root(&self) -> PathBuf {
        match &self.data_root {
            Some(p) => p.clone(),
            None => std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.avnv")
    }

    /// Hex SHA-256 of the canonical JSON of this config, with the thread
    /// count zeroed since it never changes outputs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.dataset;
        if d.width % 4 != 0 || d.height % 4 != 0 || d.width < 16 || d.height < 16 {
            bail_input!("dataset size {}x{} must be at least 16x16 with sides divisible by 4", d.width, d.height);
        }
        for c in &self.model.conditions {
            if !d.conditions.contains(c) {
                bail_input!("model condition {c:?} is not generated by the dataset config");
            }
        }
        Ok(())
    }
}

/// Sidecar metadata written next to every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub artifact: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(OsString::from).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

fn write_meta(artifact: &Path, command: &str, config: &RunConfig) -> Result<()> {
    let meta = ArtifactMeta {
        artifact: artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        command: command.into(),
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    write_json(&meta_path(artifact), &meta)
}

fn save_png(img: &Image, path: &Path, command: &str, config: &RunConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_png(path)?;
    write_meta(path, command, config)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the configured training and evaluation bundles in memory.
pub fn generate_bundles(config: &RunConfig) -> Result<Vec<SceneBundle>> {
    let d = &config.dataset;
    let mut bundles = Vec::new();
    for (region, count, stream) in [
        (Region::Train, d.train_scenes, seed::STREAM_SCENES_TRAIN),
        (Region::Eval, d.eval_scenes, seed::STREAM_SCENES_EVAL),
    ] {
        for i in 0..count {
            let id = format!("{}_{i:03}", region.name());
            let s = seed::derive_indexed(config.seed, stream, i as u64);
            bundles.push(SceneBundle::generate(id, s, region, &d.conditions, d.width, d.height)?);
        }
    }
    Ok(bundles)
}

/// Writes `train_scenes` training and `eval_scenes` evaluation bundles.
pub fn cmd_gen_data(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    if config.dataset.train_scenes + config.dataset.eval_scenes == 0 {
        bail_input!("dataset config asks for no scenes");
    }
    let bundles = generate_bundles(config)?;
    let root = config.data_root();
    let manifest = write_dataset(&bundles, &root)?;
    write_meta(&root.join("manifest.json"), "gen-data", config)?;
    Ok(manifest)
}

/// Loads the scenes of one split.
pub fn load_split(config: &RunConfig, region: Region) -> Result<Vec<SceneBundle>> {
    let root = config.data_root();
    if !root.join("manifest.json").is_file() {
        bail_input!("no dataset at {}; run gen-data first or set {DATA_ROOT_ENV}", root.display());
    }
    let (_, bundles) = read_dataset(&root)?;
    let split: Vec<SceneBundle> = bundles.into_iter().filter(|b| b.spec.region == region).collect();
    if split.is_empty() {
        bail_input!("dataset at {} has no {} scenes", root.display(), region.name());
    }
    Ok(split)
}

pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Trains on the training split, writing `loss.csv`, periodic checkpoints
/// under `checkpoints/` and the final `model.avnv`.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    let data = load_split(config, Region::Train)?;
    let out = &config.output_dir;
    let log_path = out.join("loss.csv");
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt, config.train_config())?;
            if t.renderer.config != config.model {
                bail_input!("checkpoint {} was trained with a different model config", ckpt.display());
            }
            t
        }
        None => Trainer::from_scratch(config.model.clone(), config.train_config())?,
    };
    // Keep only log rows preceding the resume point.
    let kept = if resume.is_some() && log_path.is_file() {
        read_loss_log(&log_path)?.into_iter().filter(|r| r.iteration < trainer.iteration).collect()
    } else {
        Vec::new()
    };
    let mut log = LossLog::create(&log_path, false)?;
    for r in &kept {
        log.write(r)?;
    }
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let rows = trainer.run(&data, Some(&ckpt_dir), |row| log.write(row))?;
    for entry in std::fs::read_dir(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))? {
        let p = entry.map_err(|e| Error::io(&ckpt_dir, e))?.path();
        if p.extension().is_some_and(|e| e == "avnv") && !meta_path(&p).exists() {
            write_meta(&p, "train", config)?;
        }
    }
    let checkpoint = config.checkpoint_path();
    trainer.save(&checkpoint)?;
    write_meta(&checkpoint, "train", config)?;
    write_meta(&log_path, "train", config)?;
    Ok(TrainSummary {
        iterations: trainer.iteration,
        final_loss: rows.last().map(|r| r.total),
        checkpoint,
        log: log_path,
    })
}

fn load_model(path: &Path) -> Result<Renderer<f32>> {
    Ok(Renderer::<f32>::load(path)?.0)
}

fn find_scene(config: &RunConfig) -> Result<SceneBundle> {
    let root = config.data_root();
    if !root.join("manifest.json").is_file() {
        bail_input!("no dataset at {}; run gen-data first or set {DATA_ROOT_ENV}", root.display());
    }
    let (_, bundles) = read_dataset(&root)?;
    let wanted = config.render.scene.clone();
    let found = match &wanted {
        Some(id) => bundles.iter().position(|b| &b.id == id),
        None => bundles.iter().position(|b| b.spec.region == Region::Eval).or((!bundles.is_empty()).then_some(0)),
    };
    match found {
        Some(i) => Ok(bundles.into_iter().nth(i).expect("index in range")),
        None => bail_input!(
            "scene {:?} not found; available: {}",
            wanted.unwrap_or_default(),
            bundles.iter().map(|b| b.id.as_str()).collect::<Vec<_>>().join(", ")
        ),
    }
}

/// Renders the configured pose of `scene` from its nearest other poses in
/// `source` condition, once per code.
pub fn render_pose(
    renderer: &Renderer<f32>,
    scene: &SceneBundle,
    source: &str,
    pose: usize,
    sources: usize,
    codes: &[crate::applat::AppearanceCode],
    batch_size: usize,
) -> Result<Vec<Image>> {
    renderer.registry.index(source)?;
    if pose >= scene.views() {
        bail_input!("pose {pose} out of range for scene {} with {} views", scene.id, scene.views());
    }
    if scene.views() < 2 {
        bail_input!("scene {} needs at least 2 poses", scene.id);
    }
    let imgs = scene.images(source)?;
    let src = nearest_sources(&scene.cameras, pose, sources.max(1).min(scene.views() - 1));
    let views: Vec<SourceView<'_>> = src
        .iter()
        .map(|&i| SourceView {
            image: &imgs[i],
            camera: &scene.cameras[i],
        })
        .collect();
    let mut out = renderer.render_image_codes(&scene.cameras[pose], &views, codes, batch_size)?;
    for img in out.iter_mut() {
        img.quantize();
    }
    Ok(out)
}

/// Renders the held-out pose with the target condition's code; returns
/// the PNG path.
pub fn cmd_render(config: &RunConfig, checkpoint: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let r = &config.render;
    let renderer = load_model(checkpoint)?;
    let code = renderer.code(&r.target_condition)?;
    let scene = find_scene(config)?;
    let img = render_pose(&renderer, &scene, &r.source_condition, r.pose, r.sources, &[code], r.batch_size)?.remove(0);
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => config
            .output_dir
            .join(format!("render_{}_{}_{}_to_{}.png", scene.id, r.pose, r.source_condition, r.target_condition)),
    };
    save_png(&img, &path, "render", config)?;
    Ok(path)
}

/// Frame `i` of `steps` uses `α = i/(steps−1)` and `z = α·z_a + (1−α)·z_b`,
/// so the first frame shows `cond_b` and the last `cond_a`.
pub fn cmd_interp(config: &RunConfig, checkpoint: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let (r, ip) = (&config.render, &config.interp);
    if ip.steps < 2 {
        bail_input!("interpolation needs at least 2 steps, got {}", ip.steps);
    }
    let renderer = load_model(checkpoint)?;
    let (za, zb) = (renderer.code(&ip.cond_a)?, renderer.code(&ip.cond_b)?);
    let codes = (0..ip.steps)
        .map(|i| interpolate(&za, &zb, i as f64 / (ip.steps - 1) as f64))
        .collect::<Result<Vec<_>>>()?;
    let scene = find_scene(config)?;
    let frames = render_pose(&renderer, &scene, &r.source_condition, r.pose, r.sources, &codes, r.batch_size)?;
    let dir = match out_dir {
        Some(p) => p.to_path_buf(),
        None => config
            .output_dir
            .join(format!("interp_{}_{}_{}_{}", scene.id, r.pose, ip.cond_a, ip.cond_b)),
    };
    let mut paths = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let p = dir.join(format!("frame_{i:03}.png"));
        save_png(f, &p, "interp", config)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Evaluates on the evaluation split; writes `eval_matrix.csv`,
/// `eval_consistency.csv` and `eval.md`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let renderer = load_model(checkpoint)?;
    let scenes = load_split(config, Region::Eval)?;
    let report = evaluate(&renderer, &scenes, &config.eval)?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
    for (name, text) in [
        ("eval_matrix.csv", report.matrix_csv()?),
        ("eval_consistency.csv", report.consistency_csv()?),
        ("eval.md", report.markdown()),
    ] {
        let p = dir.join(name);
        write_text(&p, &text)?;
        write_meta(&p, "eval", config)?;
    }
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "ava-nvs", version, about = "Appearance-conditioned novel view synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps worker threads; defaults to every available core.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and evaluation scenes.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a renderer on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a held-out pose with a target condition's appearance.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        pose: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a sequence blending two conditions' codes.
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        cond_a: Option<String>,
        #[arg(long)]
        cond_b: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pose: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Source × target condition metrics on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common, .. }
            | Command::Render { common, .. }
            | Command::Interp { common, .. }
            | Command::Eval { common, .. } => common,
        }
    }
}

fn configure(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(t) = common.threads {
        config.threads = t;
    }
    let threads = if config.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        config.threads
    };
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(config)
}

/// Runs a parsed command, printing a one-line summary.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = configure(cli.command.common())?;
    match cli.command {
        Command::GenData { .. } => {
            let m = cmd_gen_data(&config)?;
            let train = m.scenes.iter().filter(|s| s.split == Region::Train).count();
            let images: usize = m.scenes.iter().map(|s| s.views * m.conditions.len()).sum();
            println!(
                "wrote {train} train + {} eval scenes ({images} images) to {}",
                m.scenes.len() - train,
                config.data_root().display()
            );
        }
        Command::Train { resume, .. } => {
            let s = cmd_train(&config, resume.as_deref())?;
            let loss = s.final_loss.map_or("n/a".to_string(), |l| format!("{l:.5}"));
            println!("trained {} iterations, final loss {loss}; checkpoint {}", s.iterations, s.checkpoint.display());
        }
        Command::Render {
            checkpoint,
            scene,
            source,
            target,
            pose,
            out,
            ..
        } => {
            let r = &mut config.render;
            r.scene = scene.or(r.scene.take());
            r.source_condition = source.unwrap_or(r.source_condition.clone());
            r.target_condition = target.unwrap_or(r.target_condition.clone());
            r.pose = pose.unwrap_or(r.pose);
            let ckpt = checkpoint.unwrap_or_else(|| config.checkpoint_path());
            println!("{}", cmd_render(&config, &ckpt, out.as_deref())?.display());
        }
        Command::Interp {
            checkpoint,
            scene,
            source,
            cond_a,
            cond_b,
            steps,
            pose,
            out_dir,
            ..
        } => {
            let r = &mut config.render;
            r.scene = scene.or(r.scene.take());
            r.source_condition = source.unwrap_or(r.source_condition.clone());
            r.pose = pose.unwrap_or(r.pose);
            let ip = &mut config.interp;
            ip.cond_a = cond_a.unwrap_or(ip.cond_a.clone());
            ip.cond_b = cond_b.unwrap_or(ip.cond_b.clone());
            ip.steps = steps.unwrap_or(ip.steps);
            let ckpt = checkpoint.unwrap_or_else(|| config.checkpoint_path());
            let frames = cmd_interp(&config, &ckpt, out_dir.as_deref())?;
            println!("wrote {} frames to {}", frames.len(), frames[0].parent().unwrap_or(Path::new(".")).display());
        }
        Command::Eval { checkpoint, out_dir, .. } => {
            let ckpt = checkpoint.unwrap_or_else(|| config.checkpoint_path());
            let report = cmd_eval(&config, &ckpt, out_dir.as_deref())?;
            print!("{}", report.markdown());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code:
/// `0` on success, `2` for input or format errors, `3` for IO errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
