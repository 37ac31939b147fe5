//! Stacked view/ray transformer renderer with an appearance-conditioned
//! final ray transformer.
//!
//! Every ray carries `M` sample points. For each point a view block attends
//! over its projections into the `N` source feature maps; a ray block then
//! lets the `M` tokens of a ray attend to each other. After `B` such pairs a
//! final ray block, whose value tokens are rewritten by `f_z([V; z])`,
//! produces the tokens that are pooled into a color.

mod checkpoint;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::applat::{AppearanceCode, ConditionRegistry, LatentMode, LatentParams, CONDITIONS, DEFAULT_DIM};
use crate::diffcore::{
    mlp_forward, multi_head_attention, normal_tensor, nn::linear, Activation, AttentionWeights, AttnMaps, BilinearTaps, Bound, Graph, ParamId,
    ParamStore, Real, Tensor, Var,
};
use crate::encoder::{Encoder, FeatureMap};
use crate::error::{bail_input, Result};
use crate::geomcam::{bilinear_taps, sample_along_ray, Camera, Ray, Vec3, MIN_DEPTH};
use crate::{seed, Image};

pub use checkpoint::{read_records, write_records, Record, CHECKPOINT_VERSION};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width; also the encoder's output channel count.
    pub d_token: usize,
    pub heads: usize,
    /// Number of view/ray block pairs before the rendering block.
    pub blocks: usize,
    /// Sample points per ray.
    pub samples: usize,
    pub latent_dim: usize,
    pub ffn_hidden: usize,
    pub rgb_hidden: usize,
    pub pe_freqs: usize,
    pub near: f64,
    pub far: f64,
    pub latent_mode: LatentMode,
    pub conditions: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_token: 64,
            heads: 4,
            blocks: 2,
            samples: 32,
            latent_dim: DEFAULT_DIM,
            ffn_hidden: 128,
            rgb_hidden: 64,
            pe_freqs: 6,
            near: 0.5,
            far: 30.0,
            latent_mode: LatentMode::Structured,
            conditions: CONDITIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_token == 0 || self.heads == 0 || self.d_token % self.heads != 0 {
            bail_input!("token width {} must be a positive multiple of heads {}", self.d_token, self.heads);
        }
        if self.samples < 2 {
            bail_input!("need at least 2 samples per ray, got {}", self.samples);
        }
        if self.latent_dim == 0 || self.ffn_hidden == 0 || self.rgb_hidden == 0 {
            bail_input!("latent, feed-forward and color head widths must be positive");
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            bail_input!("depth range must satisfy 0 < near < far, got {}..{}", self.near, self.far);
        }
        if (self.near as f32) as f64 != self.near || (self.far as f32) as f64 != self.far {
            bail_input!("near/far must be exactly representable in single precision");
        }
        Ok(())
    }

    pub fn query_pe_width(&self) -> usize {
        2 * pe_width(self.pe_freqs)
    }

    pub fn key_pe_width(&self) -> usize {
        pe_width(self.pe_freqs)
    }
}

pub fn pe_width(freqs: usize) -> usize {
    3 * (1 + 2 * freqs)
}

/// Appends `v` followed by `sin(2^k·π·v)`, `cos(2^k·π·v)` for `k < freqs`.
pub fn positional_encoding(v: &Vec3, freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(v.as_slice());
    for k in 0..freqs {
        let f = std::f64::consts::PI * (1u64 << k) as f64;
        out.extend(v.iter().map(|x| (f * x).sin()));
        out.extend(v.iter().map(|x| (f * x).cos()));
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    ln_q: Norm,
    ln_kv: Option<Norm>,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln_ffn: Norm,
    ffn: [(ParamId, ParamId); 2],
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Encoder,
    query_w: ParamId,
    query_seed: ParamId,
    view: Vec<Block>,
    ray: Vec<Block>,
    render: Block,
    fz_w: ParamId,
    fz_b: ParamId,
    out_norm: Norm,
    head: Vec<(ParamId, ParamId)>,
    latent: LatentParams,
}

struct Init<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng> Init<'_, T, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let t = normal_tensor(self.rng, shape, std);
        self.store.add(name, t)
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        self.normal(name, &[fan_in, fan_out], gain / (fan_in as f64).sqrt())
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    fn norm(&mut self, prefix: &str, n: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{prefix}.g"), Tensor::full(&[n], T::one())),
            bias: self.zeros(format!("{prefix}.b"), n),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, d_kv: Option<usize>, ffn_hidden: usize) -> Block {
        let kv = d_kv.unwrap_or(d);
        Block {
            ln_q: self.norm(&format!("{prefix}.ln_q"), d),
            ln_kv: d_kv.map(|w| self.norm(&format!("{prefix}.ln_kv"), w)),
            wq: self.weight(format!("{prefix}.wq"), d, d, 1.0),
            wk: self.weight(format!("{prefix}.wk"), kv, d, 1.0),
            wv: self.weight(format!("{prefix}.wv"), kv, d, 1.0),
            wo: self.weight(format!("{prefix}.wo"), d, d, 0.5),
            bo: self.zeros(format!("{prefix}.bo"), d),
            ln_ffn: self.norm(&format!("{prefix}.ln_ffn"), d),
            ffn: [
                (self.weight(format!("{prefix}.ffn0.w"), d, ffn_hidden, 2f64.sqrt()), self.zeros(format!("{prefix}.ffn0.b"), ffn_hidden)),
                (self.weight(format!("{prefix}.ffn1.w"), ffn_hidden, d, 0.5), self.zeros(format!("{prefix}.ffn1.b"), d)),
            ],
        }
    }
}

/// Geometry of a ray batch against a fixed set of source cameras, shared by
/// every appearance code rendered for it.
#[derive(Clone, Debug)]
pub struct RayGeometry<T> {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    /// One entry per (point, view), point-major; indices address the
    /// row-concatenation of all source maps.
    pub taps: Vec<Option<BilinearTaps<T>>>,
    /// `0` for usable projections, `-inf` otherwise; point-major.
    pub key_bias: Vec<T>,
    /// `1` for points seen by at least one view, else `0`.
    pub point_mask: Vec<T>,
    pub query_pe: Tensor<T>,
    pub key_pe: Tensor<T>,
    pub depths: Vec<f64>,
}

/// Sampling behaviour of a render call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { stratified: false, seed: 0 }
    }
}

/// Colors of a ray batch and every attention map computed for it, in block
/// order: view and ray blocks alternately, then the rendering block.
#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub rgb: Vec<[f64; 3]>,
    pub trace: Vec<AttnMaps<T>>,
}

pub struct SourceView<'a> {
    pub image: &'a Image,
    pub camera: &'a Camera,
}

#[derive(Clone, Debug)]
pub struct Renderer<T> {
    pub config: ModelConfig,
    pub registry: ConditionRegistry,
    pub store: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Renderer<T> {
    /// Fresh renderer with parameters drawn from `param_seed`.
    pub fn new(config: ModelConfig, param_seed: u64) -> Result<Self> {
        config.validate()?;
        let registry = ConditionRegistry::new(config.latent_mode, &config.conditions)?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(param_seed);
        let d = config.d_token;
        let encoder = Encoder::new(&mut store, &mut rng, d);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let qpe = config.query_pe_width();
        let query_w = init.weight("query.w".into(), qpe, d, 1.0);
        let query_seed = init.normal("query.seed".into(), &[d], 1.0);
        let mut view = Vec::new();
        let mut ray = Vec::new();
        for b in 0..config.blocks {
            view.push(init.block(&format!("view{b}"), d, Some(d + config.key_pe_width()), config.ffn_hidden));
            ray.push(init.block(&format!("ray{b}"), d, None, config.ffn_hidden));
        }
        let render = init.block("render", d, None, config.ffn_hidden);
        // f_z starts as the identity on V and ignores z.
        let mut fz = vec![0.0; (d + config.latent_dim) * d];
        for i in 0..d {
            fz[i * d + i] = 1.0;
        }
        let fz_w = init.store.add("fz.w", Tensor::from_f64(&[d + config.latent_dim, d], &fz)?);
        let fz_b = init.zeros("fz.b".into(), d);
        let out_norm = init.norm("out_ln", d);
        let head = vec![
            (init.weight("head0.w".into(), d, config.rgb_hidden, 2f64.sqrt()), init.zeros("head0.b".into(), config.rgb_hidden)),
            (init.weight("head1.w".into(), config.rgb_hidden, 3, 1.0), init.zeros("head1.b".into(), 3)),
        ];
        let latent = LatentParams::new(&mut store, &mut rng, &registry, config.latent_dim);
        let layout = Layout {
            encoder,
            query_w,
            query_seed,
            view,
            ray,
            render,
            fz_w,
            fz_b,
            out_norm,
            head,
            latent,
        };
        Ok(Self {
            config,
            registry,
            store,
            layout,
        })
    }

    pub fn cast<U: Real>(&self) -> Renderer<U> {
        Renderer {
            config: self.config.clone(),
            registry: self.registry.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn encoder(&self) -> &Encoder {
        &self.layout.encoder
    }

    pub fn latent(&self) -> &LatentParams {
        &self.layout.latent
    }

    /// Learned code of a registered condition.
    pub fn code(&self, condition: &str) -> Result<AppearanceCode> {
        self.layout.latent.code(&self.store, &self.registry, condition)
    }

    pub fn code_var(&self, g: &mut Graph<T>, bound: &Bound, condition: &str) -> Result<Var> {
        self.layout.latent.code_var(g, bound, &self.registry, condition)
    }

    pub fn code_constant(&self, g: &mut Graph<T>, code: &AppearanceCode) -> Result<Var> {
        if code.dim() != self.config.latent_dim {
            bail_input!("appearance code has dimension {}, renderer expects {}", code.dim(), self.config.latent_dim);
        }
        Ok(g.constant(Tensor::from_f64(&[1, code.dim()], &code.z)?))
    }

    /// Encodes every source image and stacks the maps row-wise.
    pub fn encode_sources(&self, g: &mut Graph<T>, bound: &Bound, images: &[&Image]) -> Result<Var> {
        if images.is_empty() {
            bail_input!("at least one source view is required");
        }
        let maps = images
            .iter()
            .map(|im| self.layout.encoder.forward(g, bound, im))
            .collect::<Result<Vec<_>>>()?;
        if maps.len() == 1 {
            return Ok(maps[0]);
        }
        g.concat_rows(&maps)
    }

    /// Samples points on `rays` and projects them into every source.
    pub fn ray_geometry(&self, rays: &[Ray], cameras: &[&Camera], opts: RenderOptions) -> Result<RayGeometry<T>> {
        if cameras.is_empty() {
            bail_input!("at least one source view is required");
        }
        let (h, w) = (cameras[0].height(), cameras[0].width());
        if cameras.iter().any(|c| c.height() != h || c.width() != w) {
            bail_input!("source views must share one resolution");
        }
        let m = self.config.samples;
        let n = cameras.len();
        let freqs = self.config.pe_freqs;
        let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
        let p = rays.len() * m;
        let mut taps = Vec::with_capacity(p * n);
        let mut key_bias = Vec::with_capacity(p * n);
        let mut point_mask = Vec::with_capacity(p);
        let mut qpe = Vec::with_capacity(p * self.config.query_pe_width());
        let mut kpe = Vec::with_capacity(p * n * self.config.key_pe_width());
        let mut depths = Vec::with_capacity(p);
        for (r, ray) in rays.iter().enumerate() {
            let s = sample_along_ray(ray, m, opts.stratified, seed::derive_indexed(opts.seed, 0, r as u64))?;
            for (x, t) in s.points.iter().zip(&s.depths) {
                depths.push(*t);
                positional_encoding(&((x - ray.origin) / self.config.far), freqs, &mut qpe);
                positional_encoding(&s.view_dir, freqs, &mut qpe);
                let mut any = false;
                for (i, cam) in cameras.iter().enumerate() {
                    let pr = cam.project(x);
                    let tap = if pr.depth > MIN_DEPTH {
                        bilinear_taps::<T>(h, w, pr.u - 0.5, pr.v - 0.5).map(|mut t| {
                            for idx in t.idx.iter_mut() {
                                *idx += (i * h * w) as u32;
                            }
                            t
                        })
                    } else {
                        None
                    };
                    any |= tap.is_some();
                    key_bias.push(if tap.is_some() { T::zero() } else { T::neg_infinity() });
                    taps.push(tap);
                    let rel = (x - centers[i]).normalize() - s.view_dir;
                    positional_encoding(&rel, freqs, &mut kpe);
                }
                point_mask.push(if any { T::one() } else { T::zero() });
            }
        }
        Ok(RayGeometry {
            rays: rays.len(),
            samples: m,
            views: n,
            taps,
            key_bias,
            point_mask,
            query_pe: Tensor::from_f64(&[p, self.config.query_pe_width()], &qpe)?,
            key_pe: Tensor::from_f64(&[p * n, self.config.key_pe_width()], &kpe)?,
            depths,
        })
    }

    fn norm(&self, g: &mut Graph<T>, bound: &Bound, n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, bound.var(n.gain), bound.var(n.bias), T::of(LN_EPS))
    }

    fn weights(&self, bound: &Bound, b: &Block) -> AttentionWeights {
        AttentionWeights {
            wq: bound.var(b.wq),
            wk: bound.var(b.wk),
            wv: bound.var(b.wv),
            wo: bound.var(b.wo),
            bo: Some(bound.var(b.bo)),
        }
    }

    fn feed_forward(&self, g: &mut Graph<T>, bound: &Bound, b: &Block, h: Var) -> Result<Var> {
        let n = self.norm(g, bound, b.ln_ffn, h)?;
        let layers = b.ffn.map(|(w, bb)| (bound.var(w), bound.var(bb)));
        let f = mlp_forward(g, n, &layers, Activation::Gelu)?;
        g.add(h, f)
    }

    /// Cross-attention of one query token per point over its view tokens.
    fn view_block(&self, g: &mut Graph<T>, bound: &Bound, b: &Block, q_in: Var, kv_in: Var, key_bias: &[T]) -> Result<(Var, AttnMaps<T>)> {
        let groups = g.value(q_in).rows();
        let qn = self.norm(g, bound, b.ln_q, q_in)?;
        let kvn = match b.ln_kv {
            Some(n) => self.norm(g, bound, n, kv_in)?,
            None => kv_in,
        };
        let out = multi_head_attention(g, qn, kvn, kvn, &self.weights(bound, b), groups, self.config.heads, Some(key_bias), None)?;
        let h = g.add(q_in, out.tokens)?;
        Ok((self.feed_forward(g, bound, b, h)?, out.attn))
    }

    /// Self-attention among the tokens of each ray.
    fn ray_block(&self, g: &mut Graph<T>, bound: &Bound, b: &Block, x: Var, rays: usize, z: Option<Var>) -> Result<(Var, AttnMaps<T>)> {
        let xn = self.norm(g, bound, b.ln_q, x)?;
        let hook = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let z = z.expect("hook only installed with a code");
            let rows = g.value(v).rows();
            let zt = g.tile_rows(z, rows)?;
            let vz = g.concat_cols(v, zt)?;
            linear(g, vz, bound.var(self.layout.fz_w), Some(bound.var(self.layout.fz_b)))
        };
        let hook_ref: Option<crate::diffcore::nn::ValueHook<'_, T>> = if z.is_some() { Some(&hook) } else { None };
        let out = multi_head_attention(g, xn, xn, xn, &self.weights(bound, b), rays, self.config.heads, None, hook_ref)?;
        let h = g.add(x, out.tokens)?;
        Ok((self.feed_forward(g, bound, b, h)?, out.attn))
    }

    /// The code-independent part of the network: `B` view/ray block pairs.
    /// Returns `[rays·samples, d_token]` tokens.
    pub fn geometry_tokens(&self, g: &mut Graph<T>, bound: &Bound, maps: Var, geo: &RayGeometry<T>) -> Result<(Var, Vec<AttnMaps<T>>)> {
        let feats = g.gather(maps, geo.taps.clone())?;
        let kpe = g.constant(geo.key_pe.clone());
        let kv = g.concat_cols(feats, kpe)?;
        let qpe = g.constant(geo.query_pe.clone());
        let mut h = linear(g, qpe, bound.var(self.layout.query_w), Some(bound.var(self.layout.query_seed)))?;
        let mut trace = Vec::new();
        for (vb, rb) in self.layout.view.iter().zip(&self.layout.ray) {
            let (v, a) = self.view_block(g, bound, vb, h, kv, &geo.key_bias)?;
            trace.push(a);
            h = g.mask_rows(v, geo.point_mask.clone())?;
            let (r, a) = self.ray_block(g, bound, rb, h, geo.rays, None)?;
            trace.push(a);
            h = r;
        }
        Ok((h, trace))
    }

    /// Rendering block conditioned on `z` (`[1, latent_dim]`), pooling and
    /// color head. Returns `[rays, 3]` colors in `(0, 1)`.
    pub fn render_tokens(&self, g: &mut Graph<T>, bound: &Bound, tokens: Var, z: Var, rays: usize) -> Result<(Var, AttnMaps<T>)> {
        let (h, attn) = self.ray_block(g, bound, &self.layout.render, tokens, rays, Some(z))?;
        let h = self.norm(g, bound, self.layout.out_norm, h)?;
        let samples = g.value(h).rows() / rays.max(1);
        let pooled = g.mean_groups(h, samples)?;
        let layers: Vec<(Var, Var)> = self.layout.head.iter().map(|(w, b)| (bound.var(*w), bound.var(*b))).collect();
        let logits = mlp_forward(g, pooled, &layers, Activation::Gelu)?;
        Ok((g.sigmoid(logits), attn))
    }

    /// Encoded source maps stacked row-wise, without gradient tracking.
    pub fn encode_constant(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let v = self.encode_sources(&mut g, &bound, images)?;
        Ok(g.value(v).clone())
    }

    /// Renders a ray batch against pre-encoded source maps.
    pub fn render_rays_encoded(&self, rays: &[Ray], cameras: &[&Camera], maps: &Tensor<T>, code: &AppearanceCode, opts: RenderOptions) -> Result<RenderOutput<T>> {
        let geo = self.ray_geometry(rays, cameras, opts)?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let maps = g.constant(maps.clone());
        let z = self.code_constant(&mut g, code)?;
        let (tokens, mut trace) = self.geometry_tokens(&mut g, &bound, maps, &geo)?;
        let (rgb, attn) = self.render_tokens(&mut g, &bound, tokens, z, rays.len())?;
        trace.push(attn);
        let rgb = g.value(rgb).data().chunks_exact(3).map(|c| [c[0].f64(), c[1].f64(), c[2].f64()]).collect();
        Ok(RenderOutput { rgb, trace })
    }

    pub fn render_rays(&self, rays: &[Ray], sources: &[SourceView<'_>], code: &AppearanceCode, opts: RenderOptions) -> Result<RenderOutput<T>> {
        if sources.is_empty() {
            bail_input!("at least one source view is required");
        }
        let images: Vec<&Image> = sources.iter().map(|s| s.image).collect();
        let cameras: Vec<&Camera> = sources.iter().map(|s| s.camera).collect();
        let maps = self.encode_constant(&images)?;
        self.render_rays_encoded(rays, &cameras, &maps, code, opts)
    }

    pub fn render_ray(&self, ray: &Ray, sources: &[SourceView<'_>], code: &AppearanceCode, opts: RenderOptions) -> Result<([f64; 3], Vec<AttnMaps<T>>)> {
        let out = self.render_rays(std::slice::from_ref(ray), sources, code, opts)?;
        Ok((out.rgb[0], out.trace))
    }

    /// Renders every pixel center of `target`, `batch_size` rays at a time.
    pub fn render_image(&self, target: &Camera, sources: &[SourceView<'_>], code: &AppearanceCode, batch_size: usize) -> Result<Image> {
        let mut images = self.render_image_codes(target, sources, std::slice::from_ref(code), batch_size)?;
        Ok(images.remove(0))
    }

    /// Renders `target` once per code. The code-independent part of the
    /// network runs once per ray batch and is shared by every code.
    pub fn render_image_codes(&self, target: &Camera, sources: &[SourceView<'_>], codes: &[AppearanceCode], batch_size: usize) -> Result<Vec<Image>> {
        if sources.is_empty() {
            bail_input!("at least one source view is required");
        }
        if batch_size == 0 {
            bail_input!("batch size must be positive");
        }
        let images: Vec<&Image> = sources.iter().map(|s| s.image).collect();
        let cameras: Vec<&Camera> = sources.iter().map(|s| s.camera).collect();
        let maps = self.encode_constant(&images)?;
        let (w, h) = (target.width(), target.height());
        let rays = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| target.pixel_center_ray(x, y, self.config.near, self.config.far))
            .collect::<Result<Vec<_>>>()?;
        let chunks: Vec<Vec<Vec<f32>>> = rays
            .par_chunks(batch_size)
            .map(|chunk| {
                let geo = self.ray_geometry(chunk, &cameras, RenderOptions::default())?;
                let mut g = Graph::new();
                let bound = self.store.bind(&mut g, false);
                let m = g.constant(maps.clone());
                let (tokens, _) = self.geometry_tokens(&mut g, &bound, m, &geo)?;
                codes
                    .iter()
                    .map(|code| {
                        let z = self.code_constant(&mut g, code)?;
                        let (rgb, _) = self.render_tokens(&mut g, &bound, tokens, z, chunk.len())?;
                        Ok(g.value(rgb).data().iter().map(|v| v.f64() as f32).collect())
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        (0..codes.len())
            .map(|k| Image::from_vec(w, h, chunks.iter().flat_map(|c| c[k].iter().copied()).collect()))
            .collect()
    }

    /// One view block for a single point, on pre-encoded maps. `origin` is
    /// the ray origin the point was sampled from. Returns the token and
    /// whether any source saw the point.
    #[allow(clippy::too_many_arguments)]
    pub fn view_aggregate(
        &self,
        block: usize,
        origin: &Vec3,
        x: &Vec3,
        theta: &Vec3,
        sources: &[(&FeatureMap<T>, &Camera)],
        prev_token: Option<&[T]>,
    ) -> Result<(Vec<T>, bool, AttnMaps<T>)> {
        if sources.is_empty() {
            bail_input!("at least one source view is required");
        }
        if block >= self.layout.view.len() {
            bail_input!("view block {block} out of range");
        }
        let d = self.config.d_token;
        let freqs = self.config.pe_freqs;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let mut feats = Vec::new();
        let mut kpe = Vec::new();
        let mut bias = Vec::new();
        for (map, cam) in sources {
            let (f, ok) = map.feature_at(cam, x);
            feats.extend(f);
            bias.push(if ok { T::zero() } else { T::neg_infinity() });
            positional_encoding(&((x - cam.center()).normalize() - theta), freqs, &mut kpe);
        }
        let valid = bias.iter().any(|b| *b == T::zero());
        let f = g.constant(Tensor::from_vec(&[sources.len(), d], feats)?);
        let kpe = g.constant(Tensor::from_f64(&[sources.len(), self.config.key_pe_width()], &kpe)?);
        let kv = g.concat_cols(f, kpe)?;
        let q = match prev_token {
            Some(t) => g.constant(Tensor::from_vec(&[1, d], t.to_vec())?),
            None => {
                let mut qpe = Vec::new();
                positional_encoding(&((x - origin) / self.config.far), freqs, &mut qpe);
                positional_encoding(theta, freqs, &mut qpe);
                let qpe = g.constant(Tensor::from_f64(&[1, qpe.len()], &qpe)?);
                linear(&mut g, qpe, bound.var(self.layout.query_w), Some(bound.var(self.layout.query_seed)))?
            }
        };
        let (out, attn) = self.view_block(&mut g, &bound, &self.layout.view[block], q, kv, &bias)?;
        let out = g.mask_rows(out, vec![if valid { T::one() } else { T::zero() }])?;
        Ok((g.value(out).data().to_vec(), valid, attn))
    }

    /// One ray block over a `[M, d_token]` token sequence.
    pub fn ray_aggregate(&self, block: usize, tokens: &Tensor<T>) -> Result<(Tensor<T>, AttnMaps<T>)> {
        if block >= self.layout.ray.len() {
            bail_input!("ray block {block} out of range");
        }
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, false);
        let x = g.constant(tokens.clone());
        let (out, attn) = self.ray_block(&mut g, &bound, &self.layout.ray[block], x, 1, None)?;
        Ok((g.value(out).clone(), attn))
    }

    /// Saves parameters, configuration and condition registry, plus any
    /// `extra` records (for example optimizer state).
    pub fn save(&self, path: &std::path::Path, extra: &[Record]) -> Result<()> {
        let mut records = checkpoint::config_records(&self.config, &self.registry);
        for (name, t) in self.store.iter() {
            records.push(Record {
                name: format!("param.{name}"),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.f64() as f32).collect(),
            });
        }
        records.extend_from_slice(extra);
        write_records(path, &records)
    }

    /// Loads a checkpoint written by [`Renderer::save`], returning the
    /// records it did not consume.
    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<Record>)> {
        let records = read_records(path)?;
        let (config, rest) = checkpoint::parse_config(path, records)?;
        let mut renderer = Self::new(config, 0)?;
        let mut extra = Vec::new();
        let mut seen = vec![false; renderer.store.len()];
        for r in rest {
            let Some(name) = r.name.strip_prefix("param.") else {
                extra.push(r);
                continue;
            };
            let Some(id) = renderer.store.find(name) else {
                return Err(crate::Error::format(path, format!("unexpected parameter record {name:?}")));
            };
            let data: Vec<f64> = r.data.iter().map(|v| *v as f64).collect();
            let t = Tensor::from_f64(&r.shape, &data).map_err(|e| crate::Error::format(path, format!("record {name:?}: {e}")))?;
            renderer
                .store
                .set(id, t)
                .map_err(|e| crate::Error::format(path, format!("record {name:?}: {e}")))?;
            seen[id.index()] = true;
        }
        if let Some(missing) = renderer.store.ids().find(|id| !seen[id.index()]) {
            return Err(crate::Error::format(path, format!("missing parameter record {:?}", renderer.store.name(missing))));
        }
        Ok((renderer, extra))
    }
}
