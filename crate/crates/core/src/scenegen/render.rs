//! Whitted-style ray tracer with per-condition lighting and color grading.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Kind, Primitive, SceneSpec, Shape};
use crate::error::{bail_input, Result};
use crate::geomcam::{Camera, Vec3};
use crate::Image;

/// Primitive ID of pixels that hit nothing.
pub const SKY_ID: u32 = 0;

const EPS: f64 = 1e-6;
/// Point lights farther than this from a surface are ignored.
const LIGHT_RANGE: f64 = 14.0;
/// Side of the square road and ground cells a puddle may cover.
const PUDDLE_CELL: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionParams {
    pub name: String,
    /// Direction towards the sun or moon.
    pub sun_dir: [f64; 3],
    /// Zero disables direct light and its shadows.
    pub sun_color: [f64; 3],
    pub ambient: f64,
    pub ambient_color: [f64; 3],
    pub sky_zenith: [f64; 3],
    pub sky_horizon: [f64; 3],
    pub lamps_on: bool,
    pub lamp_color: [f64; 3],
    /// Peak irradiance scale of a lit lamp on nearby surfaces.
    pub lamp_intensity: f64,
    pub windows_on: bool,
    /// Share of windows that are lit.
    pub window_fraction: f64,
    pub window_color: [f64; 3],
    /// Share of road and ground cells covered by sky-reflecting puddles.
    pub puddle_fraction: f64,
    /// 0 keeps colors, 1 is fully grey.
    pub desaturation: f64,
    /// Contrast about mid-grey.
    pub contrast: f64,
    pub brightness: f64,
    pub tint: [f64; 3],
}

impl ConditionParams {
    pub fn day() -> Self {
        Self {
            name: "day".into(),
            sun_dir: [0.35, 0.85, 0.40],
            sun_color: [0.95, 0.92, 0.85],
            ambient: 0.45,
            ambient_color: [0.75, 0.85, 1.0],
            sky_zenith: [0.30, 0.52, 0.88],
            sky_horizon: [0.72, 0.82, 0.95],
            lamps_on: false,
            lamp_color: [1.0, 0.85, 0.55],
            lamp_intensity: 0.0,
            windows_on: false,
            window_fraction: 0.0,
            window_color: [1.0, 0.8, 0.5],
            puddle_fraction: 0.0,
            desaturation: 0.0,
            contrast: 1.0,
            brightness: 1.0,
            tint: [1.0, 1.0, 1.0],
        }
    }

    pub fn evening() -> Self {
        Self {
            name: "evening".into(),
            sun_dir: [-0.75, 0.22, 0.62],
            sun_color: [1.0, 0.55, 0.28],
            ambient: 0.40,
            ambient_color: [0.75, 0.60, 0.75],
            sky_zenith: [0.28, 0.25, 0.50],
            sky_horizon: [0.98, 0.58, 0.35],
            lamps_on: false,
            lamp_color: [1.0, 0.85, 0.55],
            lamp_intensity: 0.0,
            windows_on: true,
            window_fraction: 0.45,
            window_color: [1.0, 0.78, 0.45],
            puddle_fraction: 0.0,
            desaturation: 0.0,
            contrast: 1.0,
            brightness: 1.0,
            tint: [1.0, 1.0, 1.0],
        }
    }

    pub fn night() -> Self {
        Self {
            name: "night".into(),
            sun_dir: [0.25, 0.80, -0.50],
            sun_color: [0.16, 0.19, 0.30],
            ambient: 0.22,
            ambient_color: [0.45, 0.52, 0.85],
            sky_zenith: [0.02, 0.03, 0.09],
            sky_horizon: [0.10, 0.10, 0.20],
            lamps_on: true,
            lamp_color: [1.0, 0.82, 0.50],
            lamp_intensity: 9.0,
            windows_on: true,
            window_fraction: 0.6,
            window_color: [1.0, 0.80, 0.48],
            puddle_fraction: 0.0,
            desaturation: 0.0,
            contrast: 1.0,
            brightness: 1.0,
            tint: [1.0, 1.0, 1.0],
        }
    }

    pub fn rain() -> Self {
        Self {
            name: "rain".into(),
            sun_dir: [0.0, 1.0, 0.0],
            sun_color: [0.0, 0.0, 0.0],
            ambient: 0.95,
            ambient_color: [0.85, 0.88, 0.92],
            sky_zenith: [0.50, 0.53, 0.57],
            sky_horizon: [0.66, 0.68, 0.71],
            lamps_on: false,
            lamp_color: [1.0, 0.85, 0.55],
            lamp_intensity: 0.0,
            windows_on: false,
            window_fraction: 0.0,
            window_color: [1.0, 0.8, 0.5],
            puddle_fraction: 0.4,
            desaturation: 0.55,
            contrast: 1.15,
            brightness: 0.82,
            tint: [0.93, 0.98, 1.08],
        }
    }

    pub fn all() -> Vec<Self> {
        vec![Self::day(), Self::night(), Self::evening(), Self::rain()]
    }

    pub fn named(name: &str) -> Result<Self> {
        match Self::all().into_iter().find(|c| c.name == name) {
            Some(c) => Ok(c),
            None => bail_input!("unknown condition {name:?}; known: day, night, evening, rain"),
        }
    }

    fn sky(&self, dir: &Vec3) -> [f64; 3] {
        let t = dir.y.max(0.0).sqrt();
        std::array::from_fn(|i| self.sky_horizon[i] * (1.0 - t) + self.sky_zenith[i] * t)
    }

    fn grade(&self, c: [f64; 3]) -> [f64; 3] {
        let luma = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        std::array::from_fn(|i| {
            let v = c[i] * (1.0 - self.desaturation) + luma * self.desaturation;
            let v = (v - 0.5) * self.contrast + 0.5;
            (v * self.brightness * self.tint[i]).clamp(0.0, 1.0)
        })
    }
}

struct Hit {
    t: f64,
    normal: Vec3,
    prim: usize,
}

fn intersect(shape: &Shape, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
    match shape {
        Shape::Box { min, max } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis_in = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d[a];
                let (mut ta, mut tb) = ((min[a] - o[a]) * inv, (max[a] - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis_in = a;
                }
                t1 = t1.min(tb);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut n = Vec3::zeros();
            n[axis_in] = -d[axis_in].signum();
            Some((t0, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = o - Vec3::from(*center);
            let b = oc.dot(d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > EPS { -b - s } else { -b + s };
            if t <= EPS {
                return None;
            }
            let n = (o + d * t - Vec3::from(*center)) / *radius;
            Some((t, n))
        }
    }
}

fn closest(prims: &[Primitive], o: &Vec3, d: &Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some((t, normal)) = intersect(&p.shape, o, d) {
            if best.as_ref().map_or(true, |b| t < b.t) {
                best = Some(Hit { t, normal, prim: i });
            }
        }
    }
    best
}

fn occluded(prims: &[Primitive], o: &Vec3, d: &Vec3) -> bool {
    prims.iter().any(|p| intersect(&p.shape, o, d).is_some())
}

fn hash3(a: u64, b: i64, c: i64) -> f64 {
    let h = crate::seed::splitmix64(a ^ crate::seed::splitmix64(b as u64 ^ crate::seed::splitmix64(c as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Surface albedo at `p` and, if the point is a window, its cell key.
fn surface(prim: &Primitive, p: &Vec3, n: &Vec3, origin_z: f64) -> ([f64; 3], Option<(i64, i64)>) {
    let a = prim.albedo;
    let albedo = match prim.kind {
        Kind::Road => {
            let rel = (p.z - origin_z).rem_euclid(6.0);
            let center = p.x.abs() < 0.1 && rel < 3.0;
            let (lo, hi) = match prim.shape {
                Shape::Box { min, max } => (min[0], max[0]),
                Shape::Sphere { .. } => (0.0, 0.0),
            };
            let near_edge = |d: f64| (0.2..0.35).contains(&d);
            if center || near_edge(p.x - lo) || near_edge(hi - p.x) {
                [0.88, 0.88, 0.82]
            } else {
                a
            }
        }
        Kind::Ground => {
            let checker = ((p.x.floor() as i64 + p.z.floor() as i64).rem_euclid(2)) as f64;
            a.map(|c| c * (0.9 + 0.12 * checker))
        }
        Kind::Building => {
            if n.y.abs() > 0.5 || p.y < 1.0 {
                return (a.map(|c| c * 0.8), None);
            }
            let h = if n.x.abs() > 0.5 { p.z } else { p.x };
            let (cu, cv) = (h / 2.5, p.y / 3.0);
            let (fu, fv) = (cu - cu.floor(), cv - cv.floor());
            if (0.25..0.75).contains(&fu) && (0.3..0.78).contains(&fv) {
                return ([0.12, 0.15, 0.20], Some((cu.floor() as i64, cv.floor() as i64)));
            }
            if fv > 0.9 {
                a.map(|c| c * 0.75)
            } else {
                a
            }
        }
        Kind::Car => match prim.shape {
            Shape::Box { max, .. } if p.y > max[1] - 0.55 && n.y.abs() < 0.5 => [0.10, 0.12, 0.15],
            _ => a,
        },
        Kind::Foliage => {
            let v = hash3(prim.id as u64, (p.x * 3.0).floor() as i64 * 131 + (p.y * 3.0).floor() as i64, (p.z * 3.0).floor() as i64);
            a.map(|c| c * (0.8 + 0.35 * v))
        }
        _ => a,
    };
    (albedo, None)
}

/// Color and primitive ID along one camera ray.
fn trace(spec: &SceneSpec, cond: &ConditionParams, lamps: &[Vec3], o: &Vec3, d: &Vec3) -> ([f64; 3], u32) {
    let prims = &spec.primitives;
    let Some(hit) = closest(prims, o, d) else {
        return (cond.grade(cond.sky(d)), SKY_ID);
    };
    let prim = &prims[hit.prim];
    let p = o + d * hit.t;
    let n = hit.normal;
    let (albedo, window) = surface(prim, &p, &n, spec.origin_z);
    let puddle = cond.puddle_fraction > 0.0
        && matches!(prim.kind, Kind::Road | Kind::Ground)
        && n.y > 0.5
        && hash3(spec.seed ^ prim.id as u64, (p.x / PUDDLE_CELL).floor() as i64, (p.z / PUDDLE_CELL).floor() as i64) < cond.puddle_fraction;
    let lift = p + n * 1e-4;

    let mut light = cond.ambient_color.map(|c| c * cond.ambient * (0.75 + 0.25 * n.y.max(0.0)));
    let sun = Vec3::from(cond.sun_dir).normalize();
    let ndl = n.dot(&sun);
    if cond.sun_color.iter().any(|c| *c > 0.0) && ndl > 0.0 && !occluded(prims, &lift, &sun) {
        for i in 0..3 {
            light[i] += cond.sun_color[i] * ndl;
        }
    }
    let mut emission = [0.0; 3];
    if cond.lamps_on {
        if prim.kind == Kind::Lamp {
            emission = cond.lamp_color;
        } else {
            for c in lamps {
                let to = c - p;
                let dist = to.norm();
                if dist > LIGHT_RANGE || dist < 1e-6 {
                    continue;
                }
                let l = to / dist;
                let ndl = n.dot(&l);
                if ndl <= 0.0 {
                    continue;
                }
                // lamp spheres themselves do not cast shadows
                let blocked = prims
                    .iter()
                    .any(|q| q.kind != Kind::Lamp && intersect(&q.shape, &lift, &l).is_some_and(|(t, _)| t < dist - 0.3));
                if blocked {
                    continue;
                }
                let fall = cond.lamp_intensity * ndl / (1.0 + dist * dist);
                for i in 0..3 {
                    light[i] += cond.lamp_color[i] * fall;
                }
            }
        }
    }
    if cond.windows_on {
        if let Some((u, v)) = window {
            if hash3(prim.id as u64, u, v) < cond.window_fraction {
                emission = cond.window_color;
            }
        }
    }
    let mut color: [f64; 3] = std::array::from_fn(|i| albedo[i] * light[i] + emission[i]);
    if puddle {
        let sky = cond.sky(&(d - n * (2.0 * d.dot(&n))));
        color = std::array::from_fn(|i| 0.3 * color[i] + 0.7 * sky[i]);
    }
    (cond.grade(color), prim.id)
}

fn lamp_centers(spec: &SceneSpec) -> Vec<Vec3> {
    spec.primitives
        .iter()
        .filter(|p| p.kind == Kind::Lamp)
        .filter_map(|p| match p.shape {
            Shape::Sphere { center, .. } => Some(Vec3::from(center)),
            Shape::Box { .. } => None,
        })
        .collect()
}

/// Renders one view; returns the 8-bit-quantized image and the primitive ID
/// hit by each pixel-center ray.
pub fn render_view(spec: &SceneSpec, cond: &ConditionParams, camera: &Camera) -> (Image, Vec<u32>) {
    let (w, h) = (camera.width(), camera.height());
    let lamps = lamp_centers(spec);
    let o = camera.center();
    let rows: Vec<(Vec<f32>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut rgb = Vec::with_capacity(w * 3);
            let mut ids = Vec::with_capacity(w);
            for x in 0..w {
                let d = camera.direction(x as f64 + 0.5, y as f64 + 0.5);
                let (c, id) = trace(spec, cond, &lamps, &o, &d);
                rgb.extend(c.map(|v| v as f32));
                ids.push(id);
            }
            (rgb, ids)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    let mut ids = Vec::with_capacity(w * h);
    for (r, i) in rows {
        data.extend(r);
        ids.extend(i);
    }
    let mut image = Image::from_vec(w, h, data).expect("sizes match");
    image.quantize();
    (image, ids)
}

#[derive(Clone, Debug)]
pub struct RenderedScene {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub ids: Vec<Vec<u32>>,
}

/// Renders every pose of `spec` under `cond`.
pub fn render_scene(spec: &SceneSpec, cond: &ConditionParams, width: usize, height: usize) -> Result<RenderedScene> {
    if width % 4 != 0 || height % 4 != 0 {
        bail_input!("render size {width}x{height} must be divisible by 4");
    }
    let cameras = spec.cameras(width, height)?;
    let mut images = Vec::with_capacity(cameras.len());
    let mut ids = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let (im, id) = render_view(spec, cond, cam);
        images.push(im);
        ids.push(id);
    }
    Ok(RenderedScene { images, cameras, ids })
}
