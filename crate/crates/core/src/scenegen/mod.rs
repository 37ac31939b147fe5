//! Procedural street scenes rendered under several weather and lighting
//! conditions.
//!
//! World frame: `X` across the road, `Y` up, `Z` along the road. Training
//! scenes live entirely at `Z < 0` and evaluation scenes at `Z > 0`.

mod dataset;
mod render;

use nalgebra::{Matrix3, Rotation3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail_input, Result};
use crate::geomcam::{Camera, Vec3};
use crate::seed;

pub use dataset::{read_dataset, write_dataset, Manifest, ManifestScene, SceneBundle, MANIFEST_VERSION};
pub use render::{render_scene, render_view, ConditionParams, RenderedScene, SKY_ID};

/// Posed views per scene.
pub const VIEWS_PER_SCENE: usize = 10;
pub const HFOV_DEG: f64 = 70.0;
/// Extent of a scene along the road, relative to its first camera.
pub const SCENE_BEHIND: f64 = 10.0;
pub const SCENE_AHEAD: f64 = 70.0;
/// Range of first-camera positions per region (absolute `Z`).
pub const REGION_START: (f64, f64) = (200.0, 2000.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Train,
    Eval,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Train => "train",
            Region::Eval => "eval",
        }
    }

    /// Open `Z` interval every primitive of this region lies in.
    pub fn z_bounds(self) -> (f64, f64) {
        match self {
            Region::Train => (f64::NEG_INFINITY, 0.0),
            Region::Eval => (0.0, f64::INFINITY),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn z_range(&self) -> (f64, f64) {
        match self {
            Shape::Box { min, max } => (min[2], max[2]),
            Shape::Sphere { center, radius } => (center[2] - radius, center[2] + radius),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Ground,
    Road,
    Building,
    Pole,
    Lamp,
    Car,
    Trunk,
    Foliage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    /// Nonzero; `0` marks sky in primitive-ID maps.
    pub id: u32,
    pub kind: Kind,
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// Camera placement; converted to a [`Camera`] at render resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub eye: [f64; 3],
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl Pose {
    /// World-to-camera rotation with camera axes right, down, forward.
    pub fn rotation(&self) -> Rotation3<f64> {
        let (yaw, pitch) = (self.yaw_deg.to_radians(), self.pitch_deg.to_radians());
        let forward = Vec3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
        let right = forward.cross(&Vec3::y()).normalize();
        let down = forward.cross(&right);
        Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]))
    }

    pub fn camera(&self, hfov_deg: f64, width: usize, height: usize) -> Result<Camera> {
        Camera::from_rotation(self.rotation(), Vec3::from(self.eye), hfov_deg, width, height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub region: Region,
    /// `Z` of the first camera.
    pub origin_z: f64,
    pub hfov_deg: f64,
    pub primitives: Vec<Primitive>,
    pub poses: Vec<Pose>,
}

impl SceneSpec {
    pub fn cameras(&self, width: usize, height: usize) -> Result<Vec<Camera>> {
        self.poses.iter().map(|p| p.camera(self.hfov_deg, width, height)).collect()
    }

    /// Smallest and largest `Z` touched by any primitive.
    pub fn z_extent(&self) -> (f64, f64) {
        self.primitives.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            let (a, b) = p.shape.z_range();
            (lo.min(a), hi.max(b))
        })
    }

    pub fn primitive(&self, id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.id == id)
    }
}

struct Builder {
    prims: Vec<Primitive>,
}

impl Builder {
    fn push(&mut self, kind: Kind, shape: Shape, albedo: [f64; 3]) {
        let id = self.prims.len() as u32 + 1;
        self.prims.push(Primitive { id, kind, shape, albedo });
    }

    fn cuboid(&mut self, kind: Kind, min: [f64; 3], max: [f64; 3], albedo: [f64; 3]) {
        self.push(kind, Shape::Box { min, max }, albedo);
    }
}

fn jitter_color<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.02, 0.95))
}

const FACADES: [[f64; 3]; 6] = [
    [0.72, 0.62, 0.50],
    [0.55, 0.35, 0.28],
    [0.78, 0.78, 0.74],
    [0.45, 0.50, 0.58],
    [0.82, 0.72, 0.45],
    [0.60, 0.65, 0.55],
];

const CAR_PAINT: [[f64; 3]; 6] = [
    [0.75, 0.10, 0.10],
    [0.10, 0.25, 0.70],
    [0.85, 0.85, 0.85],
    [0.12, 0.12, 0.14],
    [0.90, 0.75, 0.15],
    [0.20, 0.55, 0.30],
];

/// Deterministic layout for `seed` inside `region`.
pub fn generate_scene(scene_seed: u64, region: Region) -> SceneSpec {
    let mut rng = seed::rng(seed::derive(scene_seed, region as u64 + 1));
    let start = rng.gen_range(REGION_START.0..REGION_START.1);
    let origin_z = match region {
        Region::Train => -start,
        Region::Eval => start,
    };
    let (z0, z1) = (origin_z - SCENE_BEHIND, origin_z + SCENE_AHEAD);
    let mut b = Builder { prims: Vec::new() };
    b.cuboid(Kind::Ground, [-40.0, -0.2, z0], [40.0, 0.0, z1], jitter_color(&mut rng, [0.50, 0.50, 0.45], 0.05));
    let road_half = rng.gen_range(3.6..4.4);
    b.cuboid(Kind::Road, [-road_half, 0.0, z0], [road_half, 0.02, z1], jitter_color(&mut rng, [0.24, 0.24, 0.26], 0.03));

    for side in [-1.0f64, 1.0] {
        // Buildings: a row of blocks with small gaps.
        let mut z = z0 + rng.gen_range(0.0..4.0);
        while z < z1 - 4.0 {
            let len = rng.gen_range(6.0..15.0f64).min(z1 - z);
            let inner = road_half + rng.gen_range(2.5..4.5);
            let depth = rng.gen_range(6.0..12.0);
            let height = rng.gen_range(4.0..18.0);
            let (xa, xb) = if side > 0.0 { (inner, inner + depth) } else { (-inner - depth, -inner) };
            let color = FACADES[rng.gen_range(0..FACADES.len())];
            b.cuboid(Kind::Building, [xa, 0.0, z], [xb, height, z + len], jitter_color(&mut rng, color, 0.06));
            z += len + rng.gen_range(0.0..4.0);
        }
        // Street lamps.
        let spacing = rng.gen_range(10.0..14.0);
        let mut z = z0 + rng.gen_range(0.0..spacing);
        let x = side * (road_half + 0.8);
        while z < z1 {
            b.cuboid(Kind::Pole, [x - 0.08, 0.0, z - 0.08], [x + 0.08, 4.5, z + 0.08], [0.30, 0.30, 0.32]);
            b.push(
                Kind::Lamp,
                Shape::Sphere {
                    center: [x - side * 0.3, 4.6, z],
                    radius: 0.28,
                },
                [0.85, 0.85, 0.80],
            );
            z += spacing;
        }
        // Parked cars.
        for _ in 0..rng.gen_range(1..4) {
            let zc = rng.gen_range(origin_z + 2.0..z1 - 6.0);
            let xc = side * (road_half - 1.1);
            let paint = CAR_PAINT[rng.gen_range(0..CAR_PAINT.len())];
            b.cuboid(Kind::Car, [xc - 0.9, 0.02, zc], [xc + 0.9, 1.4, zc + 4.2], jitter_color(&mut rng, paint, 0.04));
        }
        // Trees between lamps.
        for _ in 0..rng.gen_range(1..4) {
            let zt = rng.gen_range(z0 + 2.0..z1 - 2.0);
            let xt = side * (road_half + 1.6);
            b.cuboid(Kind::Trunk, [xt - 0.15, 0.0, zt - 0.15], [xt + 0.15, 2.6, zt + 0.15], [0.35, 0.24, 0.15]);
            let r = rng.gen_range(1.0..1.6);
            b.push(
                Kind::Foliage,
                Shape::Sphere {
                    center: [xt, 2.6 + r * 0.8, zt],
                    radius: r,
                },
                jitter_color(&mut rng, [0.22, 0.48, 0.20], 0.06),
            );
        }
    }

    let poses = (0..VIEWS_PER_SCENE)
        .map(|i| Pose {
            eye: [rng.gen_range(-0.25..0.25), 1.6 + rng.gen_range(-0.1..0.1), origin_z + i as f64],
            yaw_deg: rng.gen_range(-3.0..3.0),
            pitch_deg: -3.0 + rng.gen_range(-2.0..2.0),
        })
        .collect();
    SceneSpec {
        seed: scene_seed,
        region,
        origin_z,
        hfov_deg: HFOV_DEG,
        primitives: b.prims,
        poses,
    }
}

/// Validates the structural invariants of a spec.
pub fn check_spec(spec: &SceneSpec) -> Result<()> {
    if spec.primitives.len() < 3 {
        bail_input!("scene needs at least 3 primitives");
    }
    if spec.poses.len() < 2 {
        bail_input!("scene needs at least 2 poses");
    }
    for (i, a) in spec.poses.iter().enumerate() {
        for b in &spec.poses[i + 1..] {
            if a == b {
                bail_input!("scene poses must be pairwise distinct");
            }
        }
    }
    let (lo, hi) = spec.region.z_bounds();
    let (zmin, zmax) = spec.z_extent();
    if !(zmin > lo && zmax < hi) {
        bail_input!("scene extent {zmin}..{zmax} leaves the {} region", spec.region.name());
    }
    Ok(())
}
