//! Pinhole cameras, ray casting, depth sampling and bilinear feature lookup.
//!
//! Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) × [j, j+1)`
//! and its center sits at `(i + 0.5, j + 0.5)`. Feature grids are addressed
//! in node coordinates, where node `(i, j)` is exactly at integer `(i, j)`.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BilinearTaps, Real, Tensor};
use crate::error::{bail_input, Result};
use crate::seed;

pub type Vec3 = Vector3<f64>;

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    world_to_cam: Matrix4<f64>,
    width: usize,
    height: usize,
}

/// Row-major on-disk form of a [`Camera`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub intrinsics: [f64; 9],
    pub world_to_cam: [f64; 16],
    pub width: usize,
    pub height: usize,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = crate::Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&r.intrinsics),
            Matrix4::from_row_slice(&r.world_to_cam),
            r.width,
            r.height,
        )
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let mut intrinsics = [0.0; 9];
        let mut world_to_cam = [0.0; 16];
        for r in 0..3 {
            for col in 0..3 {
                intrinsics[r * 3 + col] = c.intrinsics[(r, col)];
            }
        }
        for r in 0..4 {
            for col in 0..4 {
                world_to_cam[r * 4 + col] = c.world_to_cam[(r, col)];
            }
        }
        CameraRecord {
            intrinsics,
            world_to_cam,
            width: c.width,
            height: c.height,
        }
    }
}

/// Result of projecting a world point; `depth <= 0` means behind the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > MIN_DEPTH
    }
}

impl Camera {
    pub fn new(intrinsics: Matrix3<f64>, world_to_cam: Matrix4<f64>, width: usize, height: usize) -> Result<Self> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            bail_input!("focal lengths must be positive");
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            bail_input!("intrinsics must be a zero-skew pinhole matrix");
        }
        let r = world_to_cam.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            bail_input!("world-to-camera rotation is not orthonormal (error {err:e})");
        }
        let bottom = world_to_cam.fixed_view::<1, 4>(3, 0);
        if bottom[0] != 0.0 || bottom[1] != 0.0 || bottom[2] != 0.0 || bottom[3] != 1.0 {
            bail_input!("world-to-camera transform must have bottom row [0 0 0 1]");
        }
        if width < 8 || height < 8 {
            bail_input!("camera resolution {width}x{height} is below 8x8");
        }
        if !intrinsics.iter().chain(world_to_cam.iter()).all(|v| v.is_finite()) {
            bail_input!("camera contains non-finite values");
        }
        Ok(Self {
            intrinsics,
            world_to_cam,
            width,
            height,
        })
    }

    pub fn pinhole(focal: f64, cx: f64, cy: f64, width: usize, height: usize, world_to_cam: Matrix4<f64>) -> Result<Self> {
        let k = Matrix3::new(focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0);
        Self::new(k, world_to_cam, width, height)
    }

    /// Camera at `eye` with the given world-to-camera rotation and a
    /// centered principal point; `hfov_deg` is the horizontal field of view.
    pub fn from_rotation(rotation: Rotation3<f64>, eye: Vec3, hfov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let focal = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let r = rotation.matrix();
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::pinhole(focal, 0.5 * width as f64, 0.5 * height as f64, width, height, m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_cam(&self) -> &Matrix4<f64> {
        &self.world_to_cam
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    /// World-space optical axis.
    pub fn forward(&self) -> Vec3 {
        self.rotation().transpose() * Vec3::z()
    }

    pub fn project(&self, x: &Vec3) -> Projection {
        let pc = self.rotation() * x + self.translation();
        let depth = pc.z;
        if depth.abs() < f64::MIN_POSITIVE {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                depth: 0.0,
            };
        }
        let k = &self.intrinsics;
        Projection {
            u: k[(0, 0)] * pc.x / depth + k[(0, 2)],
            v: k[(1, 1)] * pc.y / depth + k[(1, 2)],
            depth,
        }
    }

    /// Unit-length world direction through continuous pixel position `(px, py)`.
    pub fn direction(&self, px: f64, py: f64) -> Vec3 {
        let k = &self.intrinsics;
        let dc = Vec3::new((px - k[(0, 2)]) / k[(0, 0)], (py - k[(1, 2)]) / k[(1, 1)], 1.0);
        (self.rotation().transpose() * dc).normalize()
    }

    pub fn ray_for_pixel(&self, px: f64, py: f64, near: f64, far: f64) -> Result<Ray> {
        if !(0.0..self.width as f64).contains(&px) || !(0.0..self.height as f64).contains(&py) {
            bail_input!("pixel ({px}, {py}) outside {}x{} image", self.width, self.height);
        }
        Ray::new(self.center(), self.direction(px, py), near, far)
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_center_ray(&self, x: usize, y: usize, near: f64, far: f64) -> Result<Ray> {
        self.ray_for_pixel(x as f64 + 0.5, y as f64 + 0.5, near, far)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Builds a ray, normalizing `direction`.
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0 && n.is_finite()) {
            bail_input!("ray direction must be nonzero and finite");
        }
        if !(0.0 < near && near < far) {
            bail_input!("ray bounds must satisfy 0 < near < far, got {near}..{far}");
        }
        Ok(Self {
            origin,
            direction: direction / n,
            near,
            far,
        })
    }

    pub fn point_at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points: Vec<Vec3>,
    pub view_dir: Vec3,
}

/// `m` depths partitioning `[near, far]` into equal bins: bin midpoints, or
/// one uniform draw per bin when `stratified`.
pub fn sample_along_ray(ray: &Ray, m: usize, stratified: bool, rng_seed: u64) -> Result<RaySamples> {
    if m < 2 {
        bail_input!("need at least 2 samples per ray, got {m}");
    }
    let width = (ray.far - ray.near) / m as f64;
    let mut rng = seed::rng(rng_seed);
    let depths: Vec<f64> = (0..m)
        .map(|i| {
            let offset = if stratified { rng.gen::<f64>() } else { 0.5 };
            ray.near + (i as f64 + offset) * width
        })
        .collect();
    let points = depths.iter().map(|t| ray.point_at(*t)).collect();
    Ok(RaySamples {
        depths,
        points,
        view_dir: ray.direction,
    })
}

/// Bilinear taps for node coordinates `(gx, gy)` on a `height × width` grid,
/// or `None` outside `[0, width-1] × [0, height-1]`.
pub fn bilinear_taps<T: Real>(height: usize, width: usize, gx: f64, gy: f64) -> Option<BilinearTaps<T>> {
    if width == 0 || height == 0 {
        return None;
    }
    if !(gx >= 0.0 && gx <= (width - 1) as f64 && gy >= 0.0 && gy <= (height - 1) as f64) {
        return None;
    }
    let x0 = (gx.floor() as usize).min(width.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    let at = |x: usize, y: usize| (y * width + x) as u32;
    Some(BilinearTaps {
        idx: [at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1)],
        w: [
            T::of((1.0 - fx) * (1.0 - fy)),
            T::of(fx * (1.0 - fy)),
            T::of((1.0 - fx) * fy),
            T::of(fx * fy),
        ],
    })
}

/// Bilinear interpolation of a `height × width × channels` grid stored as
/// `[height·width, channels]`. Returns the zero vector and `false` outside.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, height: usize, width: usize, u: f64, v: f64) -> (Vec<T>, bool) {
    let c = map.cols();
    let mut out = vec![T::zero(); c];
    match bilinear_taps::<T>(height, width, u, v) {
        None => (out, false),
        Some(taps) => {
            for t in 0..4 {
                let row = map.row(taps.idx[t] as usize);
                for (o, x) in out.iter_mut().zip(row) {
                    *o += taps.w[t] * *x;
                }
            }
            (out, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(f: f64, c: f64) -> Camera {
        Camera::pinhole(f, c, c, 100, 100, Matrix4::identity()).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = identity_cam(100.0, 50.0);
        let ray = cam.ray_for_pixel(50.0, 50.0, 0.1, 10.0).unwrap();
        assert!((ray.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn offset_pixel_ray_follows_similar_triangles() {
        let cam = Camera::pinhole(100.0, 50.0, 50.0, 200, 100, Matrix4::identity()).unwrap();
        let ray = cam.ray_for_pixel(150.0, 50.0, 0.1, 10.0).unwrap();
        let expect = Vec3::new(1.0, 0.0, 1.0).normalize();
        assert!((ray.direction - expect).norm() < 1e-15);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let cam = identity_cam(100.0, 50.0);
        assert!(cam.ray_for_pixel(-0.1, 3.0, 0.1, 1.0).is_err());
        assert!(cam.ray_for_pixel(3.0, 100.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn project_identity_and_degenerate_center() {
        let cam = identity_cam(100.0, 50.0);
        let p = cam.project(&Vec3::new(0.0, 0.0, 1.0));
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 1.0));
        let c = cam.project(&cam.center());
        assert_eq!(c.depth, 0.0);
        assert!(!c.in_front());
        assert!(!cam.project(&Vec3::new(0.0, 0.0, -2.0)).in_front());
    }

    #[test]
    fn camera_invariants_are_enforced() {
        let mut k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(k, Matrix4::identity(), 7, 100).is_err());
        k[(0, 1)] = 0.5;
        assert!(Camera::new(k, Matrix4::identity(), 100, 100).is_err());
        let mut m = Matrix4::identity();
        m[(0, 0)] = 1.1;
        assert!(Camera::pinhole(10.0, 4.0, 4.0, 8, 8, m).is_err());
        assert!(Camera::pinhole(-10.0, 4.0, 4.0, 8, 8, Matrix4::identity()).is_err());
    }

    pub(crate) fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let rot = Rotation3::from_scaled_axis(axis);
        let eye = Vec3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-5.0..5.0), rng.gen_range(-50.0..50.0));
        let w = rng.gen_range(16..300);
        let h = rng.gen_range(16..300);
        Camera::from_rotation(rot, eye, rng.gen_range(30.0..100.0), w, h).unwrap()
    }

    #[test]
    fn ray_projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let u = rng.gen_range(0.0..cam.width() as f64);
            let v = rng.gen_range(0.0..cam.height() as f64);
            let ray = cam.ray_for_pixel(u, v, 0.1, 100.0).unwrap();
            let t = rng.gen_range(ray.near..ray.far);
            let x = ray.point_at(t);
            let p = cam.project(&x);
            assert!((p.u - u).abs() < 1e-6 && (p.v - v).abs() < 1e-6, "{u},{v} -> {p:?}");
            // back through the projected pixel at the projected depth
            let back = cam.ray_for_pixel(p.u.clamp(0.0, cam.width() as f64 - 1e-9), p.v.clamp(0.0, cam.height() as f64 - 1e-9), 0.1, 100.0).unwrap();
            let cos = back.direction.dot(&cam.forward());
            let x2 = back.point_at(p.depth / cos);
            assert!((x2 - x).norm() < 1e-6 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn midpoint_samples() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1.0, 3.0).unwrap();
        assert_eq!(sample_along_ray(&ray, 2, false, 0).unwrap().depths, vec![1.5, 2.5]);
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 1e-9, 1.0).unwrap();
        let s = sample_along_ray(&ray, 4, false, 0).unwrap();
        for (t, e) in s.depths.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert!((t - e).abs() < 1e-8);
        }
        assert!(sample_along_ray(&ray, 1, false, 0).is_err());
    }

    #[test]
    fn stratified_samples_stay_in_their_bins() {
        let ray = Ray::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.3, -0.2, 1.0), 0.5, 4.5).unwrap();
        let m = 8;
        for s in 0..10_000u64 {
            let out = sample_along_ray(&ray, m, true, s).unwrap();
            for (i, t) in out.depths.iter().enumerate() {
                let lo = 0.5 + 4.0 * i as f64 / m as f64;
                let hi = 0.5 + 4.0 * (i + 1) as f64 / m as f64;
                assert!(*t >= lo && *t < hi);
            }
            for (x, t) in out.points.iter().zip(&out.depths) {
                assert_eq!(*x, ray.origin + ray.direction * *t);
            }
        }
        let a = sample_along_ray(&ray, m, true, 99).unwrap();
        let b = sample_along_ray(&ray, m, true, 99).unwrap();
        assert_eq!(a, b);
    }

    fn ramp_map(h: usize, w: usize) -> Tensor<f64> {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[x as f64, y as f64, 2.0 * x as f64 - 3.0 * y as f64 + 1.0]);
            }
        }
        Tensor::from_vec(&[h * w, 3], data).unwrap()
    }

    #[test]
    fn bilinear_exact_on_nodes_and_linear_on_ramps() {
        let (h, w) = (5, 7);
        let map = ramp_map(h, w);
        let (v, ok) = bilinear_sample(&map, h, w, 3.0, 2.0);
        assert!(ok);
        assert_eq!(v, vec![3.0, 2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let u = rng.gen_range(0.0..=(w - 1) as f64);
            let vv = rng.gen_range(0.0..=(h - 1) as f64);
            let (s, ok) = bilinear_sample(&map, h, w, u, vv);
            assert!(ok);
            assert!((s[0] - u).abs() < 1e-6 && (s[1] - vv).abs() < 1e-6);
            assert!((s[2] - (2.0 * u - 3.0 * vv + 1.0)).abs() < 1e-6);
        }
        // far edge is inside
        assert!(bilinear_sample(&map, h, w, 6.0, 4.0).1);
    }

    #[test]
    fn bilinear_midpoint_and_outside() {
        let map = Tensor::from_vec(&[2, 1], vec![2.0, 6.0]).unwrap();
        // 1 row, 2 columns
        let (v, ok) = bilinear_sample(&map, 1, 2, 0.5, 0.0);
        assert!(ok);
        assert_eq!(v, vec![4.0]);
        let (v, ok) = bilinear_sample(&map, 1, 2, -0.5, 0.0);
        assert!(!ok);
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        use crate::diffcore::{grad_check, normal_tensor};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, c) = (4, 5, 3);
        let map: Tensor<f64> = normal_tensor(&mut rng, &[h * w, c], 1.0);
        let queries: Vec<(f64, f64)> = (0..20).map(|_| (rng.gen_range(-0.5..4.5), rng.gen_range(-0.5..3.5))).collect();
        let weights: Tensor<f64> = normal_tensor(&mut rng, &[20, c], 1.0);
        let err = grad_check(
            |g, m| {
                let taps = queries.iter().map(|(u, v)| bilinear_taps(h, w, *u, *v)).collect();
                let s = g.gather(m, taps)?;
                let wv = g.constant(weights.clone());
                let p = g.mul(s, wv)?;
                let p2 = g.mul(p, p)?;
                Ok(g.sum(p2))
            },
            &map,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn camera_serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam = random_camera(&mut rng);
        let s = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(cam, back);
    }
}
