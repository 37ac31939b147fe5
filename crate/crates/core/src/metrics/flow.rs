//! Coarse-to-fine block-matching optical flow on luma.

use crate::error::{bail_input, Result};
use crate::Image;

pub const DEFAULT_LEVELS: usize = 3;
pub const DEFAULT_PATCH: usize = 7;
/// Integer search radius per pyramid level, in pixels of that level.
pub const SEARCH_RADIUS: i32 = 3;

/// Per-pixel displacement `(dx, dy)` such that `prev(p) ≈ next(p + d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl FlowField {
    fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 2]; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }

    /// Mean over pixels of `|Δdx| + |Δdy|`.
    pub fn mean_l1_diff(&self, other: &FlowField) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            bail_input!("flow fields differ in size");
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Component-wise medians.
    pub fn median(&self) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let mut v: Vec<f64> = self.data.iter().map(|d| d[c]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            *o = v[v.len() / 2];
        }
        out
    }
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn get(&self, x: i64, y: i64) -> f64 {
        let xc = x.clamp(0, self.w as i64 - 1) as usize;
        let yc = y.clamp(0, self.h as i64 - 1) as usize;
        self.v[yc * self.w + xc]
    }

    fn half(&self) -> Plane {
        let (w, h) = (self.w.div_ceil(2), self.h.div_ceil(2));
        let mut v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (2 * x as i64, 2 * y as i64);
                v[y * w + x] = 0.25 * (self.get(sx, sy) + self.get(sx + 1, sy) + self.get(sx, sy + 1) + self.get(sx + 1, sy + 1));
            }
        }
        Plane { w, h, v }
    }
}

fn ssd(a: &Plane, b: &Plane, x: i64, y: i64, dx: i64, dy: i64, r: i64) -> f64 {
    let mut s = 0.0;
    for py in -r..=r {
        for px in -r..=r {
            let d = a.get(x + px, y + py) - b.get(x + px + dx, y + py + dy);
            s += d * d;
        }
    }
    s
}

/// Vertex offset of the parabola through `(-1, cm)`, `(0, c0)`, `(1, cp)`.
fn parabolic(cm: f64, c0: f64, cp: f64) -> f64 {
    let den = cm - 2.0 * c0 + cp;
    if c0 == 0.0 || den <= 0.0 {
        return 0.0;
    }
    (0.5 * (cm - cp) / den).clamp(-0.5, 0.5)
}

/// Pyramidal block matching: `levels` levels, `patch`×`patch` SSD blocks,
/// `±SEARCH_RADIUS` integer search around the upsampled coarser estimate,
/// parabolic sub-pixel refinement at the finest level.
pub fn optical_flow(prev: &Image, next: &Image, levels: usize, patch: usize) -> Result<FlowField> {
    if !prev.same_shape(next) {
        bail_input!("flow frames differ in size");
    }
    if levels == 0 || patch % 2 == 0 {
        bail_input!("flow needs at least one level and an odd patch size");
    }
    let plane = |im: &Image| Plane {
        w: im.width(),
        h: im.height(),
        v: im.luma(),
    };
    let mut pa = vec![plane(prev)];
    let mut pb = vec![plane(next)];
    for _ in 1..levels {
        let (a, b) = (pa.last().expect("nonempty").half(), pb.last().expect("nonempty").half());
        pa.push(a);
        pb.push(b);
    }
    let r = (patch / 2) as i64;
    let mut flow: Option<FlowField> = None;
    for level in (0..levels).rev() {
        let (a, b) = (&pa[level], &pb[level]);
        let mut cur = FlowField::zeros(a.w, a.h);
        for y in 0..a.h {
            for x in 0..a.w {
                let guess = match &flow {
                    Some(f) => {
                        let g = f.at((x / 2).min(f.width - 1), (y / 2).min(f.height - 1));
                        [2.0 * g[0], 2.0 * g[1]]
                    }
                    None => [0.0, 0.0],
                };
                let (gx, gy) = (guess[0].round() as i64, guess[1].round() as i64);
                let (xi, yi) = (x as i64, y as i64);
                let mut best = (ssd(a, b, xi, yi, gx, gy, r), 0i64, 0i64);
                for dy in -SEARCH_RADIUS as i64..=SEARCH_RADIUS as i64 {
                    for dx in -SEARCH_RADIUS as i64..=SEARCH_RADIUS as i64 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let c = ssd(a, b, xi, yi, gx + dx, gy + dy, r);
                        // strict improvement keeps the smallest displacement on ties
                        if c < best.0 {
                            best = (c, dx, dy);
                        }
                    }
                }
                let (c0, bx, by) = (best.0, gx + best.1, gy + best.2);
                let (mut fx, mut fy) = (bx as f64, by as f64);
                if level == 0 {
                    fx += parabolic(ssd(a, b, xi, yi, bx - 1, by, r), c0, ssd(a, b, xi, yi, bx + 1, by, r));
                    fy += parabolic(ssd(a, b, xi, yi, bx, by - 1, r), c0, ssd(a, b, xi, yi, bx, by + 1, r));
                }
                cur.data[y * a.w + x] = [fx, fy];
            }
        }
        flow = Some(cur);
    }
    Ok(flow.expect("at least one level"))
}
