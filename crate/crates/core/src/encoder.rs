//! Convolutional per-view encoder producing stride-1 feature maps.

use rand::Rng;

use crate::diffcore::{normal_tensor, Activation, Bound, ConvShape, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{bail_input, Result};
use crate::geomcam::{bilinear_sample, Camera, Vec3};
use crate::Image;

/// Feature grid stored as `[height·width, channels]` rows in HWC order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub grid: Tensor<T>,
    pub height: usize,
    pub width: usize,
    /// Source pixels per feature cell.
    pub stride: usize,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.grid.cols()
    }

    /// Node coordinates of continuous pixel position `(u, v)`.
    pub fn grid_coords(&self, u: f64, v: f64) -> (f64, f64) {
        let s = self.stride as f64;
        (u / s - 0.5, v / s - 0.5)
    }

    /// Projects `x` into `camera` and samples the map there.
    pub fn feature_at(&self, camera: &Camera, x: &Vec3) -> (Vec<T>, bool) {
        let p = camera.project(x);
        if !p.in_front() {
            return (vec![T::zero(); self.channels()], false);
        }
        let (gx, gy) = self.grid_coords(p.u, p.v);
        bilinear_sample(&self.grid, self.height, self.width, gx, gy)
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
}

/// Parameter handles of the U-Net-lite encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    down0: Conv,
    down1: Conv,
    down2: Conv,
    up1: Conv,
    merge1: Conv,
    up0: Conv,
    out: Conv,
    channels: usize,
}

const C0: usize = 16;
const C1: usize = 32;
const C2: usize = 64;

fn add_conv<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, kernel: usize, stride: usize, cin: usize, cout: usize) -> Conv {
    let fan_in = kernel * kernel * cin;
    let w = store.add(format!("encoder.{name}.w"), normal_tensor(rng, &[fan_in, cout], (2.0 / fan_in as f64).sqrt()));
    let b = store.add(format!("encoder.{name}.b"), Tensor::zeros(&[cout]));
    Conv { w, b, kernel, stride }
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: usize) -> Self {
        Self {
            down0: add_conv(store, rng, "down0", 3, 1, 3, C0),
            down1: add_conv(store, rng, "down1", 3, 2, C0, C1),
            down2: add_conv(store, rng, "down2", 3, 2, C1, C2),
            up1: add_conv(store, rng, "up1", 3, 1, C2, C1),
            merge1: add_conv(store, rng, "merge1", 1, 1, 2 * C1, C1),
            up0: add_conv(store, rng, "up0", 3, 1, C1, C0),
            out: add_conv(store, rng, "out", 1, 1, 2 * C0 + 3, channels),
            channels,
        }
    }

    /// Re-resolves handles by name in a store laid out by [`Encoder::new`].
    pub fn find<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let conv = |name: &str, kernel, stride| -> Result<Conv> {
            let w = store.find(&format!("encoder.{name}.w"));
            let b = store.find(&format!("encoder.{name}.b"));
            match (w, b) {
                (Some(w), Some(b)) => Ok(Conv { w, b, kernel, stride }),
                _ => bail_input!("parameter store has no encoder layer {name}"),
            }
        };
        let out = conv("out", 1, 1)?;
        let channels = store.get(out.w).cols();
        Ok(Self {
            down0: conv("down0", 3, 1)?,
            down1: conv("down1", 3, 2)?,
            down2: conv("down2", 3, 2)?,
            up1: conv("up1", 3, 1)?,
            merge1: conv("merge1", 1, 1)?,
            up0: conv("up0", 3, 1)?,
            out,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Records the encoder on `g`, returning a `[height·width, channels]` map.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bound: &Bound, image: &Image) -> Result<Var> {
        let (h, w) = (image.height(), image.width());
        if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
            bail_input!("encoder input {w}x{h} must be at least 16x16 with sides divisible by 4");
        }
        let data: Vec<T> = image.data().iter().map(|v| T::of(*v as f64)).collect();
        let rgb = g.constant(Tensor::from_vec(&[h * w, 3], data)?);
        let conv = |g: &mut Graph<T>, x: Var, c: Conv, height: usize, width: usize, act: Activation| -> Result<Var> {
            let shape = ConvShape {
                height,
                width,
                kernel: c.kernel,
                stride: c.stride,
            };
            let y = g.conv2d(x, bound.var(c.w), shape)?;
            let y = g.add_row(y, bound.var(c.b))?;
            Ok(act.apply(g, y))
        };
        let act = Activation::Gelu;
        let s0 = conv(g, rgb, self.down0, h, w, act)?;
        let s1 = conv(g, s0, self.down1, h, w, act)?;
        let s2 = conv(g, s1, self.down2, h / 2, w / 2, act)?;
        let u1 = conv(g, s2, self.up1, h / 4, w / 4, act)?;
        let u1 = g.upsample2(u1, h / 4, w / 4)?;
        let u1 = g.concat_cols(u1, s1)?;
        let u1 = conv(g, u1, self.merge1, h / 2, w / 2, act)?;
        let u0 = conv(g, u1, self.up0, h / 2, w / 2, act)?;
        let u0 = g.upsample2(u0, h / 2, w / 2)?;
        let u0 = g.concat_cols(u0, s0)?;
        let u0 = g.concat_cols(u0, rgb)?;
        conv(g, u0, self.out, h, w, Activation::Identity)
    }

    /// Gradient-free encoding of one image.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Image) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, image)?;
        Ok(FeatureMap {
            grid: g.value(out).clone(),
            height: image.height(),
            width: image.width(),
            stride: 1,
        })
    }
}
