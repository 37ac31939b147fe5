//! Operation tape with reverse-mode gradients.
//!
//! A [`Graph`] records every operator application as a node holding its
//! output value and whatever the backward pass needs. Nodes are appended in
//! evaluation order, so a single reverse sweep from the loss visits every
//! node after all of its consumers.

use super::{Real, Tensor};
use crate::error::{bail_input, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Four weighted texel reads producing one bilinear sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTaps<T> {
    pub idx: [u32; 4],
    pub w: [T; 4],
}

/// Geometry of a 2D convolution over an `height × width` HWC grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

/// Attention probabilities of one call, laid out `[groups, heads, lq, lk]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMaps<T> {
    pub groups: usize,
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub probs: Vec<T>,
}

impl<T: Real> AttnMaps<T> {
    pub fn row(&self, group: usize, head: usize, query: usize) -> &[T] {
        let start = ((group * self.heads + head) * self.lq + query) * self.lk;
        &self.probs[start..start + self.lk]
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MaskRows(Var, Vec<T>),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        lq: usize,
        lk: usize,
        probs: Vec<T>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    MeanGroups(Var, usize),
    TileRows(Var),
    Gather {
        map: Var,
        taps: Vec<Option<BilinearTaps<T>>>,
    },
    Conv2d {
        x: Var,
        w: Var,
        shape: ConvShape,
        cols: Vec<T>,
    },
    Upsample2 {
        x: Var,
        height: usize,
        width: usize,
    },
    Mse(Var, Vec<T>),
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanhf` is several times slower.
#[inline]
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + fast_tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = fast_tanh(u);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (oi, xi) in o.iter_mut().zip(row) {
            *oi = (*xi - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by operator");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Input node. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn t(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Matrix product over the `rows × cols` view of both operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.rank() != 2 || bv.shape()[0] != k {
            bail_input!("matmul shape mismatch: {:?} x {:?}", av.shape(), bv.shape());
        }
        let m = bv.shape()[1];
        let mut out = vec![T::zero(); n * m];
        T::gemm(n, k, m, av.data(), false, bv.data(), false, T::zero(), &mut out);
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(Tensor::from_vec(&[n, m], out)?, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail_input!("add shape mismatch: {:?} vs {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Adds the single row `b` (length `cols(a)`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let c = av.cols();
        if bv.len() != c {
            bail_input!("row bias of length {} for {} columns", bv.len(), c);
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            add_into(row, bv.data());
        }
        let value = Tensor::from_vec(av.shape(), data)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, Op::AddRow(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            bail_input!("mul shape mismatch: {:?} vs {:?}", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * s).collect();
        let value = Tensor::from_vec(av.shape(), data).expect("same shape");
        let tracked = self.t(a);
        self.push(value, Op::Scale(a, s), tracked)
    }

    /// Multiplies row `r` of `a` by the constant `mask[r]`.
    pub fn mask_rows(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if mask.len() != av.rows() {
            bail_input!("row mask of length {} for {} rows", mask.len(), av.rows());
        }
        let mut data = av.data().to_vec();
        for (row, m) in data.chunks_exact_mut(c).zip(&mask) {
            row.iter_mut().for_each(|x| *x *= *m);
        }
        let value = Tensor::from_vec(av.shape(), data)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::MaskRows(a, mask), tracked))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| gelu(*x)).collect();
        let value = Tensor::from_vec(av.shape(), data).expect("same shape");
        let tracked = self.t(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| sigmoid(*x)).collect();
        let value = Tensor::from_vec(av.shape(), data).expect("same shape");
        let tracked = self.t(a);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = softmax_rows(av.data(), av.cols());
        let value = Tensor::from_vec(av.shape(), data).expect("same shape");
        let tracked = self.t(a);
        self.push(value, Op::Softmax(a), tracked)
    }

    /// Normalizes every row of `x` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of length `cols(x)`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if c < 2 {
            bail_input!("layer norm needs at least 2 features, got {c}");
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != c || bv.len() != c {
            bail_input!("layer norm affine parameters must have length {c}");
        }
        let n = T::of(c as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); xv.rows()];
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        let tracked = self.t(x) || self.t(gain) || self.t(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            tracked,
        ))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` holds `groups·lq` rows, `k` and `v` hold `groups·lk` rows; each
    /// group attends only within itself. `key_bias` (length `groups·lk`) is
    /// added to the scores; `-inf` removes a key. A query whose keys are all
    /// removed gets a zero output and an all-zero probability row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        key_bias: Option<&[T]>,
    ) -> Result<(Var, AttnMaps<T>)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dv = vv.cols();
        if groups == 0 || heads == 0 {
            bail_input!("attention needs at least one group and one head");
        }
        if d % heads != 0 || dv % heads != 0 {
            bail_input!("token widths {d}/{dv} are not divisible by {heads} heads");
        }
        if kv.cols() != d || kv.rows() != vv.rows() {
            bail_input!("key/value shapes {:?}/{:?} do not match query {:?}", kv.shape(), vv.shape(), qv.shape());
        }
        if qv.rows() % groups != 0 || kv.rows() % groups != 0 {
            bail_input!("token counts are not divisible by {groups} groups");
        }
        let lq = qv.rows() / groups;
        let lk = kv.rows() / groups;
        if let Some(b) = key_bias {
            if b.len() != groups * lk {
                bail_input!("key bias has length {}, expected {}", b.len(), groups * lk);
            }
        }
        let dh = d / heads;
        let dvh = dv / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); groups * heads * lq * lk];
        let mut out = vec![T::zero(); groups * lq * dv];
        let mut s = vec![T::zero(); lk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(g * lq + i) * d + h * dh..][..dh];
                    let mut m = T::neg_infinity();
                    for (j, sj) in s.iter_mut().enumerate() {
                        let krow = &kd[(g * lk + j) * d + h * dh..][..dh];
                        let mut acc = T::zero();
                        for c in 0..dh {
                            acc += qrow[c] * krow[c];
                        }
                        let b = key_bias.map_or(T::zero(), |b| b[g * lk + j]);
                        *sj = acc * scale + b;
                        m = m.max(*sj);
                    }
                    if m == T::neg_infinity() {
                        continue;
                    }
                    let p = &mut probs[((g * heads + h) * lq + i) * lk..][..lk];
                    let mut total = T::zero();
                    for j in 0..lk {
                        p[j] = (s[j] - m).exp();
                        total += p[j];
                    }
                    let orow = &mut out[(g * lq + i) * dv + h * dvh..][..dvh];
                    for j in 0..lk {
                        p[j] /= total;
                        let vrow = &vd[(g * lk + j) * dv + h * dvh..][..dvh];
                        for c in 0..dvh {
                            orow[c] += p[j] * vrow[c];
                        }
                    }
                }
            }
        }
        let maps = AttnMaps {
            groups,
            heads,
            lq,
            lk,
            probs: probs.clone(),
        };
        let value = Tensor::from_vec(&[groups * lq, dv], out)?;
        let tracked = self.t(q) || self.t(k) || self.t(v);
        let var = self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                lq,
                lk,
                probs,
            },
            tracked,
        );
        Ok((var, maps))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            bail_input!("concat_cols row mismatch: {} vs {}", av.rows(), bv.rows());
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks_exact(ca).zip(bv.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::from_vec(&[av.rows(), ca + cb], data)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, Op::ConcatCols(a, b), tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            bail_input!("concat_rows of an empty list");
        };
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != c {
                bail_input!("concat_rows column mismatch: {} vs {}", pv.cols(), c);
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let tracked = parts.iter().any(|p| self.t(*p));
        let value = Tensor::from_vec(&[rows, c], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Mean over consecutive runs of `group_len` rows.
    pub fn mean_groups(&mut self, x: Var, group_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if group_len == 0 || xv.rows() % group_len != 0 {
            bail_input!("{} rows cannot be pooled in groups of {group_len}", xv.rows());
        }
        let groups = xv.rows() / group_len;
        let inv = T::one() / T::of(group_len as f64);
        let mut out = vec![T::zero(); groups * c];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            add_into(&mut out[(r / group_len) * c..][..c], row);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_vec(&[groups, c], out)?;
        let tracked = self.t(x);
        Ok(self.push(value, Op::MeanGroups(x, group_len), tracked))
    }

    /// Repeats a single row `n` times.
    pub fn tile_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            bail_input!("tile_rows expects a single row, got {:?}", xv.shape());
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::from_vec(&[n, c], data)?;
        let tracked = self.t(x);
        Ok(self.push(value, Op::TileRows(x), tracked))
    }

    /// Bilinear reads from the rows of `map`. `None` taps yield zero rows.
    pub fn gather(&mut self, map: Var, taps: Vec<Option<BilinearTaps<T>>>) -> Result<Var> {
        let mv = self.value(map);
        let c = mv.cols();
        let rows = mv.rows();
        let mut out = vec![T::zero(); taps.len() * c];
        for (o, tap) in out.chunks_exact_mut(c).zip(&taps) {
            let Some(tap) = tap else { continue };
            for t in 0..4 {
                let idx = tap.idx[t] as usize;
                if idx >= rows {
                    bail_input!("bilinear tap {idx} outside map with {rows} rows");
                }
                let w = tap.w[t];
                if w == T::zero() {
                    continue;
                }
                for (oc, mc) in o.iter_mut().zip(&mv.data()[idx * c..(idx + 1) * c]) {
                    *oc += w * *mc;
                }
            }
        }
        let value = Tensor::from_vec(&[taps.len(), c], out)?;
        let tracked = self.t(map);
        Ok(self.push(value, Op::Gather { map, taps }, tracked))
    }

    /// Zero-padded 2D convolution of an HWC grid (`height·width` rows of
    /// `cin` channels) with weights `[kernel·kernel·cin, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, shape: ConvShape) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cin = xv.cols();
        let k = shape.kernel;
        if k % 2 == 0 || shape.stride == 0 {
            bail_input!("conv2d needs an odd kernel and nonzero stride");
        }
        if xv.rows() != shape.height * shape.width {
            bail_input!("conv2d input has {} rows, expected {}x{}", xv.rows(), shape.height, shape.width);
        }
        if wv.rank() != 2 || wv.shape()[0] != k * k * cin {
            bail_input!("conv2d weight {:?} does not match kernel {k} and {cin} channels", wv.shape());
        }
        let cout = wv.shape()[1];
        let (ho, wo) = (shape.out_height(), shape.out_width());
        let kk = k * k * cin;
        let cols = if k == 1 && shape.stride == 1 {
            xv.data().to_vec()
        } else {
            let pad = shape.pad() as isize;
            let mut cols = vec![T::zero(); ho * wo * kk];
            let xd = xv.data();
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = &mut cols[(oy * wo + ox) * kk..][..kk];
                    for ky in 0..k {
                        let iy = (oy * shape.stride + ky) as isize - pad;
                        if iy < 0 || iy >= shape.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * shape.stride + kx) as isize - pad;
                            if ix < 0 || ix >= shape.width as isize {
                                continue;
                            }
                            let src = (iy as usize * shape.width + ix as usize) * cin;
                            row[(ky * k + kx) * cin..][..cin].copy_from_slice(&xd[src..src + cin]);
                        }
                    }
                }
            }
            cols
        };
        let mut out = vec![T::zero(); ho * wo * cout];
        T::gemm(ho * wo, kk, cout, &cols, false, wv.data(), false, T::zero(), &mut out);
        let value = Tensor::from_vec(&[ho * wo, cout], out)?;
        let tracked = self.t(x) || self.t(w);
        Ok(self.push(value, Op::Conv2d { x, w, shape, cols }, tracked))
    }

    /// Nearest-neighbour 2× upsampling of an HWC grid.
    pub fn upsample2(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != height * width {
            bail_input!("upsample2 input has {} rows, expected {height}x{width}", xv.rows());
        }
        let c = xv.cols();
        let (h2, w2) = (2 * height, 2 * width);
        let mut out = vec![T::zero(); h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let src = ((y / 2) * width + xx / 2) * c;
                out[(y * w2 + xx) * c..][..c].copy_from_slice(&xv.data()[src..src + c]);
            }
        }
        let value = Tensor::from_vec(&[h2 * w2, c], out)?;
        let tracked = self.t(x);
        Ok(self.push(value, Op::Upsample2 { x, height, width }, tracked))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.is_empty() {
            bail_input!("mse shape mismatch: {:?} vs {:?}", pv.shape(), target.shape());
        }
        let n = T::of(pv.len() as f64);
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (*p - *t) * (*p - *t))
            .sum::<T>()
            / n;
        let tracked = self.t(pred);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target.data().to_vec()), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let tracked = self.t(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.t(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            bail_input!("backward needs a scalar root, got shape {:?}", rv.shape());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.t(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => add_into(g.data_mut(), &delta),
            slot @ None => {
                *slot = Some(Tensor::from_vec(self.value(v).shape(), delta).expect("gradient shape"));
            }
        }
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[1]);
                if self.t(*a) {
                    let mut da = vec![T::zero(); n * k];
                    T::gemm(n, m, k, gd, false, bv.data(), true, T::zero(), &mut da);
                    self.acc(grads, *a, da);
                }
                if self.t(*b) {
                    let mut db = vec![T::zero(); k * m];
                    T::gemm(k, n, m, av.data(), true, gd, false, T::zero(), &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                self.acc(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, gd.to_vec());
                if self.t(*b) {
                    let c = out.cols();
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks_exact(c) {
                        add_into(&mut db, row);
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.t(*a) {
                    self.acc(grads, *a, gd.iter().zip(bv.data()).map(|(g, y)| *g * *y).collect());
                }
                if self.t(*b) {
                    self.acc(grads, *b, gd.iter().zip(av.data()).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, gd.iter().map(|g| *g * *s).collect()),
            Op::MaskRows(a, mask) => {
                let c = out.cols();
                let mut da = gd.to_vec();
                for (row, m) in da.chunks_exact_mut(c).zip(mask) {
                    row.iter_mut().for_each(|x| *x *= *m);
                }
                self.acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, gd.iter().zip(av.data()).map(|(g, x)| *g * gelu_grad(*x)).collect());
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| *g * *y * (T::one() - *y))
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = vec![T::zero(); gd.len()];
                for ((grow, yrow), drow) in gd.chunks_exact(c).zip(out.data().chunks_exact(c)).zip(da.chunks_exact_mut(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(g, y)| *g * *y).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gv = self.value(*gain).data();
                if self.t(*x) {
                    let n = T::of(c as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..out.rows() {
                        let grow = &gd[r * c..][..c];
                        let hrow = &xhat[r * c..][..c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hrow[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            let dh = grow[j] * gv[j];
                            dx[r * c + j] = rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.t(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (grow, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.acc(grads, *gain, dg);
                }
                if self.t(*bias) {
                    let mut db = vec![T::zero(); c];
                    for grow in gd.chunks_exact(c) {
                        add_into(&mut db, grow);
                    }
                    self.acc(grads, *bias, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                lq,
                lk,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (groups, heads, lq, lk) = (*groups, *heads, *lq, *lk);
                let d = qv.cols();
                let dv = vv.cols();
                let (dh, dvh) = (d / heads, dv / heads);
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dvv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); lk];
                for gi in 0..groups {
                    for h in 0..heads {
                        for i in 0..lq {
                            let p = &probs[((gi * heads + h) * lq + i) * lk..][..lk];
                            let grow = &gd[(gi * lq + i) * dv + h * dvh..][..dvh];
                            let mut dot = T::zero();
                            for j in 0..lk {
                                let vrow = &vd[(gi * lk + j) * dv + h * dvh..][..dvh];
                                let dvrow = &mut dvv[(gi * lk + j) * dv + h * dvh..][..dvh];
                                let mut acc = T::zero();
                                for c in 0..dvh {
                                    acc += grow[c] * vrow[c];
                                    dvrow[c] += p[j] * grow[c];
                                }
                                dp[j] = acc;
                                dot += p[j] * acc;
                            }
                            let qrow = &qd[(gi * lq + i) * d + h * dh..][..dh];
                            let dqrow_start = (gi * lq + i) * d + h * dh;
                            for j in 0..lk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let koff = (gi * lk + j) * d + h * dh;
                                for c in 0..dh {
                                    dq[dqrow_start + c] += ds * kd[koff + c];
                                    dk[koff + c] += ds * qrow[c];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dvv);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Vec::with_capacity(out.rows() * ca);
                let mut db = Vec::with_capacity(out.rows() * cb);
                for row in gd.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(grads, *p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::MeanGroups(x, len) => {
                let c = out.cols();
                let inv = T::one() / T::of(*len as f64);
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                for (r, row) in dx.chunks_exact_mut(c).enumerate() {
                    for (d, gv) in row.iter_mut().zip(&gd[(r / len) * c..][..c]) {
                        *d = *gv * inv;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::TileRows(x) => {
                let c = out.cols();
                let mut dx = vec![T::zero(); c];
                for row in gd.chunks_exact(c) {
                    add_into(&mut dx, row);
                }
                self.acc(grads, *x, dx);
            }
            Op::Gather { map, taps } => {
                let mv = self.value(*map);
                let c = mv.cols();
                let mut dm = vec![T::zero(); mv.len()];
                for (grow, tap) in gd.chunks_exact(c).zip(taps) {
                    let Some(tap) = tap else { continue };
                    for t in 0..4 {
                        let w = tap.w[t];
                        if w == T::zero() {
                            continue;
                        }
                        let dst = &mut dm[tap.idx[t] as usize * c..][..c];
                        for (d, gv) in dst.iter_mut().zip(grow) {
                            *d += w * *gv;
                        }
                    }
                }
                self.acc(grads, *map, dm);
            }
            Op::Conv2d { x, w, shape, cols } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let cin = xv.cols();
                let cout = wv.shape()[1];
                let k = shape.kernel;
                let kk = k * k * cin;
                let (ho, wo) = (shape.out_height(), shape.out_width());
                if self.t(*w) {
                    let mut dw = vec![T::zero(); kk * cout];
                    T::gemm(kk, ho * wo, cout, cols, true, gd, false, T::zero(), &mut dw);
                    self.acc(grads, *w, dw);
                }
                if self.t(*x) {
                    let mut dcols = vec![T::zero(); ho * wo * kk];
                    T::gemm(ho * wo, cout, kk, gd, false, wv.data(), true, T::zero(), &mut dcols);
                    if k == 1 && shape.stride == 1 {
                        self.acc(grads, *x, dcols);
                    } else {
                        let pad = shape.pad() as isize;
                        let mut dx = vec![T::zero(); xv.len()];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let row = &dcols[(oy * wo + ox) * kk..][..kk];
                                for ky in 0..k {
                                    let iy = (oy * shape.stride + ky) as isize - pad;
                                    if iy < 0 || iy >= shape.height as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * shape.stride + kx) as isize - pad;
                                        if ix < 0 || ix >= shape.width as isize {
                                            continue;
                                        }
                                        let dst = (iy as usize * shape.width + ix as usize) * cin;
                                        add_into(&mut dx[dst..dst + cin], &row[(ky * k + kx) * cin..][..cin]);
                                    }
                                }
                            }
                        }
                        self.acc(grads, *x, dx);
                    }
                }
            }
            Op::Upsample2 { x, height, width } => {
                let c = out.cols();
                let (h2, w2) = (2 * height, 2 * width);
                let mut dx = vec![T::zero(); height * width * c];
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let dst = ((y / 2) * width + xx / 2) * c;
                        add_into(&mut dx[dst..dst + c], &gd[(y * w2 + xx) * c..][..c]);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Mse(p, target) => {
                let pv = self.value(*p);
                let s = gd[0] * T::of(2.0) / T::of(pv.len() as f64);
                let dp = pv.data().iter().zip(target).map(|(a, t)| (*a - *t) * s).collect();
                self.acc(grads, *p, dp);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, vec![gd[0]; n]);
            }
            Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
        }
    }
}
