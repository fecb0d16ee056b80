//! Forward and backward kernels for the tensor primitives.
//!
//! These are plain functions over [`Tensor`]s. [`crate::tape::Tape`] records
//! them for reverse-mode differentiation; diagnostics call them directly.

use std::str::FromStr;

use crate::error::{config_err, dim_err, Error, Result};
use crate::scalar::{normal_cdf, normal_pdf, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub const POINTWISE: Self = Self {
        stride: 1,
        padding: 0,
        groups: 1,
    };

    /// Stride 1 with zero padding that keeps the spatial size for odd `k`.
    pub const fn same(k: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            groups,
        }
    }
}

/// Everything needed to run a convolution, validated once.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new(x: Shape, weight: Shape, spec: Conv2dSpec) -> Result<Self> {
        let Conv2dSpec {
            stride,
            padding,
            groups,
        } = spec;
        if stride == 0 || groups == 0 {
            return dim_err(format!("conv2d: stride {stride} and groups {groups} must be positive"));
        }
        if x.c % groups != 0 || weight.n % groups != 0 {
            return dim_err(format!(
                "conv2d: channels in {} / out {} not divisible by groups {groups}",
                x.c, weight.n
            ));
        }
        let cin_g = x.c / groups;
        if weight.c != cin_g {
            return dim_err(format!(
                "conv2d: weight {weight} expects {} input channels per group, input has {cin_g}",
                weight.c
            ));
        }
        let (kh, kw) = (weight.h, weight.w);
        if kh == 0 || kw == 0 || x.h + 2 * padding < kh || x.w + 2 * padding < kw {
            return dim_err(format!("conv2d: kernel {kh}x{kw} larger than padded input {x}"));
        }
        Ok(Self {
            n: x.n,
            h: x.h,
            w: x.w,
            c_out: weight.n,
            kh,
            kw,
            h_out: (x.h + 2 * padding - kh) / stride + 1,
            w_out: (x.w + 2 * padding - kw) / stride + 1,
            cin_g,
            cout_g: weight.n / groups,
            spec,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.h_out, self.w_out)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Row length of one output channel's filter.
    fn k_len(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Multiply-accumulate count of a convolution: `(c_in/groups)·c_out·k²·h_out·w_out`
/// per sample, times the batch.
pub fn conv2d_macs(x: Shape, weight: Shape, spec: Conv2dSpec) -> Result<u64> {
    let g = ConvGeom::new(x, weight, spec)?;
    Ok((g.n * g.cin_g * g.c_out * g.kh * g.kw * g.h_out * g.w_out) as u64)
}

fn im2col<T: Scalar>(g: &ConvGeom, x_group: &[T], col: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for ci in 0..g.cin_g {
        let plane = &x_group[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let iy = g.src(oy, ky, g.h);
                    for ox in 0..g.w_out {
                        dst[oy * g.w_out + ox] = match (iy, g.src(ox, kx, g.w)) {
                            (Some(iy), Some(ix)) => plane[iy * g.w + ix],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx_group: &mut [T]) {
    let hw_out = g.h_out * g.w_out;
    for ci in 0..g.cin_g {
        let plane = &mut dx_group[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weight` has shape `(c_out, c_in/groups, kh, kw)`; `bias` holds `c_out`
/// values in any shape. Each sample is processed independently, so a sample's
/// output never depends on the rest of the batch.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), spec)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return dim_err(format!("conv2d: bias has {} values for {} outputs", b.numel(), g.c_out));
        }
    }
    x.check_finite("conv2d input")?;
    let mut out = Tensor::zeros(g.out_shape());
    let hw = g.h * g.w;
    let hw_out = g.h_out * g.w_out;
    let k_len = g.k_len();
    let wd = weight.data();
    let mut col = if g.is_pointwise() || g.is_depthwise() {
        Vec::new()
    } else {
        vec![T::zero(); k_len * hw_out]
    };

    for n in 0..g.n {
        let xs = x.sample(n);
        let ys = out.sample_mut(n);
        for grp in 0..g.spec.groups {
            let xg = &xs[grp * g.cin_g * hw..(grp + 1) * g.cin_g * hw];
            let yg = &mut ys[grp * g.cout_g * hw_out..(grp + 1) * g.cout_g * hw_out];
            let wg = &wd[grp * g.cout_g * k_len..(grp + 1) * g.cout_g * k_len];
            if g.is_depthwise() {
                depthwise_forward(&g, xg, wg, yg);
            } else if g.is_pointwise() {
                T::gemm(
                    g.cout_g, g.cin_g, hw, T::one(), wg, (k_len as isize, 1), xg,
                    (hw as isize, 1), T::zero(), yg, (hw as isize, 1),
                );
            } else {
                im2col(&g, xg, &mut col);
                T::gemm(
                    g.cout_g, k_len, hw_out, T::one(), wg, (k_len as isize, 1), &col,
                    (hw_out as isize, 1), T::zero(), yg, (hw_out as isize, 1),
                );
            }
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                for y in &mut ys[co * hw_out..(co + 1) * hw_out] {
                    *y += bv;
                }
            }
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], y: &mut [T]) {
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let mut acc = T::zero();
            for ky in 0..g.kh {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.kw {
                    if let Some(ix) = g.src(ox, kx, g.w) {
                        acc += w[ky * g.kw + kx] * x[iy * g.w + ix];
                    }
                }
            }
            y[oy * g.w_out + ox] = acc;
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let d = dy[oy * g.w_out + ox];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.kw {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dx[iy * g.w + ix] += w[ky * g.kw + kx] * d;
                        }
                    }
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let mut acc = T::zero();
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            acc += dy[oy * g.w_out + ox] * x[iy * g.w + ix];
                        }
                    }
                }
                dw[ky * g.kw + kx] += acc;
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
///
/// Weight gradients accumulate over the batch in sample order.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias_shape: Option<Shape>,
    spec: Conv2dSpec,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), spec)?;
    dy.expect_shape(g.out_shape(), "conv2d backward")?;
    let (need_dx, need_dw, need_db) = need;
    let hw = g.h * g.w;
    let hw_out = g.h_out * g.w_out;
    let k_len = g.k_len();
    let wd = weight.data();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let general = !(g.is_pointwise() || g.is_depthwise());
    let mut col = if general {
        vec![T::zero(); k_len * hw_out]
    } else {
        Vec::new()
    };

    for n in 0..g.n {
        let xs = x.sample(n);
        let dys = dy.sample(n);
        for grp in 0..g.spec.groups {
            let xg = &xs[grp * g.cin_g * hw..(grp + 1) * g.cin_g * hw];
            let dyg = &dys[grp * g.cout_g * hw_out..(grp + 1) * g.cout_g * hw_out];
            let wg = &wd[grp * g.cout_g * k_len..(grp + 1) * g.cout_g * k_len];
            let dxg = dx.as_mut().map(|t| {
                &mut t.sample_mut(n)[grp * g.cin_g * hw..(grp + 1) * g.cin_g * hw]
            });
            let dwg = dw
                .as_mut()
                .map(|t| &mut t.data_mut()[grp * g.cout_g * k_len..(grp + 1) * g.cout_g * k_len]);

            if g.is_depthwise() {
                depthwise_backward(&g, xg, wg, dyg, dxg, dwg);
            } else if g.is_pointwise() {
                if let Some(dxg) = dxg {
                    // dx = W^T dy
                    T::gemm(
                        g.cin_g, g.cout_g, hw, T::one(), wg, (1, k_len as isize), dyg,
                        (hw as isize, 1), T::one(), dxg, (hw as isize, 1),
                    );
                }
                if let Some(dwg) = dwg {
                    // dW += dy x^T
                    T::gemm(
                        g.cout_g, hw, g.cin_g, T::one(), dyg, (hw as isize, 1), xg,
                        (1, hw as isize), T::one(), dwg, (k_len as isize, 1),
                    );
                }
            } else {
                if let Some(dxg) = dxg {
                    T::gemm(
                        k_len, g.cout_g, hw_out, T::one(), wg, (1, k_len as isize), dyg,
                        (hw_out as isize, 1), T::zero(), &mut col, (hw_out as isize, 1),
                    );
                    col2im_add(&g, &col, dxg);
                }
                if let Some(dwg) = dwg {
                    im2col(&g, xg, &mut col);
                    T::gemm(
                        g.cout_g, hw_out, k_len, T::one(), dyg, (hw_out as isize, 1), &col,
                        (1, hw_out as isize), T::one(), dwg, (k_len as isize, 1),
                    );
                }
            }
        }
    }

    let db = match (need_db, bias_shape) {
        (true, Some(bs)) => {
            let mut db = Tensor::zeros(bs);
            let dbd = db.data_mut();
            for n in 0..g.n {
                let dys = dy.sample(n);
                for (co, acc) in dbd.iter_mut().enumerate() {
                    *acc += dys[co * hw_out..(co + 1) * hw_out]
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
                }
            }
            Some(db)
        }
        _ => None,
    };
    Ok(ConvGrads { dx, dw, db })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    /// Exact `x·Φ(x)`, not the tanh approximation.
    Gelu,
    Relu,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Silu => "silu",
        }
    }

    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Gelu => x * normal_cdf(x),
            Self::Relu => x.max(T::zero()),
            Self::Sigmoid => sigmoid(x),
            Self::Silu => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Self::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Self::Silu => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gelu" | "gelu-exact" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            "sigmoid" => Ok(Self::Sigmoid),
            "silu" | "swish" => Ok(Self::Silu),
            other => config_err(format!("unknown activation {other:?}")),
        }
    }
}

/// Logistic function evaluated without overflowing for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.spatial() == 0 {
        return dim_err(format!("global_avg_pool on empty spatial grid {s}"));
    }
    let inv = T::one() / T::of_usize(s.spatial());
    let data = x
        .data()
        .chunks_exact(s.spatial())
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data)
}

/// Gradient of [`global_avg_pool`]: each position receives `1/(h·w)` of
/// its channel's upstream gradient.
pub fn global_avg_pool_backward<T: Scalar>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::of_usize(x_shape.spatial());
    let mut dx = Tensor::zeros(x_shape);
    for (plane, &g) in dx
        .data_mut()
        .chunks_exact_mut(x_shape.spatial())
        .zip(dy.data())
    {
        plane.fill(g * inv);
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ResampleDirection {
    /// Depth-to-space: `(n, c·r², h, w) → (n, c, h·r, w·r)`.
    Shuffle,
    /// Space-to-depth: `(n, c, h, w) → (n, c·r², h/r, w/r)`.
    Unshuffle,
}

/// Lossless space/channel permutation.
///
/// In the unshuffled layout, input pixel `(row, col)` of channel `c` lives in
/// channel `c·r² + r·(row mod r) + (col mod r)` at `(row / r, col / r)`.
pub fn pixel_resample<T: Scalar>(
    x: &Tensor<T>,
    r: usize,
    direction: ResampleDirection,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 {
        return dim_err("pixel resample factor must be positive");
    }
    let rr = r * r;
    match direction {
        ResampleDirection::Unshuffle => {
            if s.h % r != 0 || s.w % r != 0 {
                return dim_err(format!("pixel_unshuffle({r}) needs h, w divisible by {r}, got {s}"));
            }
            let out_shape = Shape::new(s.n, s.c * rr, s.h / r, s.w / r);
            let mut out = Tensor::zeros(out_shape);
            let od = out.data_mut();
            for (i, &v) in x.data().iter().enumerate() {
                let (n, c, row, col) = unravel(s, i);
                let oc = c * rr + r * (row % r) + col % r;
                od[out_shape.index(n, oc, row / r, col / r)] = v;
            }
            Ok(out)
        }
        ResampleDirection::Shuffle => {
            if s.c % rr != 0 {
                return dim_err(format!("pixel_shuffle({r}) needs c divisible by {rr}, got {s}"));
            }
            let out_shape = Shape::new(s.n, s.c / rr, s.h * r, s.w * r);
            let mut out = Tensor::zeros(out_shape);
            let od = out.data_mut();
            for (i, &v) in x.data().iter().enumerate() {
                let (n, ic, y, xq) = unravel(s, i);
                let (c, off) = (ic / rr, ic % rr);
                od[out_shape.index(n, c, y * r + off / r, xq * r + off % r)] = v;
            }
            Ok(out)
        }
    }
}

#[inline]
fn unravel(s: Shape, i: usize) -> (usize, usize, usize, usize) {
    let w = i % s.w;
    let h = (i / s.w) % s.h;
    let c = (i / s.spatial()) % s.c;
    let n = i / s.sample_len();
    (n, c, h, w)
}

/// Normalizes the channel vector at every `(n, h, w)` to zero mean and unit
/// variance. Returns the output and the per-position `1/sqrt(var + eps)`.
pub fn channel_layer_norm<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    if s.c == 0 {
        return dim_err("channel_layer_norm on zero channels");
    }
    let hw = s.spatial();
    let inv_c = T::one() / T::of_usize(s.c);
    let mut out = Tensor::zeros(s);
    let mut inv_std = vec![T::zero(); s.n * hw];
    for n in 0..s.n {
        let xs = x.sample(n);
        let ys = out.sample_mut(n);
        for p in 0..hw {
            let mut mean = T::zero();
            for c in 0..s.c {
                mean += xs[c * hw + p];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for c in 0..s.c {
                let d = xs[c * hw + p] - mean;
                var += d * d;
            }
            var *= inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[n * hw + p] = is;
            for c in 0..s.c {
                ys[c * hw + p] = (xs[c * hw + p] - mean) * is;
            }
        }
    }
    Ok((out, inv_std))
}

/// Gradient of [`channel_layer_norm`] given its output and saved inverse std.
pub fn channel_layer_norm_backward<T: Scalar>(
    y: &Tensor<T>,
    inv_std: &[T],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let s = y.shape();
    let hw = s.spatial();
    let inv_c = T::one() / T::of_usize(s.c);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let ys = y.sample(n);
        let dys = dy.sample(n);
        let dxs = dx.sample_mut(n);
        for p in 0..hw {
            let mut mean_dy = T::zero();
            let mut mean_dy_y = T::zero();
            for c in 0..s.c {
                let i = c * hw + p;
                mean_dy += dys[i];
                mean_dy_y += dys[i] * ys[i];
            }
            mean_dy *= inv_c;
            mean_dy_y *= inv_c;
            let is = inv_std[n * hw + p];
            for c in 0..s.c {
                let i = c * hw + p;
                dxs[i] = is * (dys[i] - mean_dy - ys[i] * mean_dy_y);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Direct six-loop convolution used as the reference for all paths.
    fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (cin_g, cout_g) = (xs.c / spec.groups, ws.n / spec.groups);
        let h_out = (xs.h + 2 * spec.padding - ws.h) / spec.stride + 1;
        let w_out = (xs.w + 2 * spec.padding - ws.w) / spec.stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, h_out, w_out), |n, co, oy, ox| {
            let grp = co / cout_g;
            let mut acc = 0.0;
            for ci in 0..cin_g {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                            continue;
                        }
                        acc += w.at(co, ci, ky, kx) * x.at(n, grp * cin_g + ci, iy as usize, ix as usize);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn pointwise_scalar_map() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 3.0);
        let w = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let b = Tensor::zeros(Shape::vector(1, 1));
        let y = conv2d(&x, &w, Some(&b), Conv2dSpec::POINTWISE).unwrap();
        assert!(y.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut r = rng();
        let x = Tensor::<f32>::randn(Shape::new(2, 3, 5, 5), 1.0, &mut r);
        let w = Tensor::from_fn(Shape::new(3, 1, 3, 3), |_, _, h, w| {
            if h == 1 && w == 1 {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &w, None, Conv2dSpec::same(3, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_paths_match_reference() {
        let mut r = rng();
        let cases = [
            (Shape::new(2, 4, 6, 6), Shape::new(6, 4, 1, 1), Conv2dSpec::POINTWISE),
            (Shape::new(2, 4, 6, 6), Shape::new(4, 1, 3, 3), Conv2dSpec::same(3, 4)),
            (Shape::new(1, 3, 7, 5), Shape::new(3, 1, 5, 5), Conv2dSpec::same(5, 3)),
            (Shape::new(2, 4, 6, 6), Shape::new(5, 4, 3, 3), Conv2dSpec::same(3, 1)),
            (Shape::new(1, 4, 7, 7), Shape::new(4, 2, 3, 3), Conv2dSpec { stride: 2, padding: 1, groups: 2 }),
            (Shape::new(1, 2, 5, 5), Shape::new(2, 2, 2, 2), Conv2dSpec { stride: 1, padding: 0, groups: 1 }),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::<f64>::randn(xs, 1.0, &mut r);
            let w = Tensor::<f64>::randn(ws, 1.0, &mut r);
            let got = conv2d(&x, &w, None, spec).unwrap();
            let want = conv_reference(&x, &w, spec);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "{xs:?} {ws:?} {spec:?}");
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(4, 2, 1, 1));
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dSpec { stride: 1, padding: 0, groups: 2 }),
            Err(Error::Dimension(_))
        ));
        let w = Tensor::<f32>::zeros(Shape::new(4, 3, 1, 1));
        let b = Tensor::<f32>::zeros(Shape::vector(1, 3));
        assert!(matches!(conv2d(&x, &w, Some(&b), Conv2dSpec::POINTWISE), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_rejects_non_finite_input() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        *x.at_mut(0, 0, 0, 0) = f32::INFINITY;
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1));
        assert!(matches!(conv2d(&x, &w, None, Conv2dSpec::POINTWISE), Err(Error::Numeric(_))));
    }

    #[test]
    fn activation_fixed_points() {
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        // 1·Φ(1) from a high-precision normal CDF table: 0.8413447460685429
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((Activation::Gelu.apply(1.0f32) - 0.841_345).abs() < 1e-6);
        let x = 0.7f64;
        assert!((Activation::Silu.apply(x) - x * sigmoid(x)).abs() < 1e-15);
    }

    #[test]
    fn unknown_activation_is_config_error() {
        assert!(matches!("tanh".parse::<Activation>(), Err(Error::Config(_))));
        assert_eq!("GELU".parse::<Activation>().unwrap(), Activation::Gelu);
    }

    #[test]
    fn sigmoid_saturates_to_exact_zero() {
        assert_eq!(sigmoid(-1.0e4f32), 0.0);
        assert_eq!(sigmoid(1.0e4f32), 1.0);
    }

    #[test]
    fn gap_values() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 5.0);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| v == 5.0));
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let empty = Tensor::<f64>::zeros(Shape::new(1, 1, 0, 3));
        assert!(matches!(global_avg_pool(&empty), Err(Error::Dimension(_))));
    }

    #[test]
    fn unshuffle_matches_permutation_oracle() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_resample(&x, 2, ResampleDirection::Unshuffle).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        // index-by-index oracle on a larger grid
        let mut r = rng();
        let s = Shape::new(2, 3, 6, 4);
        let x = Tensor::<f64>::randn(s, 1.0, &mut r);
        let y = pixel_resample(&x, 2, ResampleDirection::Unshuffle).unwrap();
        for n in 0..s.n {
            for c in 0..s.c {
                for row in 0..s.h {
                    for col in 0..s.w {
                        let oc = c * 4 + 2 * (row % 2) + col % 2;
                        assert_eq!(y.at(n, oc, row / 2, col / 2), x.at(n, c, row, col));
                    }
                }
            }
        }
    }

    #[test]
    fn resample_shape_contract_and_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let y = pixel_resample(&x, 2, ResampleDirection::Unshuffle).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2));
        let odd = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(pixel_resample(&odd, 2, ResampleDirection::Unshuffle).is_err());
        let c3 = Tensor::<f32>::zeros(Shape::new(1, 3, 2, 2));
        assert!(pixel_resample(&c3, 2, ResampleDirection::Shuffle).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::full(Shape::new(1, 4, 2, 2), 3.0);
        let (y, _) = channel_layer_norm(&x, 1e-6).unwrap();
        assert!(y.max_abs() < 1e-9);

        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0f64, -1.0]).unwrap();
        let (y, _) = channel_layer_norm(&x, 1e-6).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && (y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_moments() {
        let mut r = rng();
        let s = Shape::new(3, 16, 4, 5);
        let x = Tensor::<f64>::randn(s, 3.0, &mut r);
        let (y, _) = channel_layer_norm(&x, 1e-6).unwrap();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v: Vec<f64> = (0..s.c).map(|c| y.at(n, c, h, w)).collect();
                    let mean = v.iter().sum::<f64>() / s.c as f64;
                    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / s.c as f64;
                    assert!(mean.abs() <= 1e-5);
                    assert!((var - 1.0).abs() <= 1e-4);
                }
            }
        }
    }
}
