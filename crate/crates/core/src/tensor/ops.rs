//! Forward operations with their gradient rules.

use std::str::FromStr;

use super::{Backward, Float, Tensor};
use crate::error::{Error, Result};

fn need(p: &Tensor<impl Float>) -> bool {
    p.requires_grad_flag()
}

// ---------------------------------------------------------------------------
// conv2d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output spatial size of a convolution, or an error naming the offending
/// dimension.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(((h + 2 * padding - kh) / stride + 1, (w + 2 * padding - kw) / stride + 1))
}

fn im2col<T: Float>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl<T: Float> Backward<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let g = &self.geom;
        let x = parents[0].data();
        let w = parents[1].data();
        let (want_x, want_w) = (need(&parents[0]), need(&parents[1]));
        let want_b = self.has_bias && need(&parents[2]);
        let k = g.col_rows();
        let p = g.out_h() * g.out_w();
        let in_plane = g.cin * g.h * g.w;

        let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
        let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
        let mut db = want_b.then(|| vec![T::zero(); g.cout]);
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        let mut dcol = if want_x && !g.is_pointwise() {
            vec![T::zero(); k * p]
        } else {
            Vec::new()
        };

        for n in 0..g.n {
            let xn = &x[n * in_plane..(n + 1) * in_plane];
            let go = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
            if let Some(dw) = dw.as_mut() {
                let col_ref: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(g, xn, &mut col);
                    &col
                };
                // dW[cout,k] += dY[cout,p] · colᵀ
                T::gemm(g.cout, p, k, go, false, col_ref, true, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
                if g.is_pointwise() {
                    T::gemm(k, g.cout, p, w, true, go, false, dxn, true);
                } else {
                    T::gemm(k, g.cout, p, w, true, go, false, &mut dcol, false);
                    col2im(g, &dcol, dxn);
                }
            }
            if let Some(db) = db.as_mut() {
                for (co, b) in db.iter_mut().enumerate() {
                    *b += go[co * p..(co + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.has_bias {
            out.push(db);
        }
        Ok(out)
    }
}

/// 2-D cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = match weight.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => {
            return Err(Error::invalid(format!(
                "conv2d weight must be [Cout,Cin,kh,kw], got {s:?}"
            )))
        }
    };
    if wcin != cin {
        return Err(Error::invalid(format!(
            "conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::invalid(format!(
                "conv2d bias must be [{cout}], got {:?}",
                b.shape()
            )));
        }
    }
    let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, padding)?;
    let geom = ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        padding,
    };
    let k = geom.col_rows();
    let p = oh * ow;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); n * cout * p];
    let mut col = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for i in 0..n {
        let xn = &x[i * cin * h * w..(i + 1) * cin * h * w];
        let on = &mut out[i * cout * p..(i + 1) * cout * p];
        let col_ref: &[T] = if geom.is_pointwise() {
            xn
        } else {
            im2col(&geom, xn, &mut col);
            &col
        };
        T::gemm(cout, k, p, wt, false, col_ref, false, on, false);
        if let Some(b) = bias {
            for (co, bv) in b.data().iter().enumerate() {
                on[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += *bv);
            }
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, cout, oh, ow],
        out,
        parents,
        Box::new(Conv2dBackward {
            geom,
            has_bias: bias.is_some(),
        }),
    ))
}

// ---------------------------------------------------------------------------
// batchnorm2d

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics updated by training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.03;
pub const BN_EPS: f64 = 1e-3;

struct BatchNormBackward<T> {
    mode: BnMode,
    channels: usize,
    plane: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> Backward<T> for BatchNormBackward<T> {
    fn name(&self) -> &'static str {
        "batchnorm2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let gamma = parents[1].data();
        let c = self.channels;
        let plane = self.plane;
        let n = grad_out.len() / (c * plane);
        let m = T::of((n * plane) as f64);

        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    sum_dy[ch] += grad_out[j];
                    sum_dy_xhat[ch] += grad_out[j] * self.xhat[j];
                }
            }
        }

        let dx = need(&parents[0]).then(|| {
            let mut dx = vec![T::zero(); grad_out.len()];
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * plane;
                    let scale = gamma[ch] * self.inv_std[ch];
                    for j in off..off + plane {
                        dx[j] = match self.mode {
                            BnMode::Eval => scale * grad_out[j],
                            BnMode::Train => {
                                scale / m * (m * grad_out[j] - sum_dy[ch] - self.xhat[j] * sum_dy_xhat[ch])
                            }
                        };
                    }
                }
            }
            dx
        });
        let dgamma = need(&parents[1]).then_some(sum_dy_xhat);
        let dbeta = need(&parents[2]).then_some(sum_dy);
        Ok(vec![dx, dgamma, dbeta])
    }
}

/// Batch normalization over `[N,C,H,W]`. Training mode normalizes with the
/// (biased) batch variance and folds the unbiased variance into `stats`.
pub fn batchnorm2d<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats,
    mode: BnMode,
    eps: f64,
    momentum: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::invalid(format!(
            "batchnorm2d channel mismatch: input C={c}, gamma {:?}, beta {:?}, running stats {}",
            gamma.shape(),
            beta.shape(),
            stats.mean.len()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("batchnorm2d eps must be > 0"));
    }
    let plane = h * w;
    let count = n * plane;
    if mode == BnMode::Train && count == 1 {
        return Err(Error::DegenerateBatch(
            "batchnorm2d in train mode needs N*H*W > 1 to estimate a variance".into(),
        ));
    }
    let x = input.data();
    let (mut mean, mut var) = (vec![0.0f64; c], vec![0.0f64; c]);
    match mode {
        BnMode::Train => {
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    s += x[off..off + plane].iter().map(|v| v.to_f64c()).sum::<f64>();
                }
                mean[ch] = s / count as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    ss += x[off..off + plane]
                        .iter()
                        .map(|v| (v.to_f64c() - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = ss / count as f64;
                let unbiased = ss / (count - 1) as f64;
                stats.mean[ch] = ((1.0 - momentum) * stats.mean[ch] as f64 + momentum * mean[ch]) as f32;
                stats.var[ch] = ((1.0 - momentum) * stats.var[ch] as f64 + momentum * unbiased) as f32;
            }
        }
        BnMode::Eval => {
            for ch in 0..c {
                mean[ch] = stats.mean[ch] as f64;
                var[ch] = stats.var[ch] as f64;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let (g, b) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            for j in off..off + plane {
                let xh = (x[j] - mean_t[ch]) * inv_std[ch];
                xhat[j] = xh;
                out[j] = g[ch] * xh + b[ch];
            }
        }
    }
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        Box::new(BatchNormBackward {
            mode,
            channels: c,
            plane,
            xhat,
            inv_std,
        }),
    ))
}

// ---------------------------------------------------------------------------
// activations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation kind {other:?}"))),
        }
    }
}

/// Logistic function, clamped so the result stays strictly inside (0,1)
/// at the working precision.
#[inline]
pub fn sigmoid_scalar<T: Float>(x: T) -> T {
    let one = T::one();
    let y = if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
}

struct ActivationBackward(Activation);

impl<T: Float> Backward<T> for ActivationBackward {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    fn backward(&self, parents: &[Tensor<T>], output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = parents[0].data();
        let one = T::one();
        let dx = match self.0 {
            Activation::Sigmoid => output.iter().zip(grad_out).map(|(&y, &g)| g * y * (one - y)).collect(),
            Activation::Relu => x
                .iter()
                .zip(grad_out)
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect(),
            Activation::Silu => x
                .iter()
                .zip(grad_out)
                .map(|(&v, &g)| {
                    let s = sigmoid_scalar(v);
                    g * s * (one + v * (one - s))
                })
                .collect(),
        };
        Ok(vec![Some(dx)])
    }
}

pub fn activation<T: Float>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| match kind {
            Activation::Sigmoid => sigmoid_scalar(v),
            Activation::Relu => v.max(T::zero()),
            Activation::Silu => v * sigmoid_scalar(v),
        })
        .collect();
    Tensor::from_op(
        input.shape().to_vec(),
        data,
        vec![input.clone()],
        Box::new(ActivationBackward(kind)),
    )
}

pub fn silu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Silu)
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Sigmoid)
}

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Relu)
}

// ---------------------------------------------------------------------------
// directional mean pooling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolAxis {
    /// Average over H, keeping W: `[N,C,1,W]`.
    Height,
    /// Average over W, keeping H: `[N,C,H,1]`.
    Width,
}

struct PoolDirBackward {
    axis: PoolAxis,
    h: usize,
    w: usize,
}

impl<T: Float> Backward<T> for PoolDirBackward {
    fn name(&self) -> &'static str {
        "pool_directional"
    }

    fn backward(&self, _parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (h, w) = (self.h, self.w);
        let planes = match self.axis {
            PoolAxis::Width => grad_out.len() / h,
            PoolAxis::Height => grad_out.len() / w,
        };
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for i in 0..h {
                for j in 0..w {
                    dx[(p * h + i) * w + j] = match self.axis {
                        PoolAxis::Width => grad_out[p * h + i] / T::of(w as f64),
                        PoolAxis::Height => grad_out[p * w + j] / T::of(h as f64),
                    };
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

pub fn pool_directional<T: Float>(input: &Tensor<T>, axis: PoolAxis) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let x = input.data();
    let (shape, data) = match axis {
        PoolAxis::Width => {
            let inv = T::of(1.0 / w as f64);
            let data = x
                .chunks_exact(w)
                .map(|row| row.iter().copied().sum::<T>() * inv)
                .collect();
            (vec![n, c, h, 1], data)
        }
        PoolAxis::Height => {
            let inv = T::of(1.0 / h as f64);
            let mut data = vec![T::zero(); n * c * w];
            for (p, plane) in x.chunks_exact(h * w).enumerate() {
                let dst = &mut data[p * w..(p + 1) * w];
                for row in plane.chunks_exact(w) {
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            (vec![n, c, 1, w], data)
        }
    };
    Ok(Tensor::from_op(
        shape,
        data,
        vec![input.clone()],
        Box::new(PoolDirBackward { axis, h, w }),
    ))
}

// ---------------------------------------------------------------------------
// nearest-neighbour 2x upsampling

struct Upsample2xBackward {
    h: usize,
    w: usize,
}

impl<T: Float> Backward<T> for Upsample2xBackward {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn backward(&self, _parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (h, w) = (self.h, self.w);
        let planes = grad_out.len() / (4 * h * w);
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            let src = &grad_out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    dx[(p * h + oy / 2) * w + ox / 2] += src[oy * 2 * w + ox];
                }
            }
        }
        Ok(vec![Some(dx)])
    }
}

pub fn upsample_nearest2x<T: Float>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, 2 * h, 2 * w],
        out,
        vec![input.clone()],
        Box::new(Upsample2xBackward { h, w }),
    ))
}

// ---------------------------------------------------------------------------
// concat / split / reshape

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
}

impl<T: Float> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (outer, inner) = outer_inner(parents[0].shape(), self.axis);
        let total: usize = self.sizes.iter().sum();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(parents.len());
        for (p, &size) in parents.iter().zip(&self.sizes) {
            if need(p) {
                let mut g = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    g.extend_from_slice(&grad_out[start..start + size * inner]);
                }
                grads.push(Some(g));
            } else {
                grads.push(None);
            }
            offset += size;
        }
        Ok(grads)
    }
}

/// Stacks tensors along `axis`; every other dimension must agree.
pub fn concat<T: Float>(inputs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(format!(
            "concat axis {axis} out of range for rank {}",
            first.rank()
        )));
    }
    for t in inputs {
        let same = t.rank() == first.rank()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::invalid(format!(
                "concat along axis {axis}: shape {:?} does not match {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    let sizes: Vec<usize> = inputs.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = sizes.iter().sum();
    let (outer, inner) = outer_inner(first.shape(), axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &size) in inputs.iter().zip(&sizes) {
            let start = o * size * inner;
            data.extend_from_slice(&t.data()[start..start + size * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_op(
        shape,
        data,
        inputs.to_vec(),
        Box::new(ConcatBackward { axis, sizes }),
    ))
}

pub fn concat_channels<T: Float>(inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    for t in inputs {
        t.dims4()?;
    }
    concat(inputs, 1)
}

struct SliceBackward {
    axis: usize,
    start: usize,
    len: usize,
}

impl<T: Float> Backward<T> for SliceBackward {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let shape = parents[0].shape();
        let (outer, inner) = outer_inner(shape, self.axis);
        let total = shape[self.axis];
        let mut g = vec![T::zero(); parents[0].numel()];
        for o in 0..outer {
            let dst = (o * total + self.start) * inner;
            let src = o * self.len * inner;
            g[dst..dst + self.len * inner].copy_from_slice(&grad_out[src..src + self.len * inner]);
        }
        Ok(vec![Some(g)])
    }
}

/// Splits along `axis` into consecutive pieces of the given sizes.
pub fn split<T: Float>(input: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= input.rank() {
        return Err(Error::invalid(format!(
            "split axis {axis} out of range for rank {}",
            input.rank()
        )));
    }
    let total = input.shape()[axis];
    if sizes.iter().sum::<usize>() != total || sizes.contains(&0) {
        return Err(Error::invalid(format!(
            "split sizes {sizes:?} do not partition axis {axis} of length {total}"
        )));
    }
    let (outer, inner) = outer_inner(input.shape(), axis);
    let x = input.data();
    let mut start = 0;
    let mut pieces = Vec::with_capacity(sizes.len());
    for &len in sizes {
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * total + start) * inner;
            data.extend_from_slice(&x[s..s + len * inner]);
        }
        let mut shape = input.shape().to_vec();
        shape[axis] = len;
        pieces.push(Tensor::from_op(
            shape,
            data,
            vec![input.clone()],
            Box::new(SliceBackward { axis, start, len }),
        ));
        start += len;
    }
    Ok(pieces)
}

struct ReshapeBackward;

impl<T: Float> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(grad_out.to_vec())])
    }
}

pub fn reshape<T: Float>(input: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != input.numel() || shape.contains(&0) {
        return Err(Error::invalid(format!(
            "cannot reshape {:?} into {shape:?}",
            input.shape()
        )));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        input.to_vec(),
        vec![input.clone()],
        Box::new(ReshapeBackward),
    ))
}

// ---------------------------------------------------------------------------
// elementwise arithmetic

struct AddBackward;

impl<T: Float> Backward<T> for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(parents.iter().map(|p| need(p).then(|| grad_out.to_vec())).collect())
    }
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(AddBackward),
    ))
}

/// Index maps for same-rank broadcasting (each dim equal or 1).
fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("broadcast rank mismatch: {a:?} vs {b:?}")));
    }
    let mut out = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::invalid(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out.push(x.max(y));
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; s.len()];
        let mut acc = 1;
        for i in (0..s.len()).rev() {
            st[i] = if s[i] == 1 { 0 } else { acc };
            acc *= s[i];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let total: usize = out.iter().product();
    let mut ia = Vec::with_capacity(total);
    let mut ib = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        ia.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        ib.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, ia, ib))
}

struct MulBackward {
    ia: Vec<usize>,
    ib: Vec<usize>,
}

impl<T: Float> Backward<T> for MulBackward {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (a, b) = (parents[0].data(), parents[1].data());
        let ga = need(&parents[0]).then(|| {
            let mut g = vec![T::zero(); a.len()];
            for (k, go) in grad_out.iter().enumerate() {
                g[self.ia[k]] += *go * b[self.ib[k]];
            }
            g
        });
        let gb = need(&parents[1]).then(|| {
            let mut g = vec![T::zero(); b.len()];
            for (k, go) in grad_out.iter().enumerate() {
                g[self.ib[k]] += *go * a[self.ia[k]];
            }
            g
        });
        Ok(vec![ga, gb])
    }
}

/// Elementwise product with broadcasting over size-1 dimensions.
pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (shape, ia, ib) = broadcast_plan(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| ad[i] * bd[j]).collect();
    Ok(Tensor::from_op(
        shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(MulBackward { ia, ib }),
    ))
}

struct SumBackward;

impl<T: Float> Backward<T> for SumBackward {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(vec![grad_out[0]; parents[0].numel()])])
    }
}

pub fn sum<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum::<T>();
    Tensor::from_op(vec![1], vec![s], vec![x.clone()], Box::new(SumBackward))
}

// ---------------------------------------------------------------------------
// max pooling

struct MaxPoolBackward {
    argmax: Vec<usize>,
}

impl<T: Float> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, parents: &[Tensor<T>], _output: &[T], grad_out: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); parents[0].numel()];
        for (g, &src) in grad_out.iter().zip(&self.argmax) {
            dx[src] += *g;
        }
        Ok(vec![Some(dx)])
    }
}

/// Max pooling with implicit `-inf` padding. Ties route the gradient to the
/// first maximum in scan order.
pub fn max_pool2d<T: Float>(input: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if kernel == 0 || padding >= kernel {
        return Err(Error::invalid(format!(
            "max_pool2d padding {padding} too large for kernel {kernel}"
        )));
    }
    let (oh, ow) = conv_output_hw(h, w, kernel, kernel, stride, padding)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![n, c, oh, ow],
        out,
        vec![input.clone()],
        Box::new(MaxPoolBackward { argmax }),
    ))
}
