//! Conv-BN-SiLU, the CSP stage block and the SPPF pooling block.
//!
//! Every block comes as a small spec type that knows its parameter layout
//! under a name prefix, how to run forward through a [`Ctx`], and how many
//! floating-point operations a forward pass costs. Parameter names follow
//! `<prefix>.<part>.weight` and batch-norm statistics live under
//! `<prefix>.<part>.bn`.

use crate::error::Result;
use crate::nn::{Ctx, Init, ParamSpec};
use crate::tensor::ops::{self, conv_output_hw, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Float, Tensor};

/// Parameters and batch-norm layers a block registers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockParams {
    pub params: Vec<ParamSpec>,
    /// `(stats name, channels)`
    pub batchnorms: Vec<(String, usize)>,
}

impl BlockParams {
    pub fn extend(&mut self, other: BlockParams) {
        self.params.extend(other.params);
        self.batchnorms.extend(other.batchnorms);
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Costs, in floating-point operations per element, of the cheap layers.
pub(crate) mod cost {
    pub const BATCHNORM: u64 = 2;
    pub const ACTIVATION: u64 = 2;
    pub const ELEMENTWISE: u64 = 1;
}

/// Cost of a convolution: two operations per multiply-accumulate plus one
/// addition per output element for the bias.
pub fn conv_flops(n: usize, cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize, bias: bool) -> u64 {
    let outputs = (n * cout * out_h * out_w) as u64;
    2 * outputs * (cin * k * k) as u64 + if bias { outputs } else { 0 }
}

/// Plain convolution with bias, `padding = k/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvSpec {
    pub fn params(&self, prefix: &str) -> BlockParams {
        let fan_in = self.cin * self.k * self.k;
        BlockParams {
            params: vec![
                ParamSpec::new(
                    format!("{prefix}.weight"),
                    &[self.cout, self.cin, self.k, self.k],
                    Init::KaimingUniform { fan_in },
                ),
                ParamSpec::new(format!("{prefix}.bias"), &[self.cout], Init::KaimingUniform { fan_in }),
            ],
            batchnorms: vec![],
        }
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        conv_flops(n, self.cin, self.cout, self.k, h, w, true)
    }
}

/// Convolution with bias, stride 1 and `padding = k/2`.
pub fn conv<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    let k = w.shape()[2];
    ops::conv2d(x, &w, Some(&b), 1, k / 2)
}

/// Bias-free convolution, batch norm, SiLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBnActSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvBnActSpec {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self { cin, cout, k, stride }
    }

    pub fn params(&self, prefix: &str) -> BlockParams {
        BlockParams {
            params: vec![
                ParamSpec::new(
                    format!("{prefix}.conv.weight"),
                    &[self.cout, self.cin, self.k, self.k],
                    Init::KaimingUniform {
                        fan_in: self.cin * self.k * self.k,
                    },
                ),
                ParamSpec::new(format!("{prefix}.bn.gamma"), &[self.cout], Init::Const(1.0)),
                ParamSpec::new(format!("{prefix}.bn.beta"), &[self.cout], Init::Const(0.0)),
            ],
            batchnorms: vec![(format!("{prefix}.bn"), self.cout)],
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_hw(h, w, self.k, self.k, self.stride, self.k / 2)
    }

    /// Returns the cost and the output spatial size.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<(u64, (usize, usize))> {
        let (oh, ow) = self.out_hw(h, w)?;
        let elems = (n * self.cout * oh * ow) as u64;
        let f =
            conv_flops(n, self.cin, self.cout, self.k, oh, ow, false) + elems * (cost::BATCHNORM + cost::ACTIVATION);
        Ok((f, (oh, ow)))
    }
}

/// `silu(bn(conv(x)))` with `padding = k/2`; kernel size and stride follow
/// the stored weight and the `stride` argument.
pub fn conv_bn_act<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let w = ctx.param(&format!("{prefix}.conv.weight"))?;
    let k = w.shape()[2];
    let y = ops::conv2d(x, &w, None, stride, k / 2)?;
    let y = batchnorm(ctx, &format!("{prefix}.bn"), &y)?;
    Ok(ops::silu(&y))
}

pub(crate) fn batchnorm<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let gamma_name = format!("{prefix}.gamma");
    let gamma = ctx.param(&gamma_name)?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    let mode = ctx.bn_mode(&gamma_name);
    let mut stats = ctx.running_stats(prefix)?;
    let y = ops::batchnorm2d(x, &gamma, &beta, &mut stats, mode, BN_EPS, BN_MOMENTUM)?;
    if mode == ops::BnMode::Train {
        ctx.update_stats(prefix, stats);
    }
    Ok(y)
}

/// Cross-stage-partial block: a 1×1 projection split into two halves, a chain
/// of residual 3×3 bottlenecks on the second half, and a 1×1 fusion of the
/// projection halves with every bottleneck output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CspSpec {
    pub cin: usize,
    pub cout: usize,
    pub hidden: usize,
    pub n: usize,
}

impl CspSpec {
    /// Hidden width `cout·expansion`, at least 2.
    pub fn new(cin: usize, cout: usize, n: usize, expansion: f64) -> Self {
        let hidden = ((cout as f64 * expansion).round() as usize).max(2);
        Self { cin, cout, hidden, n }
    }

    fn parts(&self) -> (ConvBnActSpec, ConvBnActSpec, ConvBnActSpec) {
        let h = self.hidden;
        (
            ConvBnActSpec::new(self.cin, 2 * h, 1, 1),
            ConvBnActSpec::new(h, h, 3, 1),
            ConvBnActSpec::new((2 + self.n) * h, self.cout, 1, 1),
        )
    }

    pub fn params(&self, prefix: &str) -> BlockParams {
        let (cv1, m, cv2) = self.parts();
        let mut p = cv1.params(&format!("{prefix}.cv1"));
        for i in 0..self.n {
            p.extend(m.params(&format!("{prefix}.m{i}.cv1")));
            p.extend(m.params(&format!("{prefix}.m{i}.cv2")));
        }
        p.extend(cv2.params(&format!("{prefix}.cv2")));
        p
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let (cv1, m, cv2) = self.parts();
        let mut f = cv1.flops(n, h, w)?.0 + cv2.flops(n, h, w)?.0;
        let residual = (n * self.hidden * h * w) as u64 * cost::ELEMENTWISE;
        f += self.n as u64 * (2 * m.flops(n, h, w)?.0 + residual);
        Ok(f)
    }
}

pub fn csp_block<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>, n_bottlenecks: usize) -> Result<Tensor<T>> {
    let y = conv_bn_act(ctx, &format!("{prefix}.cv1"), x, 1)?;
    let half = y.shape()[1] / 2;
    let mut halves = ops::split(&y, 1, &[half, half])?;
    let mut last = halves.pop().expect("two halves");
    let mut parts = vec![halves.pop().expect("two halves"), last.clone()];
    for i in 0..n_bottlenecks {
        let b = conv_bn_act(ctx, &format!("{prefix}.m{i}.cv1"), &last, 1)?;
        let b = conv_bn_act(ctx, &format!("{prefix}.m{i}.cv2"), &b, 1)?;
        last = ops::add(&b, &last)?;
        parts.push(last.clone());
    }
    conv_bn_act(ctx, &format!("{prefix}.cv2"), &ops::concat_channels(&parts)?, 1)
}

/// Spatial pyramid pooling (fast): three chained 5×5 max pools whose outputs
/// are concatenated with their input and fused by a 1×1 conv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SppfSpec {
    pub cin: usize,
    pub cout: usize,
}

pub const SPPF_KERNEL: usize = 5;

impl SppfSpec {
    fn parts(&self) -> (ConvBnActSpec, ConvBnActSpec) {
        let h = (self.cin / 2).max(1);
        (
            ConvBnActSpec::new(self.cin, h, 1, 1),
            ConvBnActSpec::new(4 * h, self.cout, 1, 1),
        )
    }

    pub fn params(&self, prefix: &str) -> BlockParams {
        let (cv1, cv2) = self.parts();
        let mut p = cv1.params(&format!("{prefix}.cv1"));
        p.extend(cv2.params(&format!("{prefix}.cv2")));
        p
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let (cv1, cv2) = self.parts();
        let pool = 3 * (n * cv1.cout * h * w * SPPF_KERNEL * SPPF_KERNEL) as u64;
        Ok(cv1.flops(n, h, w)?.0 + pool + cv2.flops(n, h, w)?.0)
    }
}

pub fn sppf_block<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = conv_bn_act(ctx, &format!("{prefix}.cv1"), x, 1)?;
    let p = SPPF_KERNEL / 2;
    let m1 = ops::max_pool2d(&y, SPPF_KERNEL, 1, p)?;
    let m2 = ops::max_pool2d(&m1, SPPF_KERNEL, 1, p)?;
    let m3 = ops::max_pool2d(&m2, SPPF_KERNEL, 1, p)?;
    conv_bn_act(
        ctx,
        &format!("{prefix}.cv2"),
        &ops::concat_channels(&[y, m1, m2, m3])?,
        1,
    )
}
