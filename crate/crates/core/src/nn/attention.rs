//! Coordinate attention and its cascade.
//!
//! The block pools the input along each spatial axis separately, so one
//! descriptor is indexed by row and the other by column. Both descriptors go
//! through a shared 1×1 reduction (conv, batch norm, SiLU); two 1×1 gate
//! convs then map them back to `C` channels and a sigmoid turns them into the
//! row gate `g_h[n,c,i]` and the column gate `g_w[n,c,j]`. The output is
//! `x[n,c,i,j]·g_h[n,c,i]·g_w[n,c,j]`.

use crate::error::{Error, Result};
use crate::nn::blocks::{batchnorm, conv, conv_flops, cost, BlockParams, ConvSpec};
use crate::nn::{Ctx, Init, ParamSpec};
use crate::tensor::ops::{self, PoolAxis};
use crate::tensor::{Float, Tensor};

pub const CA_MIN_REDUCED: usize = 4;

/// Reduced width `max(4, C/r)`.
pub fn ca_reduced_channels(c: usize, reduction: usize) -> usize {
    (c / reduction.max(1)).max(CA_MIN_REDUCED)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaSpec {
    pub channels: usize,
    pub reduced: usize,
}

impl CaSpec {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self {
            channels,
            reduced: ca_reduced_channels(channels, reduction),
        }
    }

    fn gate(&self) -> ConvSpec {
        ConvSpec {
            cin: self.reduced,
            cout: self.channels,
            k: 1,
        }
    }

    pub fn params(&self, prefix: &str) -> BlockParams {
        let (c, cr) = (self.channels, self.reduced);
        let mut p = BlockParams {
            params: vec![
                ParamSpec::new(
                    format!("{prefix}.reduce.conv.weight"),
                    &[cr, c, 1, 1],
                    Init::KaimingUniform { fan_in: c },
                ),
                ParamSpec::new(format!("{prefix}.reduce.bn.gamma"), &[cr], Init::Const(1.0)),
                ParamSpec::new(format!("{prefix}.reduce.bn.beta"), &[cr], Init::Const(0.0)),
            ],
            batchnorms: vec![(format!("{prefix}.reduce.bn"), cr)],
        };
        p.extend(self.gate().params(&format!("{prefix}.gate_h")));
        p.extend(self.gate().params(&format!("{prefix}.gate_w")));
        p
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> u64 {
        let (c, cr) = (self.channels, self.reduced);
        let pools = 2 * (n * c * h * w) as u64;
        let reduced = (n * cr * (h + w)) as u64;
        let reduce = conv_flops(n, c, cr, 1, h + w, 1, false) + reduced * (cost::BATCHNORM + cost::ACTIVATION);
        let gates = self.gate().flops(n, h + w, 1) + (n * c * (h + w)) as u64 * cost::ACTIVATION;
        let apply = 2 * (n * c * h * w) as u64 * cost::ELEMENTWISE;
        pools + reduce + gates + apply
    }
}

/// Row and column gates of one coordinate-attention block.
#[derive(Debug, Clone)]
pub struct CaGates<T: Float> {
    /// `[N,C,H,1]`
    pub h: Tensor<T>,
    /// `[N,C,1,W]`
    pub w: Tensor<T>,
}

pub fn coordinate_attention<T: Float>(ctx: &Ctx<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(coordinate_attention_with_gates(ctx, prefix, x)?.0)
}

/// Coordinate attention that also returns the gates it applied.
pub fn coordinate_attention_with_gates<T: Float>(
    ctx: &Ctx<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, CaGates<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let reduce_w = ctx.param(&format!("{prefix}.reduce.conv.weight"))?;
    if reduce_w.shape()[1] != c {
        return Err(Error::invalid(format!(
            "coordinate attention {prefix} expects C={} but input has C={c}",
            reduce_w.shape()[1]
        )));
    }
    let cr = reduce_w.shape()[0];

    let zh = ops::pool_directional(x, PoolAxis::Width)?;
    let zw = ops::reshape(&ops::pool_directional(x, PoolAxis::Height)?, &[n, c, w, 1])?;
    let z = ops::concat(&[zh, zw], 2)?;
    let t = ops::conv2d(&z, &reduce_w, None, 1, 0)?;
    let t = ops::silu(&batchnorm(ctx, &format!("{prefix}.reduce.bn"), &t)?);
    let mut parts = ops::split(&t, 2, &[h, w])?;
    let tw = ops::reshape(&parts.pop().expect("two parts"), &[n, cr, 1, w])?;
    let th = parts.pop().expect("two parts");

    let gh = ops::sigmoid(&conv(ctx, &format!("{prefix}.gate_h"), &th)?);
    let gw = ops::sigmoid(&conv(ctx, &format!("{prefix}.gate_w"), &tw)?);
    let y = ops::mul(&ops::mul(x, &gh)?, &gw)?;
    Ok((y, CaGates { h: gh, w: gw }))
}

/// Applies the blocks `<prefix>0`, `<prefix>1`, … in sequence.
pub fn cascade_ca<T: Float>(ctx: &Ctx<T>, prefixes: &[String], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = x.clone();
    for p in prefixes {
        y = coordinate_attention(ctx, p, &y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::blocks::tests::{random, store_from};
    use crate::nn::ParamStore;
    use crate::tensor::grad_check;

    fn ca_store(c: usize, names: &[&str], seed: u64) -> ParamStore {
        let mut params = BlockParams::default();
        for n in names {
            params.extend(CaSpec::new(c, 8).params(n));
        }
        store_from(&params, seed)
    }

    fn set_gates(store: &mut ParamStore, prefix: &str, weight: f32, bias: f32) {
        for g in ["gate_h", "gate_w"] {
            store
                .get_mut(&format!("{prefix}.{g}.weight"))
                .unwrap()
                .data
                .fill(weight);
            store.get_mut(&format!("{prefix}.{g}.bias")).unwrap().data.fill(bias);
        }
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let x = random(shape, seed);
        Tensor::new(shape, x.data().iter().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn reduced_width_has_floor() {
        assert_eq!(ca_reduced_channels(8, 8), 4);
        assert_eq!(ca_reduced_channels(64, 8), 8);
        assert_eq!(CaSpec::new(16, 8).params("a").params[3].shape, vec![16, 4, 1, 1]);
    }

    #[test]
    fn zero_gates_quarter_the_input() {
        let mut store = ca_store(6, &["ca"], 1);
        set_gates(&mut store, "ca", 0.0, 0.0);
        let x = input(&[2, 6, 5, 4], 2);
        let ctx = Ctx::<f32>::eval(&store);
        let (y, gates) = coordinate_attention_with_gates(&ctx, "ca", &x).unwrap();
        assert!(gates.h.data().iter().chain(gates.w.data()).all(|&g| g == 0.5));
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.25 * b);
        }
    }

    #[test]
    fn saturated_gates_pass_input_through() {
        let mut store = ca_store(4, &["ca"], 1);
        set_gates(&mut store, "ca", 0.0, 20.0);
        let x = input(&[1, 4, 4, 4], 3);
        let y = coordinate_attention(&Ctx::<f32>::eval(&store), "ca", &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cascade_composes() {
        let names = ["ca0", "ca1", "ca2"];
        let mut store = ca_store(4, &names, 4);
        for n in names {
            set_gates(&mut store, n, 0.0, 0.0);
        }
        let x = input(&[1, 4, 4, 4], 5);
        let ctx = Ctx::<f32>::eval(&store);
        let prefixes: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        assert_eq!(cascade_ca(&ctx, &[], &x).unwrap().data(), x.data());
        let one = cascade_ca(&ctx, &prefixes[..1], &x).unwrap();
        let three = cascade_ca(&ctx, &prefixes, &x).unwrap();
        for ((a, b), v) in one.data().iter().zip(three.data()).zip(x.data()) {
            assert_eq!(*a, 0.25 * v);
            assert_eq!(*b, 0.25 * 0.25 * 0.25 * v);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let store = ca_store(4, &["ca"], 1);
        let err = coordinate_attention(&Ctx::<f32>::eval(&store), "ca", &Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    fn permute_axis(x: &Tensor<f64>, perm: &[usize], rows: bool) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let mut out = vec![0.0; x.numel()];
        for b in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let (si, sj) = if rows { (perm[i], j) } else { (i, perm[j]) };
                    out[(b * h + i) * w + j] = x.data()[(b * h + si) * w + sj];
                }
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }

    #[test]
    fn gates_are_equivariant_to_row_and_column_permutations() {
        let store = ca_store(4, &["ca"], 7);
        let ctx = Ctx::<f64>::eval(&store);
        for (seed, size) in [(8, 4), (9, 5), (10, 6)] {
            let x = random(&[1, 4, size, size], seed);
            let perm: Vec<usize> = (0..size).rev().collect();
            let (y, g) = coordinate_attention_with_gates(&ctx, "ca", &x).unwrap();
            for rows in [true, false] {
                let xp = permute_axis(&x, &perm, rows);
                let (yp, gp) = coordinate_attention_with_gates(&ctx, "ca", &xp).unwrap();
                let (base, permuted) = if rows { (&g.h, &gp.h) } else { (&g.w, &gp.w) };
                let (other, other_p) = if rows { (&g.w, &gp.w) } else { (&g.h, &gp.h) };
                for ch in 0..4 {
                    for i in 0..size {
                        let want = base.data()[ch * size + perm[i]];
                        assert!((permuted.data()[ch * size + i] - want).abs() < 1e-12);
                    }
                }
                for (a, b) in other.data().iter().zip(other_p.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
                let want = permute_axis(&y, &perm, rows);
                for (a, b) in yp.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_never_exceeds_input_magnitude() {
        let store = ca_store(8, &["ca"], 11);
        let x = input(&[2, 8, 6, 5], 12);
        let (y, g) = coordinate_attention_with_gates(&Ctx::<f32>::eval(&store), "ca", &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(g.h.data().iter().chain(g.w.data()).all(|&v| v > 0.0 && v < 1.0));
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.abs() <= b.abs()));
    }

    #[test]
    fn full_block_gradient_check() {
        for seed in 0..3 {
            let store = ca_store(4, &["ca"], 20 + seed);
            let x = random(&[2, 4, 5, 4], 30 + seed);
            let f = |x: &Tensor<f64>| {
                let ctx = Ctx::<f64>::train(&store);
                let y = coordinate_attention(&ctx, "ca", x)?;
                Ok(ops::sum(&ops::mul(&y, &y)?))
            };
            assert!(grad_check(f, &x, 1e-3).unwrap() < 1e-3);
            let w = Ctx::<f64>::eval(&store)
                .param("ca.reduce.conv.weight")
                .unwrap()
                .detach();
            let fw = |w: &Tensor<f64>| {
                let ctx = Ctx::<f64>::train(&store).with_override("ca.reduce.conv.weight", w.clone());
                let y = coordinate_attention(&ctx, "ca", &x)?;
                Ok(ops::sum(&ops::mul(&y, &y)?))
            };
            assert!(grad_check(fw, &w, 1e-3).unwrap() < 1e-3);
        }
    }
}
