#![allow(dead_code)]

use mst_core::params::{Ctx, Mode, ParamStore};
use mst_core::ssd::{AConv1x1, HsaSsd, SsdDims};
use mst_core::{Component, Grid, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Replaces every parameter with `N(0, std²)` noise.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = randn(rng, &shape, std);
    }
}

pub fn aconv(store: &mut ParamStore<f64>, rng: &mut impl Rng, din: usize, dout: usize, k: usize) -> AConv1x1 {
    AConv1x1::new(store, rng, &format!("aconv{}", store.len()), Component::Other, din, dout, k, 4)
}

pub fn block(store: &mut ParamStore<f64>, rng: &mut impl Rng, d: usize, n: usize, k: usize) -> HsaSsd {
    let dims = SsdDims {
        dim: d,
        states: n,
        kernels: k,
        routing_reduction: 16,
    };
    HsaSsd::new(store, rng, &format!("blk{}", store.len()), Component::Other, dims)
}

/// Splits `l` tokens into a template grid and a search grid (or one grid).
pub fn grids_for(l: usize) -> Vec<Grid> {
    for t in (1..=l).rev() {
        let side = (t as f64).sqrt() as usize;
        if side * side == t && t < l {
            let rest = l - t;
            let w = (1..=rest).rev().find(|w| rest % w == 0 && *w * *w <= rest).unwrap_or(1);
            return vec![Grid::new(side, side), Grid::new(rest / w, w)];
        }
    }
    vec![Grid::new(1, l)]
}

pub fn eval_ctx(store: &ParamStore<f64>) -> Ctx<'_, f64> {
    Ctx::new(store, Mode::Eval)
}

pub fn max_abs(t: &Tensor<f64>) -> f64 {
    t.max_abs()
}
