//! Self-checks shared by the test suites and the command line: gradient
//! checks of every tape op and composite block, and randomized
//! `ssd_core`/`ssd_oracle` equivalence trials.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{AttentionBlock, Geometry, StateBundle};
use crate::boxes::BoxXYWH;
use crate::config::TrackerConfig;
use crate::counter::Component;
use crate::error::{Error, Result};
use crate::fusion::{Csi, Sse};
use crate::gradcheck::{grad_check_direction, grad_check_many, param_gradient_pairs, relative_error};
use crate::grid::Grid;
use crate::head::{gaussian_heatmap, total_loss, Head, LossWeights};
use crate::nn::Linear;
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::ssd::{gate_values, ssd_core, ssd_oracle, AConv1x1, HsaSsd, MixValues, Projection, SsdDims};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error accepted by the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;
/// Finite-difference step for primitive ops.
const OP_EPS: f64 = 1e-5;
/// Step for composite blocks. Kernel-routing gradients are O(1e-7), so a
/// wider step keeps round-off below them; 1e-3 already crosses ReLU kinks
/// in the routing MLP.
const BLOCK_EPS: f64 = 1e-4;

type CheckFn = fn(&mut ChaCha8Rng) -> Result<f64>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("matmul", |r| op(r.gen(), vec![randn(r, &[4, 5]), randn(r, &[5, 3])], |t, v| t.matmul(v[0], v[1]))),
    ("matmul_bt", |r| op(r.gen(), vec![randn(r, &[4, 5]), randn(r, &[3, 5])], |t, v| t.matmul_bt(v[0], v[1]))),
    ("matmul_at", |r| op(r.gen(), vec![randn(r, &[5, 4]), randn(r, &[5, 3])], |t, v| t.matmul_at(v[0], v[1]))),
    ("linear", |r| {
        op(r.gen(), vec![randn(r, &[4, 5]), randn(r, &[3, 5]), randn(r, &[3])], |t, v| t.linear(v[0], v[1], Some(v[2])))
    }),
    ("add", |r| op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.add(v[0], v[1]))),
    ("sub", |r| op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.sub(v[0], v[1]))),
    ("mul", |r| op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.mul(v[0], v[1]))),
    ("add_n", |r| {
        op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[3, 4]), randn(r, &[3, 4])], |t, v| t.add_n(v))
    }),
    ("add_row", |r| op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[4])], |t, v| t.add_row(v[0], v[1]))),
    ("mul_row", |r| op(r.gen(), vec![randn(r, &[3, 4]), randn(r, &[4])], |t, v| t.mul_row(v[0], v[1]))),
    ("scale", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.scale(v[0], -1.7))),
    ("sigmoid", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.sigmoid(v[0]))),
    ("silu", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.silu(v[0]))),
    ("gelu", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.gelu(v[0]))),
    ("relu", |r| op(r.gen(), vec![away_from_zero(r, &[3, 4])], |t, v| t.relu(v[0]))),
    ("softplus", |r| op(r.gen(), vec![randn(r, &[3, 4]).scale(3.0)], |t, v| t.softplus(v[0]))),
    ("layer_norm", |r| {
        op(r.gen(), vec![randn(r, &[4, 6]), randn(r, &[6]), randn(r, &[6])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-6)
        })
    }),
    ("batch_norm_train", |r| {
        op(r.gen(), vec![randn(r, &[6, 3]), randn(r, &[3]), randn(r, &[3])], |t, v| {
            Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)
        })
    }),
    ("batch_norm_eval", |r| {
        let mean: Vec<f64> = randn(r, &[3]).into_data();
        let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
        op(r.gen(), vec![randn(r, &[6, 3]), randn(r, &[3]), randn(r, &[3])], move |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)
        })
    }),
    ("softmax", |r| {
        op(r.gen(), vec![randn(r, &[3, 5])], |t, v| {
            let a = t.softmax(v[0], 0)?;
            let b = t.softmax(v[0], 1)?;
            t.add(a, b)
        })
    }),
    ("transpose", |r| op(r.gen(), vec![randn(r, &[3, 5])], |t, v| t.transpose(v[0]))),
    ("reshape", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6]))),
    ("concat", |r| {
        op(r.gen(), vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |t, v| {
            let rows = t.concat(v, 0)?;
            let cols = t.concat(v, 1)?;
            let cols = t.reshape(cols, &[4, 3])?;
            t.mul(rows, cols)
        })
    }),
    ("split", |r| {
        op(r.gen(), vec![randn(r, &[6, 3])], |t, v| {
            let p = t.split(v[0], 0, &[1, 2, 3])?;
            let q = t.narrow(p[2], 0, 1, 2)?;
            let s = t.mul(p[1], q)?;
            t.add(s, s)
        })
    }),
    ("gather_rows", |r| op(r.gen(), vec![randn(r, &[4, 3])], |t, v| t.gather_rows(v[0], &[0, 2, 2, 3]))),
    ("sum", |r| op(r.gen(), vec![randn(r, &[3, 4])], |t, v| t.sum(v[0]))),
    ("mean_axis", |r| {
        op(r.gen(), vec![randn(r, &[3, 4])], |t, v| {
            let a = t.mean_axis(v[0], 0)?;
            let b = t.mean_axis(v[0], 1)?;
            let b = t.transpose(b)?;
            let b = t.narrow(b, 1, 0, 3)?;
            let a = t.narrow(a, 1, 0, 3)?;
            t.mul(a, b)
        })
    }),
    ("col_normalize", |r| op(r.gen(), vec![uniform(r, &[5, 3], 0.2, 2.0)], |t, v| t.col_normalize(v[0], 1e-8))),
    ("conv3x3", |r| {
        op(r.gen(), vec![randn(r, &[13, 3]), randn(r, &[4, 27])], |t, v| t.conv3x3(v[0], v[1], &two_grids()))
    }),
    ("dwconv3x3", |r| {
        op(r.gen(), vec![randn(r, &[13, 3]), randn(r, &[3, 9])], |t, v| t.dwconv3x3(v[0], v[1], &two_grids()))
    }),
    ("focal_loss", |r| {
        let cell = (r.gen_range(0..4), r.gen_range(0..4));
        let heat: Tensor<f64> = gaussian_heatmap(Grid::new(4, 4), cell, 1.3);
        op(r.gen(), vec![uniform(r, &[16, 1], 0.05, 0.95)], move |t, v| t.focal_loss(v[0], &heat, 2.0, 4.0))
    }),
    ("giou_loss", |r| {
        // shifted and slightly resized so edges cross on both axes: a box
        // nested in the other along an axis has zero gradient there
        let gt = [r.gen_range(0.1..0.4), r.gen_range(0.1..0.4), r.gen_range(0.2..0.5), r.gen_range(0.2..0.5)];
        let mut shift = || r.gen_range(0.02..0.08) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (dx, dy) = (shift(), shift());
        let dw = r.gen_range(-0.01..0.01);
        let dh = r.gen_range(-0.01..0.01);
        let pred = Tensor::from_parts(vec![1, 4], vec![gt[0] + dx, gt[1] + dy, gt[2] + dw, gt[3] + dh]);
        op(r.gen(), vec![pred], move |t, v| t.giou_loss(v[0], gt))
    }),
    ("l1_loss", |r| {
        let gt = randn(r, &[2, 3]);
        let pred = gt.add(&away_from_zero(r, &[2, 3])).expect("same shape");
        op(r.gen(), vec![pred], move |t, v| t.l1_loss(v[0], &gt))
    }),
    ("box_from_cell", |r| {
        op(r.gen(), vec![uniform(r, &[1, 2], 0.0, 1.0), uniform(r, &[1, 2], 0.1, 0.6)], |t, v| {
            t.box_from_cell(v[0], v[1], (2, 1), Grid::new(4, 3))
        })
    }),
    ("attention_block", attention_block),
    ("hsa_ssd_block", hsa_ssd_block),
    ("sse_csi", sse_csi),
    ("total_loss", head_loss),
];

/// Names of every registered gradient check.
pub fn gradient_check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst relative error over all seeds.
    pub max_rel_err: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

/// One gradient check at one seed.
pub fn run_gradient_check(name: &str, seed: u64) -> Result<f64> {
    let (_, f) = CHECKS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Input(format!("unknown gradient check {name:?}")))?;
    f(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs the checks whose name contains `filter` (all when `None`) over
/// seeds `0..seeds`.
pub fn gradient_suite(filter: Option<&str>, seeds: u64) -> Result<Vec<CheckResult>> {
    let selected: Vec<_> = CHECKS
        .iter()
        .filter(|(n, _)| filter.map_or(true, |f| n.contains(f)))
        .collect();
    if selected.is_empty() {
        return Err(Error::Input(format!("no gradient check matches {:?}", filter.unwrap_or(""))));
    }
    selected
        .into_iter()
        .map(|&(name, f)| {
            let mut worst = 0.0f64;
            for seed in 0..seeds {
                worst = worst.max(f(&mut ChaCha8Rng::seed_from_u64(seed))?);
            }
            Ok(CheckResult {
                name,
                max_rel_err: worst,
                seeds,
            })
        })
        .collect()
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Entries with magnitude in `[0.1, 1.1)` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.1);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn two_grids() -> [Grid; 2] {
    [Grid::new(2, 2), Grid::new(3, 3)]
}

/// Checks `Σ R ⊙ f(inputs)` with a random projection `R`.
fn op<F>(seed: u64, inputs: Vec<Tensor<f64>>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut probe = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| probe.leaf(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&mut probe, &vars)?;
    let weights = randn(&mut ChaCha8Rng::seed_from_u64(seed), probe.shape(y));
    grad_check_many(
        |tape, v| {
            let y = f(tape, v)?;
            let w = tape.constant(weights.clone())?;
            let p = tape.mul(y, w)?;
            tape.sum(p)
        },
        &inputs,
        OP_EPS,
    )
}

/// Adds `N(0, std)` noise to every parameter so no weight sits at its
/// structured initial value.
fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Entries whose gradient is identically zero: both sides must vanish to
/// within round-off, since a relative error is meaningless there.
const STRUCTURAL_ZERO_TOL: f64 = 1e-9;

/// Input and parameter gradients of `Σ R ⊙ f(ctx, inputs)`. Elements of
/// `zero` (a parameter and an element range) are held to
/// [`STRUCTURAL_ZERO_TOL`] instead.
fn module_check<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    zero: Option<(ParamId, Range<usize>)>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let project = |ctx: &mut Ctx<'_, f64>, y: Var| -> Result<Var> {
        let w = ctx.constant(weights.clone())?;
        let p = ctx.tape.mul(y, w)?;
        ctx.tape.sum(p)
    };
    let mut worst = grad_check_many(
        |tape, v| {
            let mut ctx = Ctx::with_tape(store, mode, std::mem::take(tape));
            let out = f(&mut ctx, v).and_then(|y| project(&mut ctx, y));
            *tape = ctx.tape;
            out
        },
        inputs,
        BLOCK_EPS,
    )?;
    let objective = |ctx: &mut Ctx<'_, f64>| -> Result<Var> {
        let vars = inputs
            .iter()
            .map(|x| ctx.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(ctx, &vars)?;
        project(ctx, y)
    };
    for id in store.ids() {
        for (i, (a, n)) in param_gradient_pairs(store, id, mode, &objective, BLOCK_EPS)?.into_iter().enumerate() {
            let err = match &zero {
                Some((z, range)) if *z == id && range.contains(&i) => {
                    if a.abs().max(n.abs()) < STRUCTURAL_ZERO_TOL {
                        0.0
                    } else {
                        relative_error(a, n).max(1.0)
                    }
                }
                _ => relative_error(a, n),
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn attention_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let blk = AttentionBlock::new(&mut store, rng, "blk", 8, 2, 16);
    perturb(&mut store, rng, 0.1);
    let x = randn(rng, &[6, 8]);
    let w = randn(rng, &[6, 8]);
    // softmax is shift-invariant per row, so the key bias has no effect
    let key_bias = (blk.qkv.b.expect("qkv carries a bias"), 8..16);
    module_check(&store, Mode::Eval, &[x], &w, Some(key_bias), |ctx, v| blk.forward(ctx, v[0]))
}

fn hsa_ssd_block(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = SsdDims {
        dim: 8,
        states: 4,
        kernels: 2,
        routing_reduction: 16,
    };
    let mut store = ParamStore::new();
    let blk = HsaSsd::new(&mut store, rng, "blk", Component::Other, dims);
    perturb(&mut store, rng, 0.3);
    let grids = [Grid::new(2, 2), Grid::new(2, 4)];
    let s = randn(rng, &[12, 8]);
    let w = randn(rng, &[12, 8]);
    module_check(&store, Mode::Eval, &[s], &w, None, |ctx, v| blk.forward(ctx, v[0], &grids))
}

/// Small configuration shared by the stack and loss checks: 2×2 template
/// grid, 3×3 search grid, `D = 8`.
fn small_config() -> TrackerConfig {
    TrackerConfig {
        patch_size: 4,
        embed_dim: 8,
        num_layers: 3,
        num_heads: 2,
        template_size: 8,
        search_size: 12,
        ssd_state_count: 4,
        aconv_kernel_count: 2,
        head_channels: 8,
        ..TrackerConfig::desk()
    }
}

fn sse_csi(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let sse = Sse::new(&mut store, rng, &cfg);
    let csi = Csi::new(&mut store, rng, &cfg);
    perturb(&mut store, rng, 0.3);
    let geometry = Geometry::of(&cfg);
    let l = geometry.len();
    let states: Vec<_> = (0..3).map(|_| randn(rng, &[l, cfg.embed_dim])).collect();
    let w = randn(rng, &[l, cfg.embed_dim]);
    module_check(&store, Mode::Eval, &states, &w, None, |ctx, v| {
        let bundle = StateBundle {
            states: v.to_vec(),
            geometry,
        };
        let enhanced = sse.forward(ctx, &bundle)?;
        csi.forward(ctx, &enhanced)
    })
}

/// Random unit directions checked per head weight tensor.
const HEAD_DIRECTIONS: usize = 4;

/// Full training loss of one sample with respect to every head weight.
/// Each weight tensor is checked along random unit directions: among the
/// thousands of single entries some fall below the resolution of the loss
/// in `f64`, while a directional derivative carries the whole tensor's
/// gradient.
fn head_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = small_config();
    let mut store = ParamStore::new();
    let head = Head::new(&mut store, rng, &cfg);
    perturb(&mut store, rng, 0.1);
    let grid = cfg.search_grid();
    let tokens = randn(rng, &[grid.len(), cfg.embed_dim]);
    let gt = BoxXYWH::new(
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.2..0.5),
        rng.gen_range(0.2..0.5),
    );
    let geo = crate::head::TargetGeometry {
        grid,
        patch: cfg.patch_size,
        search_size: cfg.search_size,
    };
    let objective = |ctx: &mut Ctx<'_, f64>| -> Result<Var> {
        let x = ctx.constant(tokens.clone())?;
        let out = head.forward(ctx, x, 1)?;
        Ok(total_loss(ctx, out.score, out.size, out.offset, &gt, geo, LossWeights::default())?.total)
    };
    let mut worst = 0.0f64;
    for id in store.ids() {
        for _ in 0..HEAD_DIRECTIONS {
            let shape = store.get(id).shape().to_vec();
            let v = randn(rng, &shape);
            let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let err = grad_check_direction(&store, id, &v.scale(1.0 / norm), Mode::Train, objective, OP_EPS)?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Outcome of [`ssd_oracle_trials`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    /// Worst `max|core − oracle| / max|core|` over the trials.
    pub worst_ratio: f64,
    /// `(L, D, N_s, K)` of the worst trial.
    pub worst_config: (usize, usize, usize, usize),
}

/// Random `(L ≤ 128, D ≤ 64, N_s ≤ 16, K ≤ 4)` configurations with random
/// weights, comparing [`ssd_core`] against [`ssd_oracle`] in `f64`.
pub fn ssd_oracle_trials(trials: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        trials,
        worst_ratio: 0.0,
        worst_config: (0, 0, 0, 0),
    };
    for _ in 0..trials {
        let l = rng.gen_range(2..=128);
        let d = rng.gen_range(1..=64);
        let n = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=4);
        let ratio = oracle_trial(&mut rng, l, d, n, k)?;
        if ratio >= report.worst_ratio {
            report.worst_ratio = ratio;
            report.worst_config = (l, d, n, k);
        }
    }
    Ok(report)
}

fn oracle_trial(rng: &mut ChaCha8Rng, l: usize, d: usize, n: usize, k: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let gate = Linear::new(&mut store, rng, "gate", Component::Other, d, d, true);
    let mix = AConv1x1::new(&mut store, rng, "mix", Component::Other, d, d, k, 4);
    perturb(&mut store, rng, 1.0 / (d as f64).sqrt());
    let s = randn(rng, &[l, d]);
    let b = randn(rng, &[l, n]);
    let c = randn(rng, &[l, n]);
    let delta = randn(rng, &[l, n]);

    let mut ctx = Ctx::new(&store, Mode::Eval);
    let sv = ctx.input(s.clone())?;
    let proj = Projection {
        b: ctx.input(b.clone())?,
        c: ctx.input(c.clone())?,
        delta: ctx.input(delta.clone())?,
    };
    let y = ssd_core(&mut ctx, sv, proj, Some(&gate), &mix)?;
    let y = ctx.value(y);
    let oracle = ssd_oracle(&s, &b, &c, &delta, Some(&gate_values(&store, &gate)), &MixValues::of(&store, &mix))?;
    Ok(y.max_abs_diff(&oracle)? / y.max_abs().max(f64::MIN_POSITIVE))
}

