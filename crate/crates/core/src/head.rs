//! Centre head (score, size and offset branches), box decoding, Hanning
//! rescoring and the training loss.

use std::f64::consts::PI;

use rand::Rng;

use crate::boxes::BoxXYWH;
use crate::config::TrackerConfig;
use crate::counter::Component;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Linear;
use crate::params::{init, BatchStats, BufferId, Ctx, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
/// Initial score-branch bias: a prior of 0.1 on every cell.
const SCORE_PRIOR_BIAS: f64 = -2.197_224_577;

#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    /// `[C_out, 9·C_in]`, no bias.
    pub w: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cin: usize, cout: usize) -> Self {
        let c = Component::Head;
        Self {
            w: store.add(format!("{name}.w"), c, init::fan_in(rng, &[cout, 9 * cin], 9 * cin)),
            gamma: store.add(format!("{name}.bn.gamma"), c, init::ones(&[cout])),
            beta: store.add(format!("{name}.bn.beta"), c, init::zeros(&[cout])),
            running_mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout])),
            running_var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(&[cout], T::one())),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, grids: &[Grid]) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let y = ctx.tape.conv3x3(x, w, grids)?;
        let g = ctx.p(self.gamma)?;
        let b = ctx.p(self.beta)?;
        let eps = T::of(BN_EPS);
        let y = match ctx.mode() {
            Mode::Train => {
                let (y, mean, var) = ctx.tape.batch_norm_train(y, g, b, eps)?;
                let count = ctx.tape.shape(y)[0];
                ctx.push_batch_stats(BatchStats {
                    mean_buffer: self.running_mean,
                    var_buffer: self.running_var,
                    mean,
                    var,
                    count,
                });
                y
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.buffer(self.running_mean).data().to_vec();
                let var = store.buffer(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(y, g, b, &mean, &var, eps)?
            }
        };
        ctx.tape.relu(y)
    }
}

/// Three Conv-BN-ReLU stages tapering `c → c/2 → c/4`, then a 1×1
/// projection with sigmoid.
#[derive(Clone, Debug)]
pub struct Branch {
    pub stages: Vec<ConvBnRelu>,
    pub out: Linear,
}

impl Branch {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        channels: usize,
        outputs: usize,
    ) -> Self {
        let widths = [dim, channels, channels / 2, channels / 4];
        let stages = (0..3)
            .map(|i| ConvBnRelu::new(store, rng, &format!("{name}.{i}"), widths[i], widths[i + 1]))
            .collect();
        let out = Linear::new(store, rng, &format!("{name}.out"), Component::Head, widths[3], outputs, true);
        Self { stages, out }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, grids: &[Grid]) -> Result<Var> {
        let mut h = x;
        for s in &self.stages {
            h = s.forward(ctx, h, grids)?;
        }
        let logits = self.out.forward(ctx, h)?;
        ctx.tape.sigmoid(logits)
    }
}

/// Per-cell head outputs on the tape, rows in raster order per sample.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[R, 1]`
    pub score: Var,
    /// `[R, 2]` normalised `(w, h)`
    pub size: Var,
    /// `[R, 2]` sub-cell `(x, y)` offsets
    pub offset: Var,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub score: Branch,
    pub size: Branch,
    pub offset: Branch,
    pub grid: Grid,
}

impl Head {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TrackerConfig) -> Self {
        let (d, c) = (cfg.embed_dim, cfg.head_channels);
        let score = Branch::new(store, rng, "head.score", d, c, 1);
        if let Some(b) = score.out.b {
            store.get_mut(b).data_mut()[0] = T::of(SCORE_PRIOR_BIAS);
        }
        Self {
            score,
            size: Branch::new(store, rng, "head.size", d, c, 2),
            offset: Branch::new(store, rng, "head.offset", d, c, 2),
            grid: cfg.search_grid(),
        }
    }

    /// `x` holds the search tokens of `samples` sequences back to back.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, samples: usize) -> Result<HeadOutput> {
        let prev = ctx.tape.set_component(Component::Head);
        let grids = vec![self.grid; samples];
        let out = (|| {
            Ok(HeadOutput {
                score: self.score.forward(ctx, x, &grids)?,
                size: self.size.forward(ctx, x, &grids)?,
                offset: self.offset.forward(ctx, x, &grids)?,
            })
        })();
        ctx.tape.set_component(prev);
        out
    }
}

/// Plain head maps of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T> {
    /// `[H, W]`
    pub score: Tensor<T>,
    /// `[2, H, W]`: width then height
    pub size: Tensor<T>,
    /// `[2, H, W]`: x then y
    pub offset: Tensor<T>,
}

impl<T: Scalar> HeadMaps<T> {
    /// Slices sample `i` out of row-stacked `[R, 1]`, `[R, 2]`, `[R, 2]` values.
    pub fn from_rows(score: &Tensor<T>, size: &Tensor<T>, offset: &Tensor<T>, grid: Grid, i: usize) -> Result<Self> {
        let n = grid.len();
        let rows = |t: &Tensor<T>, c: usize| -> Result<Tensor<T>> {
            if t.len() < (i + 1) * n * c {
                return Err(Error::Input(format!("sample {i} out of range for head output {:?}", t.shape())));
            }
            let part = &t.data()[i * n * c..(i + 1) * n * c];
            // channel-last rows to channel-first planes
            Ok(Tensor::from_fn(&[c, grid.h, grid.w], |idx| {
                let (ch, cell) = (idx / n, idx % n);
                part[cell * c + ch]
            }))
        };
        Ok(Self {
            score: rows(score, 1)?.reshape(&[grid.h, grid.w])?,
            size: rows(size, 2)?,
            offset: rows(offset, 2)?,
        })
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.score.shape()[0], self.score.shape()[1])
    }

    /// Box decoded at cell `(x, y)`, in search-crop pixels.
    pub fn box_at(&self, cell: (usize, usize), search_size: f64) -> BoxXYWH<T> {
        let g = self.grid();
        let n = g.len();
        let idx = cell.1 * g.w + cell.0;
        let s = T::of(search_size);
        let cx = (T::of(cell.0 as f64) + self.offset.data()[idx]) / T::of(g.w as f64);
        let cy = (T::of(cell.1 as f64) + self.offset.data()[n + idx]) / T::of(g.h as f64);
        BoxXYWH::from_center(cx * s, cy * s, self.size.data()[idx] * s, self.size.data()[n + idx] * s)
    }
}

/// Cell `(x, y)` of the first maximum of `p: [H, W]` in row-major order.
pub fn argmax_cell<T: Scalar>(p: &Tensor<T>) -> (usize, usize) {
    let w = p.shape()[1];
    let i = p.argmax();
    (i % w, i / w)
}

/// Box at the score maximum, in search-crop pixels.
pub fn decode_box<T: Scalar>(maps: &HeadMaps<T>, search_size: f64) -> BoxXYWH<T> {
    maps.box_at(argmax_cell(&maps.score), search_size)
}

/// `0.5 − 0.5·cos(2πi/(n−1))`; a single sample is 1.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::one()];
    }
    (0..n)
        .map(|i| T::of(0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()))
        .collect()
}

/// `(1 − weight)·P + weight·(P ⊙ hann2d)`.
pub fn hanning_rescore<T: Scalar>(p: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Input(format!("hanning weight {weight} outside [0, 1]")));
    }
    let (h, w) = p.dims2()?;
    let (hy, hx) = (hann::<T>(h), hann::<T>(w));
    let wt = T::of(weight);
    Ok(Tensor::from_fn(&[h, w], |idx| {
        let v = p.data()[idx];
        (T::one() - wt) * v + wt * v * hy[idx / w] * hx[idx % w]
    }))
}

/// Grid cell containing the centre of a normalised box.
pub fn gt_cell<T: Scalar>(gt: &BoxXYWH<T>, grid: Grid) -> (usize, usize) {
    let (cx, cy) = gt.center();
    let clampi = |v: T, n: usize| {
        let f = (v * T::of(n as f64)).floor().to_f64_lossy();
        f.clamp(0.0, (n - 1) as f64) as usize
    };
    (clampi(cx, grid.w), clampi(cy, grid.h))
}

/// Gaussian splat over the grid, exactly 1 at `cell`.
pub fn gaussian_heatmap<T: Scalar>(grid: Grid, cell: (usize, usize), sigma: f64) -> Tensor<T> {
    Tensor::from_fn(&[grid.len(), 1], |idx| {
        let (x, y) = ((idx % grid.w) as f64, (idx / grid.w) as f64);
        let d2 = (x - cell.0 as f64).powi(2) + (y - cell.1 as f64).powi(2);
        T::of((-d2 / (2.0 * sigma * sigma)).exp())
    })
}

/// `max(1, 0.1·min(w, h)/patch)` cells for a box given in crop pixels.
pub fn heatmap_sigma(w_px: f64, h_px: f64, patch: usize) -> f64 {
    (0.1 * w_px.min(h_px) / patch as f64).max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub iou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { iou: 2.0, l1: 5.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Sizes needed to build targets for one sample.
#[derive(Clone, Copy, Debug)]
pub struct TargetGeometry {
    pub grid: Grid,
    pub patch: usize,
    pub search_size: usize,
}

/// `L_cls + λ_iou·L_giou + λ_L1·L_1` for one sample. `score`, `size` and
/// `offset` are that sample's `[N, 1]`, `[N, 2]`, `[N, 2]` rows; `gt` is
/// normalised to the search crop.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    score: Var,
    size: Var,
    offset: Var,
    gt: &BoxXYWH<T>,
    geo: TargetGeometry,
    weights: LossWeights,
) -> Result<LossTerms> {
    let grid = geo.grid;
    let cell = gt_cell(gt, grid);
    let s = geo.search_size as f64;
    let sigma = heatmap_sigma(gt.w.to_f64_lossy() * s, gt.h.to_f64_lossy() * s, geo.patch);
    let heat = gaussian_heatmap::<T>(grid, cell, sigma).reshape(ctx.tape.shape(score))?;
    let cls = ctx
        .tape
        .focal_loss(score, &heat, T::of(FOCAL_ALPHA), T::of(FOCAL_BETA))?;

    let row = cell.1 * grid.w + cell.0;
    let off = ctx.tape.gather_rows(offset, &[row])?;
    let sz = ctx.tape.gather_rows(size, &[row])?;
    let pred = ctx.tape.box_from_cell(off, sz, cell, grid)?;
    let giou = ctx.tape.giou_loss(pred, gt.to_array())?;
    let target = Tensor::from_fn(&[1, 4], |i| gt.to_array()[i]);
    let l1 = ctx.tape.l1_loss(pred, &target)?;

    let wi = ctx.tape.scale(giou, T::of(weights.iou))?;
    let wl = ctx.tape.scale(l1, T::of(weights.l1))?;
    let total = ctx.tape.add_n(&[cls, wi, wl])?;
    Ok(LossTerms { total, cls, giou, l1 })
}
