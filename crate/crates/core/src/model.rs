//! The assembled tracker: backbone taps → SSE → CSI → centre head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, StateBundle};
use crate::boxes::BoxXYWH;
use crate::config::TrackerConfig;
use crate::error::{Error, Result};
use crate::fusion::{Csi, Sse};
use crate::head::{total_loss, Head, HeadMaps, HeadOutput, LossTerms, LossWeights, TargetGeometry};
use crate::params::{Ctx, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Modules {
    pub backbone: Backbone,
    pub sse: Sse,
    pub csi: Csi,
    pub head: Head,
}

/// Configuration, parameters and module wiring. A zero-layer configuration
/// has no modules and no parameters.
#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub cfg: TrackerConfig,
    pub store: ParamStore<T>,
    pub modules: Option<Modules>,
}

/// One training example: crops plus the ground truth normalised to the
/// search crop.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub template: Tensor<T>,
    pub search: Tensor<T>,
    pub gt: BoxXYWH<T>,
}

/// Intermediate results of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub taps: Vec<StateBundle>,
    pub fused: Vec<Var>,
    pub head: HeadOutput,
}

/// Batch-mean loss and its components.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(cfg: TrackerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let modules = if cfg.is_empty_model() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Some(Modules {
                backbone: Backbone::new(&mut store, &mut rng, &cfg),
                sse: Sse::new(&mut store, &mut rng, &cfg),
                csi: Csi::new(&mut store, &mut rng, &cfg),
                head: Head::new(&mut store, &mut rng, &cfg),
            })
        };
        Ok(Self { cfg, store, modules })
    }

    pub fn modules(&self) -> Result<&Modules> {
        self.modules
            .as_ref()
            .ok_or_else(|| Error::Config("zero-layer model has nothing to run".into()))
    }

    /// Fused representation `Y: [L, D]` of one crop pair, with the taps.
    pub fn fuse(&self, ctx: &mut Ctx<'_, T>, template: &Tensor<T>, search: &Tensor<T>) -> Result<(StateBundle, Var)> {
        let m = self.modules()?;
        let taps = m.backbone.forward(ctx, template, search)?;
        let enhanced = m.sse.forward(ctx, &taps)?;
        let y = m.csi.forward(ctx, &enhanced)?;
        Ok((taps, y))
    }

    /// Runs every pair and the head on the stacked search tokens.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, pairs: &[(&Tensor<T>, &Tensor<T>)]) -> Result<Forward> {
        let m = self.modules()?;
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let geo = m.backbone.geometry;
        let mut taps = Vec::with_capacity(pairs.len());
        let mut fused = Vec::with_capacity(pairs.len());
        let mut search_rows = Vec::with_capacity(pairs.len());
        for &(z, x) in pairs {
            let (t, y) = self.fuse(ctx, z, x)?;
            search_rows.push(ctx.tape.narrow(y, 0, geo.template_len(), geo.search_len())?);
            taps.push(t);
            fused.push(y);
        }
        let stacked = if search_rows.len() == 1 {
            search_rows[0]
        } else {
            ctx.tape.concat(&search_rows, 0)?
        };
        let head = m.head.forward(ctx, stacked, pairs.len())?;
        Ok(Forward { taps, fused, head })
    }

    pub fn target_geometry(&self) -> TargetGeometry {
        TargetGeometry {
            grid: self.cfg.search_grid(),
            patch: self.cfg.patch_size,
            search_size: self.cfg.search_size,
        }
    }

    /// Mean of the per-sample losses over the batch.
    pub fn loss(&self, ctx: &mut Ctx<'_, T>, samples: &[Sample<T>], weights: LossWeights) -> Result<BatchLoss> {
        let pairs: Vec<_> = samples.iter().map(|s| (&s.template, &s.search)).collect();
        let fwd = self.forward(ctx, &pairs)?;
        let geo = self.target_geometry();
        let n = geo.grid.len();
        let mut totals = Vec::with_capacity(samples.len());
        let (mut cls, mut giou, mut l1) = (0.0, 0.0, 0.0);
        for (i, s) in samples.iter().enumerate() {
            let score = ctx.tape.narrow(fwd.head.score, 0, i * n, n)?;
            let size = ctx.tape.narrow(fwd.head.size, 0, i * n, n)?;
            let offset = ctx.tape.narrow(fwd.head.offset, 0, i * n, n)?;
            let LossTerms { total, cls: c, giou: g, l1: l } =
                total_loss(ctx, score, size, offset, &s.gt, geo, weights)?;
            cls += ctx.value(c).item().to_f64_lossy();
            giou += ctx.value(g).item().to_f64_lossy();
            l1 += ctx.value(l).item().to_f64_lossy();
            totals.push(total);
        }
        let sum = ctx.tape.add_n(&totals)?;
        let k = samples.len() as f64;
        let total = ctx.tape.scale(sum, T::of(1.0 / k))?;
        Ok(BatchLoss {
            total,
            cls: cls / k,
            giou: giou / k,
            l1: l1 / k,
        })
    }

    /// Eval-mode head maps for one crop pair.
    pub fn predict(&self, template: &Tensor<T>, search: &Tensor<T>) -> Result<HeadMaps<T>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval);
        let fwd = self.forward(&mut ctx, &[(template, search)])?;
        HeadMaps::from_rows(
            ctx.value(fwd.head.score),
            ctx.value(fwd.head.size),
            ctx.value(fwd.head.offset),
            self.cfg.search_grid(),
            0,
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tracker<U> {
        Tracker {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            modules: self.modules.clone(),
        }
    }
}
