//! State-specific enhancement (one block per state) and cross-state
//! interaction (one block over the token-axis concatenation, then split and
//! summed).

use rand::Rng;

use crate::backbone::StateBundle;
use crate::config::TrackerConfig;
use crate::counter::Component;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::params::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::ssd::{HsaSsd, SsdDims};
use crate::tape::Var;

pub fn ssd_dims(cfg: &TrackerConfig) -> SsdDims {
    SsdDims {
        dim: cfg.embed_dim,
        states: cfg.ssd_state_count,
        kernels: cfg.aconv_kernel_count,
        routing_reduction: cfg.routing_reduction,
    }
}

#[derive(Clone, Debug)]
pub struct Sse {
    pub blocks: Vec<HsaSsd>,
}

impl Sse {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TrackerConfig) -> Self {
        let blocks = (0..cfg.num_taps)
            .map(|i| HsaSsd::new(store, rng, &format!("sse.{i}"), Component::Sse, ssd_dims(cfg)))
            .collect();
        Self { blocks }
    }

    /// Each state through its own block.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, bundle: &StateBundle) -> Result<StateBundle> {
        if bundle.states.len() != self.blocks.len() {
            return Err(Error::Input(format!(
                "sse expects {} states, got {}",
                self.blocks.len(),
                bundle.states.len()
            )));
        }
        let prev = ctx.tape.set_component(Component::Sse);
        let grids = bundle.geometry.grids();
        let states = self
            .blocks
            .iter()
            .zip(&bundle.states)
            .map(|(b, &s)| b.forward(ctx, s, &grids))
            .collect::<Result<Vec<_>>>();
        ctx.tape.set_component(prev);
        Ok(StateBundle {
            states: states?,
            geometry: bundle.geometry,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Csi {
    pub block: HsaSsd,
}

impl Csi {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TrackerConfig) -> Self {
        Self {
            block: HsaSsd::new(store, rng, "csi", Component::Csi, ssd_dims(cfg)),
        }
    }

    /// Concatenate along tokens, one joint block, split back and sum.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, bundle: &StateBundle) -> Result<Var> {
        if bundle.states.is_empty() {
            return Err(Error::Input("csi needs at least one state".into()));
        }
        let prev = ctx.tape.set_component(Component::Csi);
        let y = self.joint(ctx, bundle);
        ctx.tape.set_component(prev);
        y
    }

    fn joint<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, bundle: &StateBundle) -> Result<Var> {
        let l = bundle.geometry.len();
        let k = bundle.states.len();
        let grids: Vec<Grid> = (0..k).flat_map(|_| bundle.geometry.grids()).collect();
        let cat = ctx.tape.concat(&bundle.states, 0)?;
        let joint = self.block.forward(ctx, cat, &grids)?;
        let parts = ctx.tape.split(joint, 0, &vec![l; k])?;
        ctx.tape.add_n(&parts)
    }
}
