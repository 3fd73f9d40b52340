//! Small parameterised building blocks shared by the model modules.

use rand::Rng;

use crate::counter::{Component, MacKind};
use crate::error::Result;
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

pub(crate) const LN_EPS: f64 = 1e-10;

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        component: Component,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), component, init::fan_in(rng, &[dout, din], din));
        let b = bias.then(|| store.add(format!("{name}.b"), component, init::zeros(&[dout])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_kind(ctx, x, MacKind::Layer)
    }

    pub fn forward_kind<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, kind: MacKind) -> Result<Var> {
        let w = ctx.p(self.w)?;
        let b = self.b.map(|b| ctx.p(b)).transpose()?;
        ctx.tape.linear_kind(x, w, b, kind)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, component: Component, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), component, init::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), component, init::zeros(&[dim])),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma)?;
        let b = ctx.p(self.beta)?;
        ctx.tape.layer_norm(x, g, b, T::of(LN_EPS))
    }
}
