//! Multi-state generation: patch embedding, pre-norm attention blocks and
//! the taps on the last layers.

use rand::Rng;

use crate::config::TrackerConfig;
use crate::counter::Component;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::{LayerNorm, Linear};
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Token layout shared by every state: template grid first, then search grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub template: Grid,
    pub search: Grid,
}

impl Geometry {
    pub fn of(cfg: &TrackerConfig) -> Self {
        Self {
            template: cfg.template_grid(),
            search: cfg.search_grid(),
        }
    }

    pub fn template_len(&self) -> usize {
        self.template.len()
    }

    pub fn search_len(&self) -> usize {
        self.search.len()
    }

    pub fn len(&self) -> usize {
        self.template.len() + self.search.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grids(&self) -> [Grid; 2] {
        [self.template, self.search]
    }
}

/// One `[L, D]` token map on the tape together with its layout.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub geometry: Geometry,
}

/// The tapped states `S^(L-2), S^(L-1), S^(L)`; all share one geometry.
#[derive(Clone, Debug)]
pub struct StateBundle {
    pub states: Vec<Var>,
    pub geometry: Geometry,
}

impl StateBundle {
    pub fn sequence(&self, i: usize) -> TokenSequence {
        TokenSequence {
            tokens: self.states[i],
            geometry: self.geometry,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TrackerConfig) -> Self {
        let c = Component::Backbone;
        let p = cfg.patch_size;
        let d = cfg.embed_dim;
        Self {
            proj: Linear::new(store, rng, "embed.proj", c, p * p * 3, d, true),
            pos_template: store.add("embed.pos_template", c, init::normal(rng, &[cfg.template_grid().len(), d], 0.02)),
            pos_search: store.add("embed.pos_search", c, init::normal(rng, &[cfg.search_grid().len(), d], 0.02)),
            patch: p,
            template_size: cfg.template_size,
            search_size: cfg.search_size,
        }
    }

    /// Image `[H, W, 3]` to tokens `[H/p · W/p, D]` in raster order.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: &Tensor<T>, role: Role) -> Result<Var> {
        let (size, pos) = match role {
            Role::Template => (self.template_size, self.pos_template),
            Role::Search => (self.search_size, self.pos_search),
        };
        if image.shape() != [size, size, 3] {
            return Err(Error::Config(format!(
                "{role:?} image must be [{size}, {size}, 3], got {:?}",
                image.shape()
            )));
        }
        let patches = ctx.constant(patchify(image, self.patch))?;
        let x = self.proj.forward(ctx, patches)?;
        let pos = ctx.p(pos)?;
        ctx.tape.add(x, pos)
    }
}

/// Rows are patches in raster order; columns are `(py, px, channel)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (gh, gw) = (h / p, w / p);
    let cols = p * p * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * cols);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let start = ((gy * p + py) * w + gx * p) * 3;
                out.extend_from_slice(&src[start..start + p * 3]);
            }
        }
    }
    Tensor::from_parts(vec![gh * gw, cols], out)
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        let c = Component::Backbone;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c, dim),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), c, dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), c, dim, dim, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c, dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), c, hidden, dim, true),
            heads,
        }
    }

    /// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let d = ctx.tape.shape(x)[1];
        let dk = d / self.heads;
        let scale = T::one() / T::of(dk as f64).sqrt();

        let h = self.ln1.forward(ctx, x)?;
        let qkv = self.qkv.forward(ctx, h)?;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = ctx.tape.narrow(qkv, 1, head * dk, dk)?;
            let k = ctx.tape.narrow(qkv, 1, d + head * dk, dk)?;
            let v = ctx.tape.narrow(qkv, 1, 2 * d + head * dk, dk)?;
            let scores = ctx.tape.matmul_bt(q, k)?;
            let scores = ctx.tape.scale(scores, scale)?;
            let attn = ctx.tape.softmax(scores, 1)?;
            outs.push(ctx.tape.matmul(attn, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat(&outs, 1)? };
        let a = self.proj.forward(ctx, cat)?;
        let x = ctx.tape.add(x, a)?;

        let h = self.ln2.forward(ctx, x)?;
        let h = self.fc1.forward(ctx, h)?;
        let h = ctx.tape.gelu(h)?;
        let h = self.fc2.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub embed: PatchEmbed,
    pub blocks: Vec<AttentionBlock>,
    pub num_taps: usize,
    pub geometry: Geometry,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: &TrackerConfig) -> Self {
        let embed = PatchEmbed::new(store, rng, cfg);
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                AttentionBlock::new(
                    store,
                    rng,
                    &format!("blocks.{i}"),
                    cfg.embed_dim,
                    cfg.num_heads,
                    cfg.mlp_hidden(),
                )
            })
            .collect();
        Self {
            embed,
            blocks,
            num_taps: cfg.num_taps,
            geometry: Geometry::of(cfg),
        }
    }

    /// Embeds both crops, concatenates template then search tokens and
    /// returns the outputs of the last `num_taps` blocks.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, template: &Tensor<T>, search: &Tensor<T>) -> Result<StateBundle> {
        let prev = ctx.tape.set_component(Component::Backbone);
        let z = self.embed.forward(ctx, template, Role::Template)?;
        let s = self.embed.forward(ctx, search, Role::Search)?;
        let mut x = ctx.tape.concat(&[z, s], 0)?;
        let first_tap = self.blocks.len() - self.num_taps;
        let mut states = Vec::with_capacity(self.num_taps);
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, x)?;
            if i >= first_tap {
                states.push(x);
            }
        }
        ctx.tape.set_component(prev);
        Ok(StateBundle {
            states,
            geometry: self.geometry,
        })
    }
}
