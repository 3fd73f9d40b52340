//! Hidden-state-adaptation SSD: adaptive 1×1 and depthwise 3×3 projections
//! produce `B`, `C`, `Δ`; tokens are reduced into `N_s` hidden states,
//! gated and mixed there, then expanded back.
//!
//! [`ssd_core`] costs `O(L·N_s·D + N_s·D²)`. [`ssd_oracle`] evaluates the
//! same function through explicit per-state `L×L` token-mixing matrices.

use rand::Rng;

use crate::counter::{Component, MacKind};
use crate::error::{shape_err, Result};
use crate::grid::{neighbour_table, Grid};
use crate::nn::{LayerNorm, Linear};
use crate::params::{init, Ctx, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

pub const DISCRETIZE_EPS: f64 = 1e-8;

/// Pooled descriptor → hidden → `K` logits → softmax.
#[derive(Clone, Debug)]
pub struct KernelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl KernelAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        component: Component,
        channels: usize,
        hidden: usize,
        k: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), component, channels, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), component, hidden, k, true),
        }
    }

    /// Kernel weights `π: [1, K]` from the token mean of `x: [L, C]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let pooled = ctx.tape.mean_axis(x, 0)?;
        let h = self.fc1.forward_kind(ctx, pooled, MacKind::Routing)?;
        let h = ctx.tape.relu(h)?;
        let logits = self.fc2.forward_kind(ctx, h, MacKind::Routing)?;
        ctx.tape.softmax(logits, 1)
    }
}

/// Pointwise convolution whose kernel and bias are `π`-weighted mixtures of
/// `K` candidates. Kernels are stored as rows `[K, D_out·D_in]`.
#[derive(Clone, Debug)]
pub struct AConv1x1 {
    pub kernels: ParamId,
    pub biases: ParamId,
    pub attn: KernelAttention,
    pub din: usize,
    pub dout: usize,
}

impl AConv1x1 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        component: Component,
        din: usize,
        dout: usize,
        k: usize,
        hidden: usize,
    ) -> Self {
        Self {
            kernels: store.add(format!("{name}.kernels"), component, init::fan_in(rng, &[k, dout * din], din)),
            biases: store.add(format!("{name}.biases"), component, init::zeros(&[k, dout])),
            attn: KernelAttention::new(store, rng, &format!("{name}.attn"), component, din, hidden, k),
            din,
            dout,
        }
    }

    /// Mixed kernel `[D_out, D_in]` and bias `[1, D_out]` for input `x`.
    pub fn mixture<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let pi = self.attn.forward(ctx, x)?;
        let kernels = ctx.p(self.kernels)?;
        let biases = ctx.p(self.biases)?;
        let w = ctx.tape.matmul_kind(pi, kernels, MacKind::Mixing)?;
        let w = ctx.tape.reshape(w, &[self.dout, self.din])?;
        let b = ctx.tape.matmul_kind(pi, biases, MacKind::Mixing)?;
        Ok((w, b))
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = self.mixture(ctx, x)?;
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Depthwise 3×3 convolution with `π`-mixed kernels and a residual add.
/// Kernels are stored as rows `[K, C·9]`, tap order `ky*3+kx`.
#[derive(Clone, Debug)]
pub struct ADwConv3x3 {
    pub kernels: ParamId,
    pub attn: KernelAttention,
    pub channels: usize,
}

impl ADwConv3x3 {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        component: Component,
        channels: usize,
        k: usize,
        hidden: usize,
    ) -> Self {
        Self {
            kernels: store.add(format!("{name}.kernels"), component, init::fan_in(rng, &[k, channels * 9], 9)),
            attn: KernelAttention::new(store, rng, &format!("{name}.attn"), component, channels, hidden, k),
            channels,
        }
    }

    /// `x + dwconv(x)` applied per grid; rows of `x` follow `grids` back to back.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, grids: &[Grid]) -> Result<Var> {
        let pi = self.attn.forward(ctx, x)?;
        let kernels = ctx.p(self.kernels)?;
        let k = ctx.tape.matmul_kind(pi, kernels, MacKind::Mixing)?;
        let k = ctx.tape.reshape(k, &[self.channels, 9])?;
        let y = ctx.tape.dwconv3x3(x, k, grids)?;
        ctx.tape.add(x, y)
    }
}

/// `Ā = softplus(Δ)` normalised so every column sums to one.
pub fn discretize<T: Scalar>(ctx: &mut Ctx<'_, T>, delta: Var) -> Result<Var> {
    let sp = ctx.tape.softplus(delta)?;
    ctx.tape.col_normalize(sp, T::of(DISCRETIZE_EPS))
}

/// The SSD projections for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

/// Reduce, gate, mix, expand:
/// `h_in = (Ā⊙B)ᵀS`, `G = SiLU(h_in W_gᵀ + b_g)`, `h_out = AConv(G⊙h_in)`,
/// `Y = C·h_out`. `gate = None` fixes `G = 1`.
pub fn ssd_core<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    s: Var,
    proj: Projection,
    gate: Option<&Linear>,
    mix: &AConv1x1,
) -> Result<Var> {
    let (l, n) = (ctx.tape.shape(proj.b)[0], ctx.tape.shape(proj.b)[1]);
    for v in [proj.c, proj.delta] {
        if ctx.tape.shape(v) != [l, n] {
            return shape_err("ssd_core", ctx.tape.shape(proj.b), ctx.tape.shape(v));
        }
    }
    if ctx.tape.shape(s)[0] != l {
        return shape_err("ssd_core", ctx.tape.shape(s), &[l, n]);
    }
    let a = discretize(ctx, proj.delta)?;
    let ab = ctx.tape.mul(a, proj.b)?;
    let h_in = ctx.tape.matmul_at(ab, s)?;
    let gated = match gate {
        Some(g) => {
            let z = g.forward(ctx, h_in)?;
            let z = ctx.tape.silu(z)?;
            ctx.tape.mul(z, h_in)?
        }
        None => h_in,
    };
    let h_out = mix.forward(ctx, gated)?;
    ctx.tape.matmul(proj.c, h_out)
}

/// Plain tensors of the weights [`ssd_oracle`] needs.
#[derive(Clone, Debug)]
pub struct MixValues<T> {
    pub kernels: Tensor<T>,
    pub biases: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> MixValues<T> {
    pub fn of(store: &ParamStore<T>, mix: &AConv1x1) -> Self {
        let b = |id: Option<ParamId>| store.get(id.expect("routing layers carry biases")).clone();
        Self {
            kernels: store.get(mix.kernels).clone(),
            biases: store.get(mix.biases).clone(),
            fc1_w: store.get(mix.attn.fc1.w).clone(),
            fc1_b: b(mix.attn.fc1.b),
            fc2_w: store.get(mix.attn.fc2.w).clone(),
            fc2_b: b(mix.attn.fc2.b),
        }
    }
}

/// Gate weights `(W_g, b_g)` as plain tensors.
pub type GateValues<T> = (Tensor<T>, Tensor<T>);

pub fn gate_values<T: Scalar>(store: &ParamStore<T>, gate: &Linear) -> GateValues<T> {
    let b = gate.b.map_or_else(|| Tensor::zeros(&[store.get(gate.w).shape()[0]]), |b| store.get(b).clone());
    (store.get(gate.w).clone(), b)
}

/// Reference for [`ssd_core`] by direct summation.
///
/// The hidden states are still formed explicitly because the gate and the
/// kernel attention are nonlinear in them. The output is expanded as
/// `Y = Σ_n M_n·Z_n + rowsum(C)·b̃` with `M_n[t,t'] = C[t,n]·Ā[t',n]·B[t',n]`
/// materialised as an `L×L` matrix and `Z_n[t'] = (g_n ⊙ S[t'])·W̃ᵀ`.
pub fn ssd_oracle<T: Scalar>(
    s: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    delta: &Tensor<T>,
    gate: Option<&GateValues<T>>,
    mix: &MixValues<T>,
) -> Result<Tensor<T>> {
    let (l, d) = s.dims2()?;
    let (lb, n) = b.dims2()?;
    if lb != l || c.shape() != b.shape() || delta.shape() != b.shape() {
        return shape_err("ssd_oracle", s.shape(), b.shape());
    }
    let sv = |t: usize, j: usize| s.data()[t * d + j];

    // Ā by columns
    let mut abar = vec![T::zero(); l * n];
    for k in 0..n {
        let mut total = T::zero();
        for t in 0..l {
            total += delta.data()[t * n + k].softplus();
        }
        for t in 0..l {
            abar[t * n + k] = delta.data()[t * n + k].softplus() / (T::of(DISCRETIZE_EPS) + total);
        }
    }
    let a = |t: usize, k: usize| abar[t * n + k] * b.data()[t * n + k];

    let mut h_in = vec![T::zero(); n * d];
    for k in 0..n {
        for t in 0..l {
            let w = a(t, k);
            for j in 0..d {
                h_in[k * d + j] += w * sv(t, j);
            }
        }
    }

    let mut g = vec![T::one(); n * d];
    if let Some((wg, bg)) = gate {
        for k in 0..n {
            for o in 0..d {
                let mut z = bg.data()[o];
                for j in 0..d {
                    z += h_in[k * d + j] * wg.data()[o * d + j];
                }
                g[k * d + o] = z * z.sigmoid();
            }
        }
    }

    // kernel attention on the mean gated hidden state
    let mut pooled = vec![T::zero(); d];
    for k in 0..n {
        for j in 0..d {
            pooled[j] += g[k * d + j] * h_in[k * d + j];
        }
    }
    pooled.iter_mut().for_each(|p| *p /= T::of(n as f64));
    let hidden = mix.fc1_w.shape()[0];
    let kk = mix.fc2_w.shape()[0];
    let mut hid = vec![T::zero(); hidden];
    for (u, h) in hid.iter_mut().enumerate() {
        let mut z = mix.fc1_b.data()[u];
        for j in 0..d {
            z += mix.fc1_w.data()[u * d + j] * pooled[j];
        }
        *h = z.max(T::zero());
    }
    let mut logits = vec![T::zero(); kk];
    for (q, lg) in logits.iter_mut().enumerate() {
        let mut z = mix.fc2_b.data()[q];
        for u in 0..hidden {
            z += mix.fc2_w.data()[q * hidden + u] * hid[u];
        }
        *lg = z;
    }
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let ex: Vec<T> = logits.iter().map(|&z| (z - mx).exp()).collect();
    let den: T = ex.iter().copied().sum();
    let pi: Vec<T> = ex.iter().map(|&e| e / den).collect();

    let dout = mix.biases.shape()[1];
    let mut wmix = vec![T::zero(); dout * d];
    let mut bmix = vec![T::zero(); dout];
    for q in 0..kk {
        for i in 0..dout * d {
            wmix[i] += pi[q] * mix.kernels.data()[q * dout * d + i];
        }
        for o in 0..dout {
            bmix[o] += pi[q] * mix.biases.data()[q * dout + o];
        }
    }

    let mut y = vec![T::zero(); l * dout];
    let mut m = vec![T::zero(); l * l];
    let mut z = vec![T::zero(); l * dout];
    for k in 0..n {
        for t in 0..l {
            for t2 in 0..l {
                m[t * l + t2] = c.data()[t * n + k] * a(t2, k);
            }
        }
        for t2 in 0..l {
            for o in 0..dout {
                let mut acc = T::zero();
                for j in 0..d {
                    acc += g[k * d + j] * sv(t2, j) * wmix[o * d + j];
                }
                z[t2 * dout + o] = acc;
            }
        }
        for t in 0..l {
            for t2 in 0..l {
                let mv = m[t * l + t2];
                for o in 0..dout {
                    y[t * dout + o] += mv * z[t2 * dout + o];
                }
            }
        }
    }
    for t in 0..l {
        let csum: T = (0..n).map(|k| c.data()[t * n + k]).sum();
        for o in 0..dout {
            y[t * dout + o] += csum * bmix[o];
        }
    }
    Tensor::new(&[l, dout], y)
}

/// Direct sliding-window depthwise 3×3 with zero padding per grid, plus the
/// residual. Reference for [`ADwConv3x3`] given its mixed kernel `[C, 9]`.
pub fn dwconv_reference<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, grids: &[Grid]) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    neighbour_table(grids, r)?;
    let mut out = x.data().to_vec();
    let mut base = 0;
    for g in grids {
        for y in 0..g.h as isize {
            for xx in 0..g.w as isize {
                let row = base + (y as usize) * g.w + xx as usize;
                for ky in -1..=1isize {
                    for kx in -1..=1isize {
                        let (sy, sx) = (y + ky, xx + kx);
                        if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                            continue;
                        }
                        let src = base + sy as usize * g.w + sx as usize;
                        let tap = ((ky + 1) * 3 + kx + 1) as usize;
                        for ch in 0..c {
                            out[row * c + ch] += kernel.data()[ch * 9 + tap] * x.data()[src * c + ch];
                        }
                    }
                }
            }
        }
        base += g.len();
    }
    Tensor::new(&[r, c], out)
}

/// One full block: `S + SSD(LN(S))` with adaptive projections.
#[derive(Clone, Debug)]
pub struct HsaSsd {
    pub ln: LayerNorm,
    pub proj: AConv1x1,
    pub dw: ADwConv3x3,
    pub gate: Linear,
    pub mix: AConv1x1,
    pub states: usize,
}

/// Sizes of one [`HsaSsd`] block.
#[derive(Clone, Copy, Debug)]
pub struct SsdDims {
    pub dim: usize,
    pub states: usize,
    pub kernels: usize,
    pub routing_reduction: usize,
}

impl SsdDims {
    fn hidden(&self, channels: usize) -> usize {
        (channels / self.routing_reduction.max(1)).max(4)
    }
}

impl HsaSsd {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        component: Component,
        dims: SsdDims,
    ) -> Self {
        let SsdDims { dim, states, kernels, .. } = dims;
        Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), component, dim),
            proj: AConv1x1::new(store, rng, &format!("{name}.proj"), component, dim, 3 * states, kernels, dims.hidden(dim)),
            dw: ADwConv3x3::new(store, rng, &format!("{name}.dw"), component, 2 * states, kernels, dims.hidden(2 * states)),
            gate: Linear::new(store, rng, &format!("{name}.gate"), component, dim, dim, true),
            mix: AConv1x1::new(store, rng, &format!("{name}.mix"), component, dim, dim, kernels, dims.hidden(dim)),
            states,
        }
    }

    /// `B, C, Δ` for the normalised tokens `x`, with `B` and `C` refined by
    /// the adaptive depthwise convolution.
    pub fn project<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, grids: &[Grid]) -> Result<Projection> {
        let n = self.states;
        let p = self.proj.forward(ctx, x)?;
        let bc = ctx.tape.narrow(p, 1, 0, 2 * n)?;
        let delta = ctx.tape.narrow(p, 1, 2 * n, n)?;
        let bc = self.dw.forward(ctx, bc, grids)?;
        let b = ctx.tape.narrow(bc, 1, 0, n)?;
        let c = ctx.tape.narrow(bc, 1, n, n)?;
        Ok(Projection { b, c, delta })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, s: Var, grids: &[Grid]) -> Result<Var> {
        let x = self.ln.forward(ctx, s)?;
        let proj = self.project(ctx, x, grids)?;
        let y = ssd_core(ctx, x, proj, Some(&self.gate), &self.mix)?;
        ctx.tape.add(s, y)
    }
}

/// Closed-form MACs of one block over the weight-bearing layers and the
/// hidden-state contractions (kernel attention and mixing excluded).
pub fn block_macs(l: usize, d: usize, n: usize) -> u64 {
    let (l, d, n) = (l as u64, d as u64, n as u64);
    l * d * 3 * n + 9 * 2 * l * n + l * n * d + n * d * d + n * d * d + l * n * d
}
