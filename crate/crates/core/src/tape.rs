//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every op of one forward pass; nodes are appended in
//! execution order so parents always precede children. [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! A tape is single-threaded; use one tape per worker.

use crate::counter::{Component, MacKind, OpCounter};
use crate::error::{shape_err, Error, Result};
use crate::grid::{neighbour_table, Grid, NO_NEIGHBOUR};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Silu,
    Gelu,
    Relu,
    Softplus,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => x.sigmoid(),
            Unary::Silu => x * x.sigmoid(),
            Unary::Gelu => x.gelu(),
            Unary::Relu => x.max(T::zero()),
            Unary::Softplus => x.softplus(),
        }
    }

    fn grad<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Silu => {
                let s = x.sigmoid();
                s + x * s * (T::one() - s)
            }
            Unary::Gelu => x.gelu_grad(),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Softplus => x.sigmoid(),
        }
    }
}

/// Row-normalisation statistics kept for the normalisation backward passes.
#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulBt { a: Var, b: Var },
    MatMulAt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    MulRow { x: Var, s: Var },
    Scale { x: Var, s: T },
    Unary { x: Var, f: Unary },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: NormCache<T> },
    Softmax { x: Var, axis: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Sum { x: Var },
    MeanAxis { x: Var, axis: usize },
    ColNormalize { x: Var, eps: T },
    Conv3x3 { x: Var, w: Var, nbr: Vec<[u32; 9]>, cols: Tensor<T> },
    DwConv3x3 { x: Var, k: Var, nbr: Vec<[u32; 9]> },
    GatherRows { x: Var, rows: Vec<usize> },
    FocalLoss { p: Var, gt: Tensor<T>, alpha: T, beta: T, positives: usize },
    GiouLoss { pred: Var, gt: [T; 4] },
    L1Loss { pred: Var, gt: Tensor<T> },
    BoxFromCell { off: Var, size: Var, grid: Grid },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; zeros when `v` does not influence it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    counter: Option<OpCounter>,
    component: Component,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const CLAMP_LOG: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: None,
            component: Component::Other,
        }
    }

    /// A tape that tallies multiply-accumulates per component.
    pub fn counting() -> Self {
        Self {
            counter: Some(OpCounter::new()),
            ..Self::new()
        }
    }

    pub fn set_component(&mut self, c: Component) -> Component {
        std::mem::replace(&mut self.component, c)
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn counter(&self) -> Option<&OpCounter> {
        self.counter.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn count(&mut self, kind: MacKind, macs: usize) {
        let component = self.component;
        if let Some(c) = self.counter.as_mut() {
            c.record(component, kind, macs as u64);
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.leaf(value)?;
        self.nodes[v.0].requires_grad = false;
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, MacKind::Interaction)
    }

    pub fn matmul_kind(&mut self, a: Var, b: Var, kind: MacKind) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let [m, k] = dims(self.value(a));
        let n = out.shape()[1];
        self.count(kind, m * k * n);
        self.push("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_bt_kind(a, b, MacKind::Interaction)
    }

    pub fn matmul_bt_kind(&mut self, a: Var, b: Var, kind: MacKind) -> Result<Var> {
        let out = self.value(a).matmul_bt(self.value(b))?;
        let [m, k] = dims(self.value(a));
        let n = out.shape()[1];
        self.count(kind, m * k * n);
        self.push("matmul_bt", out, Op::MatMulBt { a, b }, &[a, b])
    }

    /// `aᵀ · b`
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_at(self.value(b))?;
        let [k, m] = dims(self.value(a));
        let n = out.shape()[1];
        self.count(MacKind::Interaction, m * k * n);
        self.push("matmul_at", out, Op::MatMulAt { a, b }, &[a, b])
    }

    /// `x · wᵀ + b` with `w: [out, in]`, counted as a weight-bearing layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.linear_kind(x, w, b, MacKind::Layer)
    }

    pub fn linear_kind(&mut self, x: Var, w: Var, b: Option<Var>, kind: MacKind) -> Result<Var> {
        let y = self.matmul_bt_kind(x, w, kind)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push("add", out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push("sub", out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b])
    }

    /// Sums several same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Input("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// `x[R,C] + bias[C]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let [r, c] = dims(xv);
        if bv.len() != c {
            return shape_err("add_row", xv.shape(), bv.shape());
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![r, c], out), Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).scale(s);
        self.push("scale", out, Op::Scale { x, s }, &[x])
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let out = self.value(x).map(|v| f.apply(v));
        self.push(f.name(), out, Op::Unary { x, f }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    // ---- normalisation --------------------------------------------------

    /// Per-row layer norm with affine `gamma`, `beta` of shape `[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let [r, c] = dims(xv);
        check_vec("layer_norm", self.value(gamma), c)?;
        check_vec("layer_norm", self.value(beta), c)?;
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let n = T::of(c as f64);
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * rs;
            }
        }
        let xhat = Tensor::from_parts(vec![r, c], xhat);
        let out = affine_cols(&xhat, self.value(gamma).data(), self.value(beta).data());
        let cache = NormCache { xhat, rstd };
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta])
    }

    /// Batch norm over rows using the statistics of this batch. Returns the
    /// output plus the batch mean and (biased) variance per column.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        let [r, c] = dims(xv);
        check_vec("batch_norm", self.value(gamma), c)?;
        check_vec("batch_norm", self.value(beta), c)?;
        let n = T::of(r as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += xv.data()[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for i in 0..r {
            for j in 0..c {
                let d = xv.data()[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(&[r, c], |idx| (xv.data()[idx] - mean[idx % c]) * rstd[idx % c]);
        let out = affine_cols(&xhat, self.value(gamma).data(), self.value(beta).data());
        let cache = NormCache { xhat, rstd };
        let v = self.push("batch_norm", out, Op::BatchNorm { x, gamma, beta, cache }, &[x, gamma, beta])?;
        Ok((v, mean, var))
    }

    /// Batch norm with frozen statistics; only the affine part is learned.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let [r, c] = dims(self.value(x));
        if mean.len() != c || var.len() != c {
            return shape_err("batch_norm_eval", &[r, c], &[mean.len()]);
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut shift = Vec::with_capacity(c);
        for j in 0..c {
            shift.push(-mean[j] * rstd[j]);
        }
        let scale = Tensor::from_parts(vec![c], rstd);
        let scale = self.constant(scale)?;
        let shift = Tensor::from_parts(vec![c], shift);
        let shift = self.constant(shift)?;
        // gamma * (x * rstd + shift) + beta
        let xs = self.mul_row(x, scale)?;
        let xn = self.add_row(xs, shift)?;
        let g = self.mul_row(xn, gamma)?;
        self.add_row(g, beta)
    }

    /// `x[R,C] ⊙ s[C]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let [r, c] = dims(self.value(x));
        check_vec("mul_row", self.value(s), c)?;
        let sv = self.value(s).data();
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&[r, c], |idx| xv[idx] * sv[idx % c]);
        self.push("mul_row", out, Op::MulRow { x, s }, &[x, s])
    }

    // ---- shape ops ------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn split(&mut self, x: Var, axis: usize, extents: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(x).get(axis).copied().unwrap_or(0);
        if extents.iter().sum::<usize>() != total {
            return shape_err("split", self.shape(x), extents);
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(extents.len());
        for &e in extents {
            out.push(self.narrow(x, axis, start, e)?);
            start += e;
        }
        Ok(out)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let [r, c] = dims(xv);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return shape_err("gather_rows", xv.shape(), rows);
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        self.push(
            "gather_rows",
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum { x }, &[x])
    }

    /// Mean over `axis`, which is kept with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).mean_axis(axis)?;
        self.push("mean_axis", out, Op::MeanAxis { x, axis }, &[x])
    }

    /// `y[t,n] = x[t,n] / (eps + Σ_t' x[t',n])`
    pub fn col_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let [r, c] = dims(xv);
        let sums = xv.sum_axis(0)?;
        let out = Tensor::from_fn(&[r, c], |idx| xv.data()[idx] / (eps + sums.data()[idx % c]));
        self.push("col_normalize", out, Op::ColNormalize { x, eps }, &[x])
    }

    // ---- grid convolutions ----------------------------------------------

    /// Dense 3×3 convolution, zero padding, on channel-last token maps laid
    /// out as consecutive grids. `w: [Cout, 9·Cin]` indexed `tap·Cin + c`.
    pub fn conv3x3(&mut self, x: Var, w: Var, grids: &[Grid]) -> Result<Var> {
        let [r, cin] = dims(self.value(x));
        let [cout, wk] = dims(self.value(w));
        if wk != 9 * cin {
            return shape_err("conv3x3", self.shape(x), self.shape(w));
        }
        let nbr = neighbour_table(grids, r)?;
        let xv = self.value(x).data();
        let mut cols = vec![T::zero(); r * 9 * cin];
        for (row, nb) in nbr.iter().enumerate() {
            for (tap, &n) in nb.iter().enumerate() {
                if n != NO_NEIGHBOUR {
                    let src = &xv[n as usize * cin..(n as usize + 1) * cin];
                    cols[row * 9 * cin + tap * cin..row * 9 * cin + (tap + 1) * cin].copy_from_slice(src);
                }
            }
        }
        let cols = Tensor::from_parts(vec![r, 9 * cin], cols);
        let out = cols.matmul_bt(self.value(w))?;
        self.count(MacKind::Layer, r * cout * 9 * cin);
        self.push("conv3x3", out, Op::Conv3x3 { x, w, nbr, cols }, &[x, w])
    }

    /// Depthwise 3×3 convolution, zero padding, `k: [C, 9]`.
    pub fn dwconv3x3(&mut self, x: Var, k: Var, grids: &[Grid]) -> Result<Var> {
        let [r, c] = dims(self.value(x));
        let ks = self.value(k);
        if ks.shape() != [c, 9] {
            return shape_err("dwconv3x3", self.shape(x), ks.shape());
        }
        let nbr = neighbour_table(grids, r)?;
        let xv = self.value(x).data();
        let kv = ks.data();
        let mut out = vec![T::zero(); r * c];
        for (row, nb) in nbr.iter().enumerate() {
            let orow = &mut out[row * c..(row + 1) * c];
            for (tap, &n) in nb.iter().enumerate() {
                if n == NO_NEIGHBOUR {
                    continue;
                }
                let src = &xv[n as usize * c..(n as usize + 1) * c];
                for ch in 0..c {
                    orow[ch] += kv[ch * 9 + tap] * src[ch];
                }
            }
        }
        self.count(MacKind::Layer, r * c * 9);
        let out = Tensor::from_parts(vec![r, c], out);
        self.push("dwconv3x3", out, Op::DwConv3x3 { x, k, nbr }, &[x, k])
    }

    // ---- detection losses -------------------------------------------------

    /// Penalty-reduced focal loss averaged over positive cells (`gt == 1`).
    pub fn focal_loss(&mut self, p: Var, gt: &Tensor<T>, alpha: T, beta: T) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != gt.len() {
            return shape_err("focal_loss", pv.shape(), gt.shape());
        }
        let positives = gt.data().iter().filter(|&&g| g == T::one()).count();
        if positives == 0 {
            return Err(Error::Input("focal loss target has no positive cell".into()));
        }
        let clamp = T::of(CLAMP_LOG);
        let mut total = T::zero();
        for (&pi, &gi) in pv.data().iter().zip(gt.data()) {
            total += if gi == T::one() {
                -(T::one() - pi).powf(alpha) * pi.max(clamp).ln()
            } else {
                -(T::one() - gi).powf(beta) * pi.powf(alpha) * (T::one() - pi).max(clamp).ln()
            };
        }
        let out = Tensor::scalar(total / T::of(positives as f64));
        self.push(
            "focal_loss",
            out,
            Op::FocalLoss {
                p,
                gt: gt.clone(),
                alpha,
                beta,
                positives,
            },
            &[p],
        )
    }

    /// `1 − GIoU` between a predicted `(x, y, w, h)` box and a fixed target.
    pub fn giou_loss(&mut self, pred: Var, gt: [T; 4]) -> Result<Var> {
        if self.value(pred).len() != 4 {
            return shape_err("giou_loss", self.shape(pred), &[4]);
        }
        if !(gt[2] > T::zero() && gt[3] > T::zero()) {
            return Err(Error::Input("degenerate ground-truth box".into()));
        }
        let p = self.value(pred).data();
        let g = giou_terms([p[0], p[1], p[2], p[3]], gt);
        self.push("giou_loss", Tensor::scalar(g.loss), Op::GiouLoss { pred, gt }, &[pred])
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, gt: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != gt.len() {
            return shape_err("l1_loss", pv.shape(), gt.shape());
        }
        let s: T = pv.data().iter().zip(gt.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(s / T::of(pv.len() as f64));
        self.push("l1_loss", out, Op::L1Loss { pred, gt: gt.clone() }, &[pred])
    }

    /// Normalised `(x, y, w, h)` box from the offset and size read at grid
    /// cell `(cx, cy)`: centre `((cx+ox)/W, (cy+oy)/H)`, extent `(sw, sh)`.
    pub fn box_from_cell(&mut self, off: Var, size: Var, cell: (usize, usize), grid: Grid) -> Result<Var> {
        let (o, s) = (self.value(off), self.value(size));
        if o.len() != 2 || s.len() != 2 {
            return shape_err("box_from_cell", o.shape(), s.shape());
        }
        let (gw, gh) = (T::of(grid.w as f64), T::of(grid.h as f64));
        let half = T::of(0.5);
        let cx = (T::of(cell.0 as f64) + o.data()[0]) / gw;
        let cy = (T::of(cell.1 as f64) + o.data()[1]) / gh;
        let (sw, sh) = (s.data()[0], s.data()[1]);
        let out = Tensor::from_parts(vec![1, 4], vec![cx - half * sw, cy - half * sh, sw, sh]);
        self.push("box_from_cell", out, Op::BoxFromCell { off, size, grid }, &[off, size])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Input(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let [m, k] = dims(av);
                let n = bv.shape()[1];
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], da))?;
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, n], db))?;
                }
            }
            &Op::MatMulBt { a, b } => {
                // y = a bᵀ, a: [m,k], b: [n,k]
                let (av, bv) = (self.value(a), self.value(b));
                let [m, k] = dims(av);
                let n = bv.shape()[0];
                if self.wants(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nn(g.data(), bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], da))?;
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn(g.data(), av.data(), &mut db, m, n, k);
                    self.accumulate(grads, b, Tensor::from_parts(vec![n, k], db))?;
                }
            }
            &Op::MatMulAt { a, b } => {
                // y = aᵀ b, a: [k,m], b: [k,n]
                let (av, bv) = (self.value(a), self.value(b));
                let [k, m] = dims(av);
                let n = bv.shape()[1];
                if self.wants(a) {
                    // da = b gᵀ : [k,n]·[m,n]ᵀ
                    let mut da = vec![T::zero(); k * m];
                    gemm_nt(bv.data(), g.data(), &mut da, k, n, m);
                    self.accumulate(grads, a, Tensor::from_parts(vec![k, m], da))?;
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_nn(av.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, b, Tensor::from_parts(vec![k, n], db))?;
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub { a, b } => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.scale(-T::one()))?;
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.mul(self.value(b))?)?;
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.mul(self.value(a))?)?;
                }
            }
            &Op::AddRow { x, bias } => {
                self.accumulate(grads, x, g.clone())?;
                if self.wants(bias) {
                    let db = g.sum_axis(0)?.reshape(self.shape(bias))?;
                    self.accumulate(grads, bias, db)?;
                }
            }
            &Op::MulRow { x, s } => {
                let [r, c] = dims(g);
                let sv = self.value(s).data();
                if self.wants(x) {
                    let dx = Tensor::from_fn(&[r, c], |idx| g.data()[idx] * sv[idx % c]);
                    self.accumulate(grads, x, dx)?;
                }
                if self.wants(s) {
                    let xv = self.value(x).data();
                    let mut ds = vec![T::zero(); c];
                    for idx in 0..r * c {
                        ds[idx % c] += g.data()[idx] * xv[idx];
                    }
                    let ds = Tensor::from_parts(self.shape(s).to_vec(), ds);
                    self.accumulate(grads, s, ds)?;
                }
            }
            &Op::Scale { x, s } => self.accumulate(grads, x, g.scale(s))?,
            &Op::Unary { x, f } => {
                let xv = self.value(x).data();
                let dx = Tensor::from_fn(y.shape(), |idx| g.data()[idx] * f.grad(xv[idx], y.data()[idx]));
                self.accumulate(grads, x, dx)?;
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                self.norm_backward(g, *x, *gamma, *beta, cache, false, grads)?;
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                self.norm_backward(g, *x, *gamma, *beta, cache, true, grads)?;
            }
            &Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let dot: T = (0..n).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(y.shape().to_vec(), dx))?;
            }
            &Op::Transpose { x } => self.accumulate(grads, x, g.transpose()?)?,
            &Op::Reshape { x } => self.accumulate(grads, x, g.reshape(self.shape(x))?)?,
            Op::Concat { parts, axis } => {
                let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                for (&p, gp) in parts.iter().zip(g.split(*axis, &extents)?) {
                    self.accumulate(grads, p, gp)?;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let xs = self.shape(x);
                let (outer, n, inner) = split_axis(xs, axis);
                let len = y.shape()[axis];
                let mut dx = vec![T::zero(); self.value(x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, x, Tensor::from_parts(xs.to_vec(), dx))?;
            }
            &Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv))?;
            }
            &Op::MeanAxis { x, axis } => {
                let xs = self.shape(x);
                let (outer, n, inner) = split_axis(xs, axis);
                let inv = T::one() / T::of(n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        for ii in 0..inner {
                            dx[(o * n + j) * inner + ii] = g.data()[o * inner + ii] * inv;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(xs.to_vec(), dx))?;
            }
            &Op::ColNormalize { x, eps } => {
                let xv = self.value(x);
                let [r, c] = dims(xv);
                let sums = xv.sum_axis(0)?;
                // dx[t,n] = g[t,n]/D_n − Σ_t' g[t',n] x[t',n] / D_n²
                let mut corr = vec![T::zero(); c];
                for t in 0..r {
                    for n in 0..c {
                        corr[n] += g.data()[t * c + n] * xv.data()[t * c + n];
                    }
                }
                let dx = Tensor::from_fn(&[r, c], |idx| {
                    let n = idx % c;
                    let d = eps + sums.data()[n];
                    g.data()[idx] / d - corr[n] / (d * d)
                });
                self.accumulate(grads, x, dx)?;
            }
            Op::Conv3x3 { x, w, nbr, cols } => {
                let [r, cout] = dims(g);
                let cin = self.shape(*x)[1];
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); cout * 9 * cin];
                    gemm_tn(g.data(), cols.data(), &mut dw, r, cout, 9 * cin);
                    self.accumulate(grads, *w, Tensor::from_parts(vec![cout, 9 * cin], dw))?;
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); r * 9 * cin];
                    gemm_nn(g.data(), self.value(*w).data(), &mut dcols, r, cout, 9 * cin);
                    let mut dx = vec![T::zero(); r * cin];
                    for (row, nb) in nbr.iter().enumerate() {
                        for (tap, &n) in nb.iter().enumerate() {
                            if n == NO_NEIGHBOUR {
                                continue;
                            }
                            let src = &dcols[row * 9 * cin + tap * cin..row * 9 * cin + (tap + 1) * cin];
                            let dst = &mut dx[n as usize * cin..(n as usize + 1) * cin];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![r, cin], dx))?;
                }
            }
            Op::DwConv3x3 { x, k, nbr } => {
                let [r, c] = dims(g);
                let xv = self.value(*x).data();
                let kv = self.value(*k).data();
                let mut dx = vec![T::zero(); r * c];
                let mut dk = vec![T::zero(); c * 9];
                for (row, nb) in nbr.iter().enumerate() {
                    let grow = &g.data()[row * c..(row + 1) * c];
                    for (tap, &n) in nb.iter().enumerate() {
                        if n == NO_NEIGHBOUR {
                            continue;
                        }
                        let base = n as usize * c;
                        for ch in 0..c {
                            dk[ch * 9 + tap] += grow[ch] * xv[base + ch];
                            dx[base + ch] += grow[ch] * kv[ch * 9 + tap];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], dx))?;
                self.accumulate(grads, *k, Tensor::from_parts(vec![c, 9], dk))?;
            }
            Op::GatherRows { x, rows } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let mut dx = vec![T::zero(); xs[0] * c];
                for (slot, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[row * c + j] += g.data()[slot * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xs.to_vec(), dx))?;
            }
            Op::FocalLoss {
                p,
                gt,
                alpha,
                beta,
                positives,
            } => {
                let (alpha, beta) = (*alpha, *beta);
                let clamp = T::of(CLAMP_LOG);
                let scale = g.item() / T::of(*positives as f64);
                let pv = self.value(*p);
                let dp = Tensor::from_fn(pv.shape(), |idx| {
                    let (pi, gi) = (pv.data()[idx], gt.data()[idx]);
                    let one = T::one();
                    let d = if gi == one {
                        let q = one - pi;
                        let mut d = alpha * q.powf(alpha - one) * pi.max(clamp).ln();
                        if pi > clamp {
                            d -= q.powf(alpha) / pi;
                        }
                        d
                    } else {
                        let q = one - pi;
                        let w = (one - gi).powf(beta);
                        let mut inner = alpha * pi.powf(alpha - one) * q.max(clamp).ln();
                        if q > clamp {
                            inner -= pi.powf(alpha) / q;
                        }
                        -w * inner
                    };
                    d * scale
                });
                self.accumulate(grads, *p, dp)?;
            }
            &Op::GiouLoss { pred, gt } => {
                let p = self.value(pred).data();
                let terms = giou_terms([p[0], p[1], p[2], p[3]], gt);
                let dp = terms.grad.map(|d| d * g.item());
                self.accumulate(grads, pred, Tensor::from_parts(self.shape(pred).to_vec(), dp.to_vec()))?;
            }
            Op::L1Loss { pred, gt } => {
                let pv = self.value(*pred);
                let inv = g.item() / T::of(pv.len() as f64);
                let dp = Tensor::from_fn(pv.shape(), |idx| {
                    let d = pv.data()[idx] - gt.data()[idx];
                    if d > T::zero() {
                        inv
                    } else if d < T::zero() {
                        -inv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *pred, dp)?;
            }
            &Op::BoxFromCell { off, size, grid } => {
                let gd = g.data();
                let half = T::of(0.5);
                let (gw, gh) = (T::of(grid.w as f64), T::of(grid.h as f64));
                let doff = Tensor::from_parts(self.shape(off).to_vec(), vec![gd[0] / gw, gd[1] / gh]);
                let dsize = Tensor::from_parts(
                    self.shape(size).to_vec(),
                    vec![gd[2] - half * gd[0], gd[3] - half * gd[1]],
                );
                self.accumulate(grads, off, doff)?;
                self.accumulate(grads, size, dsize)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        cache: &NormCache<T>,
        over_rows: bool,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let [r, c] = dims(g);
        let gam = self.value(gamma).data();
        let xhat = cache.xhat.data();
        if self.wants(gamma) || self.wants(beta) {
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for idx in 0..r * c {
                dg[idx % c] += g.data()[idx] * xhat[idx];
                db[idx % c] += g.data()[idx];
            }
            self.accumulate(grads, gamma, Tensor::from_parts(self.shape(gamma).to_vec(), dg))?;
            self.accumulate(grads, beta, Tensor::from_parts(self.shape(beta).to_vec(), db))?;
        }
        if !self.wants(x) {
            return Ok(());
        }
        // dx = rstd/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), sums over the
        // normalised group (a row for layer norm, a column for batch norm)
        let dxhat: Vec<T> = (0..r * c).map(|idx| g.data()[idx] * gam[idx % c]).collect();
        let mut dx = vec![T::zero(); r * c];
        if over_rows {
            let n = T::of(r as f64);
            let mut s1 = vec![T::zero(); c];
            let mut s2 = vec![T::zero(); c];
            for idx in 0..r * c {
                s1[idx % c] += dxhat[idx];
                s2[idx % c] += dxhat[idx] * xhat[idx];
            }
            for idx in 0..r * c {
                let j = idx % c;
                dx[idx] = cache.rstd[j] / n * (n * dxhat[idx] - s1[j] - xhat[idx] * s2[j]);
            }
        } else {
            let n = T::of(c as f64);
            for i in 0..r {
                let row = i * c..(i + 1) * c;
                let s1: T = dxhat[row.clone()].iter().copied().sum();
                let s2: T = dxhat[row.clone()].iter().zip(&xhat[row.clone()]).map(|(&a, &b)| a * b).sum();
                for idx in row {
                    dx[idx] = cache.rstd[i] / n * (n * dxhat[idx] - s1 - xhat[idx] * s2);
                }
            }
        }
        self.accumulate(grads, x, Tensor::from_parts(vec![r, c], dx))
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> [usize; 2] {
    match t.shape() {
        &[r, c] => [r, c],
        &[n] => [1, n],
        s => [s[..s.len() - 1].iter().product(), s[s.len() - 1]],
    }
}

fn check_vec<T: Scalar>(op: &'static str, v: &Tensor<T>, c: usize) -> Result<()> {
    if v.len() != c {
        return shape_err(op, v.shape(), &[c]);
    }
    Ok(())
}

fn affine_cols<T: Scalar>(xhat: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = gamma.len();
    Tensor::from_fn(xhat.shape(), |idx| xhat.data()[idx] * gamma[idx % c] + beta[idx % c])
}

pub(crate) struct GiouTerms<T> {
    pub loss: T,
    pub grad: [T; 4],
}

/// `1 − GIoU` of two `(x, y, w, h)` boxes and its gradient w.r.t. the first.
pub(crate) fn giou_terms<T: Scalar>(p: [T; 4], g: [T; 4]) -> GiouTerms<T> {
    let zero = T::zero();
    let one = T::one();
    let ind = |b: bool| if b { one } else { zero };
    let (px1, py1, pw, ph) = (p[0], p[1], p[2], p[3]);
    let (px2, py2) = (px1 + pw, py1 + ph);
    let (gx1, gy1, gw, gh) = (g[0], g[1], g[2], g[3]);
    let (gx2, gy2) = (gx1 + gw, gy1 + gh);

    let iw_raw = px2.min(gx2) - px1.max(gx1);
    let ih_raw = py2.min(gy2) - py1.max(gy1);
    let (iw, ih) = (iw_raw.max(zero), ih_raw.max(zero));
    let inter = iw * ih;
    let area_p = pw * ph;
    let union = area_p + gw * gh - inter;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let hull = cw * ch;
    let loss = T::of(2.0) - inter / union - union / hull;

    // L = 2 − I/U − U/C with U = Ap + Ag − I
    let dl_di = -one / union - inter / (union * union) + one / hull;
    let dl_dap = inter / (union * union) - one / hull;
    let dl_dc = union / (hull * hull);

    let (diw_dx, diw_dw) = if iw_raw > zero {
        (ind(px2 < gx2) - ind(px1 > gx1), ind(px2 < gx2))
    } else {
        (zero, zero)
    };
    let (dih_dy, dih_dh) = if ih_raw > zero {
        (ind(py2 < gy2) - ind(py1 > gy1), ind(py2 < gy2))
    } else {
        (zero, zero)
    };
    let dcw_dx = ind(px2 > gx2) - ind(px1 < gx1);
    let dcw_dw = ind(px2 > gx2);
    let dch_dy = ind(py2 > gy2) - ind(py1 < gy1);
    let dch_dh = ind(py2 > gy2);

    let grad = [
        dl_di * ih * diw_dx + dl_dc * ch * dcw_dx,
        dl_di * iw * dih_dy + dl_dc * cw * dch_dy,
        dl_di * ih * diw_dw + dl_dap * ph + dl_dc * ch * dcw_dw,
        dl_di * iw * dih_dh + dl_dap * pw + dl_dc * cw * dch_dh,
    ];
    GiouTerms { loss, grad }
}
