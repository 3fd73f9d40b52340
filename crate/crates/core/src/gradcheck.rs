//! Central-difference gradient checking against the tape.

use crate::error::{Error, Result};
use crate::params::{Ctx, Mode, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const DENOM_FLOOR: f64 = 1e-8;

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Input(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::Input(format!("grad_check needs a scalar output, got {:?}", t.shape())));
    }
    Ok(t.item().to_f64_lossy())
}

/// Max relative error between the tape gradient of the scalar `f` and
/// central differences, over every element of every input.
pub fn grad_check_many<T, F>(f: F, xs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |inputs: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| tape.leaf(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut tape, &vars)?;
        scalar_of(&tape, y)
    };

    let mut tape = Tape::new();
    let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
    let y = f(&mut tape, &vars)?;
    scalar_of(&tape, y)?;
    let grads = tape.backward(y)?;

    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + T::of(eps);
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - T::of(eps);
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i].to_f64_lossy(), numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check_many`] for a single input.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}

/// Checks parameter gradients of a scalar built from a [`Ctx`] over `ids`.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, ids: &[ParamId], mode: Mode, f: F, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for &id in ids {
        for (a, n) in param_gradient_pairs(store, id, mode, &f, eps)? {
            worst = worst.max(relative_error(a, n));
        }
    }
    Ok(worst)
}

fn analytic_param_grad<T, F>(store: &ParamStore<T>, id: ParamId, mode: Mode, f: &F) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, mode);
    let y = f(&mut ctx)?;
    scalar_of(&ctx.tape, y)?;
    let grads = ctx.param_grads(y)?;
    let n = store.get(id).len();
    Ok(grads[id.index()]
        .as_ref()
        .map_or_else(|| vec![0.0; n], |g| g.data().iter().map(|v| v.to_f64_lossy()).collect()))
}

fn eval_param_scalar<T, F>(store: &ParamStore<T>, mode: Mode, f: &F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, mode);
    let y = f(&mut ctx)?;
    scalar_of(&ctx.tape, y)
}

/// `(analytic, central difference)` for every element of parameter `id`.
pub fn param_gradient_pairs<T, F>(store: &ParamStore<T>, id: ParamId, mode: Mode, f: &F, eps: f64) -> Result<Vec<(f64, f64)>>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic = analytic_param_grad(store, id, mode, f)?;
    let mut work = store.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for (i, &a) in analytic.iter().enumerate() {
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + T::of(eps);
        let up = eval_param_scalar(&work, mode, f)?;
        work.get_mut(id).data_mut()[i] = orig - T::of(eps);
        let down = eval_param_scalar(&work, mode, f)?;
        work.get_mut(id).data_mut()[i] = orig;
        out.push((a, (up - down) / (2.0 * eps)));
    }
    Ok(out)
}

/// Gradient check of `t ↦ f(θ + t·v)` at `t = 0`, where `v` perturbs only
/// parameter `id`. The analytic side is `∇_θ f · v`.
pub fn grad_check_direction<T, F>(
    store: &ParamStore<T>,
    id: ParamId,
    direction: &Tensor<T>,
    mode: Mode,
    f: F,
    eps: f64,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Ctx<'_, T>) -> Result<Var>,
{
    check_eps(eps)?;
    if direction.shape() != store.get(id).shape() {
        return Err(Error::Input(format!(
            "direction shape {:?} does not match parameter shape {:?}",
            direction.shape(),
            store.get(id).shape()
        )));
    }
    let g = analytic_param_grad(store, id, mode, &f)?;
    let analytic: f64 = g.iter().zip(direction.data()).map(|(g, v)| g * v.to_f64_lossy()).sum();
    let shifted = |t: f64| -> Result<f64> {
        let mut work = store.clone();
        for (w, &v) in work.get_mut(id).data_mut().iter_mut().zip(direction.data()) {
            *w += T::of(t) * v;
        }
        eval_param_scalar(&work, mode, &f)
    };
    let numeric = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
    Ok(relative_error(analytic, numeric))
}

/// Fails with [`Error::GradCheck`] when `err` is not below `tol`.
pub fn require(op: &str, err: f64, tol: f64) -> Result<f64> {
    if err < tol {
        Ok(err)
    } else {
        Err(Error::GradCheck {
            op: op.to_string(),
            max_rel_err: err,
        })
    }
}
