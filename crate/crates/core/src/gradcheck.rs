//! Central finite-difference gradient checking in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &mut F, x: Tensor<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)
}

fn scalar_of(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let t = tape.value(out);
    if t.numel() != 1 {
        return Err(Error::Gradient(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences `(f(x+eps) - f(x-eps)) / (2 eps)` over every coordinate.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    scalar_of(&tape, out)?;
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval_scalar(&mut f, plus)? - eval_scalar(&mut f, minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Outcome of a parameter-level gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub coordinates: usize,
    /// Probed coordinates left out because `x +- eps` changed the branch of a
    /// ReLU, max-pool or clamp, so central differences do not estimate the
    /// derivative there.
    pub skipped_kinks: usize,
    /// Coordinates whose gradient is too small for central differences to
    /// resolve to [`RESOLVABLE`]; these are compared in absolute terms.
    pub noise_limited: usize,
    /// Largest `|a - n| / noise` over the noise-limited coordinates (<= 1 means
    /// agreement within finite-difference resolution).
    pub max_noise_ratio: f64,
}

/// Rounding error assumed per loss evaluation, in ulps of the loss.
pub const FD_NOISE_ULPS: f64 = 16.0;
/// A coordinate is compared by relative error when the finite-difference noise
/// bound is at most this fraction of the gradient.
pub const RESOLVABLE: f64 = 1e-5;

/// Upper bound on the rounding error of `(f+ - f-) / (2 eps)`.
pub fn fd_noise(f_plus: f64, f_minus: f64, eps: f64) -> f64 {
    FD_NOISE_ULPS * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / (2.0 * eps)
}

/// Compares tape gradients of every parameter tensor of `model` with central
/// differences, probing up to `coords_per_tensor` coordinates per tensor
/// (all of them when the tensor is smaller). Coordinates whose perturbation
/// crosses a kink (see [`Tape::branch_pattern`]) are counted, not compared.
/// Gradients below the resolution of central differences must agree within
/// [`fd_noise`] instead of by relative error.
///
/// `loss` must record a scalar loss with `ParamGrads::All` semantics and
/// return it together with the [`Forward`](crate::nn::Forward) bindings.
pub fn check_model_params<M, F>(
    model: &mut M,
    mut loss: F,
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<ParamCheck>
where
    M: crate::nn::Model<f64>,
    F: FnMut(&M, &mut Tape<f64>) -> Result<(Var, Vec<Vec<Var>>)>,
{
    use rand::seq::index::sample;

    let mut tape = Tape::new();
    let (out, bindings) = loss(model, &mut tape)?;
    scalar_of(&tape, out)?;
    let pattern = tape.branch_pattern();
    tape.backward(out)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = ParamCheck {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        coordinates: 0,
        skipped_kinks: 0,
        noise_limited: 0,
        max_noise_ratio: 0.0,
    };
    for (b, block_vars) in bindings.iter().enumerate() {
        for (p, &var) in block_vars.iter().enumerate() {
            let numel = model.blocks()[b].params[p].value.numel();
            let analytic = tape.grad(var).map(<[f64]>::to_vec).unwrap_or(vec![0.0; numel]);
            let picks: Vec<usize> = if numel <= coords_per_tensor {
                (0..numel).collect()
            } else {
                sample(&mut rng, numel, coords_per_tensor).into_vec()
            };
            for i in picks {
                let original = model.blocks()[b].params[p].value.data()[i];
                let mut eval = |m: &mut M, v: f64| -> Result<(f64, u64)> {
                    m.blocks_mut()[b].params[p].value.data_mut()[i] = v;
                    let mut t = Tape::new();
                    let (o, _) = loss(m, &mut t)?;
                    Ok((scalar_of(&t, o)?, t.branch_pattern()))
                };
                let plus = eval(model, original + eps);
                let minus = eval(model, original - eps);
                model.blocks_mut()[b].params[p].value.data_mut()[i] = original;
                let ((fp, pp), (fm, pm)) = (plus?, minus?);
                if pp != pattern || pm != pattern {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * eps);
                let noise = fd_noise(fp, fm, eps);
                if noise > RESOLVABLE * analytic[i].abs().max(numeric.abs()) {
                    report.noise_limited += 1;
                    let ratio = (analytic[i] - numeric).abs() / noise;
                    report.max_noise_ratio = report.max_noise_ratio.max(ratio);
                    continue;
                }
                let err = relative_error(analytic[i], numeric);
                report.coordinates += 1;
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_tensor = model.blocks()[b].params[p].name.clone();
                }
            }
        }
    }
    Ok(report)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape")
}

/// `sum(y * p)` for a fixed projection `p`, so every output coordinate matters.
fn project(t: &mut Tape<f64>, y: Var, p: &Tensor<f64>) -> Result<Var> {
    let pv = t.constant(p.clone());
    let m = t.mul(y, pv)?;
    Ok(t.sum(m))
}

/// Worst relative error of every differentiable tape op (per input) on random
/// data drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x4 = random(&[2, 3, 4, 4], &mut rng);
    let w = random(&[2, 3, 3, 3], &mut rng);
    let bias = random(&[2], &mut rng);
    let proj = random(&[2, 3, 4, 4], &mut rng);
    let proj_conv = random(&[2, 2, 4, 4], &mut rng);
    let proj_pool = random(&[2, 3, 2, 2], &mut rng);
    let proj_up = random(&[2, 3, 8, 8], &mut rng);
    let logits = random(&[4, 3], &mut rng);
    let feats = random(&[4, 5], &mut rng);
    let dw = random(&[5, 3], &mut rng);
    let db = random(&[3], &mut rng);
    let gamma = t64(&[3], &[1.5, 0.5, -1.0]);
    let beta = t64(&[3], &[0.1, 0.2, 0.3]);
    let stats = RunningStats {
        mean: vec![0.2, -0.1, 0.05],
        var: vec![0.8, 1.3, 0.6],
        initialized: true,
    };
    let probs = Tensor::from_fn([2, 1, 4, 4], |_| rng.random_range(0.05..0.95));
    let target: Vec<f64> = (0..32).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    let mut out = vec![];

    out.push(("conv2d/input", grad_check(|t, v| {
        let (wv, bv) = (t.constant(w.clone()), t.constant(bias.clone()));
        let y = t.conv2d(v, wv, Some(bv), 1, 1)?;
        project(t, y, &proj_conv)
    }, &x4, EPS)?));
    out.push(("conv2d/weight", grad_check(|t, v| {
        let xv = t.constant(x4.clone());
        let y = t.conv2d(xv, v, None, 2, 1)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    }, &w, EPS)?));
    out.push(("conv2d/bias", grad_check(|t, v| {
        let (xv, wv) = (t.constant(x4.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, Some(v), 1, 1)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    }, &bias, EPS)?));
    out.push(("max_pool2d", grad_check(|t, v| {
        let y = t.max_pool2d(v, 2, 2)?;
        project(t, y, &proj_pool)
    }, &x4, EPS)?));
    out.push(("upsample_nearest2x", grad_check(|t, v| {
        let y = t.upsample_nearest2x(v)?;
        project(t, y, &proj_up)
    }, &x4, EPS)?));
    out.push(("concat_channels", grad_check(|t, v| {
        let other = t.constant(proj.clone());
        let y = t.concat_channels(other, v)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    }, &x4, EPS)?));
    out.push(("sigmoid", grad_check(|t, v| {
        let y = t.sigmoid(v);
        project(t, y, &proj)
    }, &x4, EPS)?));
    out.push(("relu", grad_check(|t, v| {
        let y = t.relu(v);
        project(t, y, &proj)
    }, &x4, EPS)?));
    out.push(("softmax", grad_check(|t, v| {
        let y = t.softmax(v)?;
        let p = t64(&[4, 3], &[1., 2., 3., -1., 0.5, 2., 0., 0., 4., 1., 1., -2.]);
        project(t, y, &p)
    }, &logits, EPS)?));
    let dense_sq = |t: &mut Tape<f64>, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = t.dense(x, w, b)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    };
    out.push(("dense/input", grad_check(|t, v| {
        let (w, b) = (t.constant(dw.clone()), t.constant(db.clone()));
        dense_sq(t, v, w, b)
    }, &feats, EPS)?));
    out.push(("dense/weight", grad_check(|t, v| {
        let (x, b) = (t.constant(feats.clone()), t.constant(db.clone()));
        dense_sq(t, x, v, b)
    }, &dw, EPS)?));
    out.push(("dense/bias", grad_check(|t, v| {
        let (x, w) = (t.constant(feats.clone()), t.constant(dw.clone()));
        dense_sq(t, x, w, v)
    }, &db, EPS)?));
    out.push(("global_avg_pool", grad_check(|t, v| {
        let y = t.global_avg_pool(v)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    }, &x4, EPS)?));
    let bn_train = |t: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
        let mut s = RunningStats::new(3);
        let y = t.batch_norm_train(x, g, b, &mut s)?;
        project(t, y, &proj)
    };
    out.push(("batch_norm_train/input", grad_check(|t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        bn_train(t, v, g, b)
    }, &x4, EPS)?));
    out.push(("batch_norm_train/gamma", grad_check(|t, v| {
        let (x, b) = (t.constant(x4.clone()), t.constant(beta.clone()));
        bn_train(t, x, v, b)
    }, &gamma, EPS)?));
    out.push(("batch_norm_train/beta", grad_check(|t, v| {
        let (x, g) = (t.constant(x4.clone()), t.constant(gamma.clone()));
        bn_train(t, x, g, v)
    }, &beta, EPS)?));
    out.push(("batch_norm_eval/input", grad_check(|t, v| {
        let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
        let y = t.batch_norm_eval(v, g, b, &stats, "bn")?;
        project(t, y, &proj)
    }, &x4, EPS)?));
    out.push(("add", grad_check(|t, v| {
        let p = t.constant(proj.clone());
        let y = t.add(v, p)?;
        let y = t.mul(y, y)?;
        Ok(t.sum(y))
    }, &x4, EPS)?));
    out.push(("mul", grad_check(|t, v| {
        let y = t.mul(v, v)?;
        project(t, y, &proj)
    }, &x4, EPS)?));
    out.push(("scale+mean", grad_check(|t, v| {
        let y = t.scale(v, -2.5);
        let y = t.mul(y, v)?;
        Ok(t.mean(y))
    }, &x4, EPS)?));
    out.push(("select+reshape", grad_check(|t, v| {
        let r = t.reshape(v, [6, 16])?;
        let a = t.select(r, 7)?;
        let b = t.select(r, 50)?;
        t.mul(a, b)
    }, &x4, EPS)?));
    out.push(("dice_loss", grad_check(|t, v| t.dice_loss(v, &target, 1.0), &probs, EPS)?));
    out.push(("bce_loss", grad_check(|t, v| t.bce_loss(v, &target), &probs, EPS)?));
    out.push(("cross_entropy", grad_check(
        |t, v| t.cross_entropy(v, &[0, 2, 1, 1], Some(&[1.0, 2.0, 0.5])),
        &logits,
        EPS,
    )?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new([2, 3], vec![0.3, -1.2, 2.0, 4.5, -0.7, 1.1]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relu_sum_away_from_kink() {
        let x = Tensor::new([5], vec![0.3, -1.2, 2.0, 4.5, -0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v);
                Ok(t.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|t, v| Ok(t.relu(v)), &x, 1e-5),
            Err(Error::Gradient(_))
        ));
    }
}
