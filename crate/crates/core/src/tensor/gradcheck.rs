use std::rc::Rc;

use serde::Serialize;

use super::kernels::Padding;
use super::{AttentionSpec, RngStream, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    h: f64,
) -> Result<Tensor<T>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::of(orig.as_f64() + h);
        let up = f(&probe)?;
        probe.data_mut()[i] = T::of(orig.as_f64() - h);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push(T::of((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Outcome of one gradient comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, max_rel_err: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_rel_err,
            tolerance,
            passed: max_rel_err <= tolerance,
        }
    }
}

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

fn weighted_total(out: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Compares tape gradients of `Σ w ⊙ build(inputs)` for a random `w`
/// against central differences in every input.
pub fn check_primitive(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &Build,
    h: f64,
    tolerance: f64,
    rng: &mut RngStream,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let w = Tensor::randn(tape.shape(out).to_vec(), 1.0, rng);
    tape.backward_from(out, &w)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = match tape.grad(vars[i]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(x.shape().to_vec()),
        };
        let numeric = finite_diff_gradient(
            |probe| {
                let mut t = Tape::new();
                let vs = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.leaf(if j == i { probe.clone() } else { v.clone() }, false))
                    .collect::<Result<Vec<_>>>()?;
                let o = build(&mut t, &vs)?;
                Ok(weighted_total(t.value(o), &w))
            },
            x,
            h,
        )?;
        worst = worst.max(super::rel_err(&analytic, &numeric));
    }
    Ok(CheckResult::new(name, worst, tolerance))
}

/// Values bounded away from zero so kinks are never straddled by a probe.
fn away_from_zero(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<f64> {
    let t = Tensor::<f64>::randn(shape, 1.0, rng);
    t.map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

/// Distinct values along every reduced fibre, spaced well beyond `h`.
fn spread(shape: Vec<usize>, rng: &mut RngStream) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.below(i + 1));
    }
    let data: Vec<f64> = idx.iter().map(|&k| 0.1 * k as f64 - 0.05 * n as f64).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// One finite-difference check per differentiable primitive, in f64.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;
    let mut rng = RngStream::new(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build, r: &mut RngStream| -> Result<()> {
        out.push(check_primitive(name, &inputs, build, H, TOL, r)?);
        Ok(())
    };
    let x = |s: &[usize], r: &mut RngStream| Tensor::<f64>::randn(s.to_vec(), 1.0, r);

    run("add", vec![x(&[2, 3], r), x(&[2, 3], r)], &|t, v| t.add(v[0], v[1]), r)?;
    run("sub", vec![x(&[2, 3], r), x(&[2, 3], r)], &|t, v| t.sub(v[0], v[1]), r)?;
    run("mul", vec![x(&[2, 3], r), x(&[2, 3], r)], &|t, v| t.mul(v[0], v[1]), r)?;
    run("scale", vec![x(&[4], r)], &|t, v| t.scale(v[0], -1.7), r)?;
    run(
        "add_bias",
        vec![x(&[2, 3, 4], r), x(&[4], r)],
        &|t, v| t.add_bias(v[0], v[1]),
        r,
    )?;
    run(
        "matmul",
        vec![x(&[2, 3, 4], r), x(&[4, 5], r)],
        &|t, v| t.matmul(v[0], v[1], false),
        r,
    )?;
    run(
        "matmul_transposed",
        vec![x(&[3, 4], r), x(&[5, 4], r)],
        &|t, v| t.matmul(v[0], v[1], true),
        r,
    )?;
    run("relu", vec![away_from_zero(vec![3, 4], r)], &|t, v| t.relu(v[0]), r)?;
    run("sigmoid", vec![x(&[3, 4], r)], &|t, v| t.sigmoid(v[0]), r)?;
    run("softmax_last", vec![x(&[2, 3, 5], r)], &|t, v| t.softmax(v[0], 2), r)?;
    run("softmax_inner", vec![x(&[2, 3, 5], r)], &|t, v| t.softmax(v[0], 1), r)?;
    run(
        "layer_norm",
        vec![x(&[2, 3, 6], r), x(&[6], r), x(&[6], r)],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        r,
    )?;
    for (name, pad, w) in [
        ("conv1d_causal", Padding::Causal, 4),
        ("conv1d_symmetric", Padding::Symmetric, 3),
    ] {
        run(
            name,
            vec![x(&[2, 5, 3], r), x(&[w, 3], r)],
            &move |t, v| t.conv1d(v[0], v[1], pad),
            r,
        )?;
    }
    for (name, pad) in [
        ("dyn_conv_causal", Padding::Causal),
        ("dyn_conv_symmetric", Padding::Symmetric),
    ] {
        run(
            name,
            vec![x(&[2, 5, 4], r), x(&[2, 5, 2, 3], r)],
            &move |t, v| t.dyn_conv(v[0], v[1], pad),
            r,
        )?;
    }
    let mask: Rc<[bool]> = Rc::from(vec![true, true, true, false, true, true, false, false]);
    for (name, causal, key_mask) in [
        ("attention", false, None),
        ("attention_causal", true, None),
        ("attention_masked", false, Some(mask)),
    ] {
        let spec = AttentionSpec {
            heads: 2,
            causal,
            key_mask,
        };
        let lk = if causal { 3 } else { 4 };
        run(
            name,
            vec![x(&[2, 3, 4], r), x(&[2, lk, 4], r), x(&[2, lk, 4], r)],
            &move |t, v| t.attention(v[0], v[1], v[2], &spec),
            r,
        )?;
    }
    let ids: Rc<[usize]> = Rc::from(vec![0, 3, 3, 1, 4, 0]);
    run(
        "embedding",
        vec![x(&[5, 3], r)],
        &move |t, v| t.embedding(v[0], ids.clone(), &[2, 3]),
        r,
    )?;
    run(
        "concat",
        vec![x(&[2, 3, 2], r), x(&[2, 3, 4], r)],
        &|t, v| t.concat(&[v[0], v[1]], 2),
        r,
    )?;
    run("slice", vec![x(&[2, 5, 3], r)], &|t, v| t.slice(v[0], 1, 1, 3), r)?;
    run("reshape", vec![x(&[2, 6], r)], &|t, v| t.reshape(v[0], &[3, 4]), r)?;
    run(
        "reduce_max",
        vec![spread(vec![3, 2, 4], r)],
        &|t, v| t.reduce_max(v[0], 0),
        r,
    )?;
    run("reduce_mean", vec![x(&[3, 2, 4], r)], &|t, v| t.reduce_mean(v[0], 0), r)?;
    run("sum_all", vec![x(&[3, 4], r)], &|t, v| t.sum_all(v[0]), r)?;
    run(
        "dropout",
        vec![x(&[4, 6], r)],
        &|t, v| t.dropout(v[0], 0.3, &mut RngStream::new(99)),
        r,
    )?;
    let targets: Rc<[usize]> = Rc::from(vec![1, 0, 4, 2]);
    run(
        "cross_entropy",
        vec![x(&[4, 5], r)],
        &move |t, v| t.cross_entropy(v[0], targets.clone(), Some(0), 0.1),
        r,
    )?;
    run(
        "weighted_sum",
        vec![x(&[3], r), x(&[2, 3], r), x(&[2, 3], r), x(&[2, 3], r)],
        &|t, v| t.weighted_sum(v[0], &v[1..]),
        r,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_diff_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let x = Tensor::<f64>::scalar(0.0);
        let r = finite_diff_gradient(|_| Ok(f64::NAN), &x, 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for c in primitive_suite(5).unwrap() {
            assert!(c.passed, "{} rel err {:e}", c.name, c.max_rel_err);
        }
    }
}
