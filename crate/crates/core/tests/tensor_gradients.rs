//! Finite-difference checks for every differentiable op of the tensor engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tio_core::tensor::gradcheck::check_gradients;
use tio_core::{Tape, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Fixed random weights turn any tensor-valued op into a scalar loss.
fn weighted_sum<'t>(v: tio_core::Var<'t, f64>, seed: u64) -> tio_core::Result<tio_core::Var<'t, f64>> {
    let w = random(&v.shape(), -1.0, 1.0, seed);
    Ok(v.mul(v.tape().constant(w))?.sum())
}

fn assert_check(name: &str, inputs: &[Tensor<f64>], f: impl for<'t> Fn(&'t Tape<f64>, &[tio_core::Var<'t, f64>]) -> tio_core::Result<tio_core::Var<'t, f64>>) {
    let report = check_gradients(inputs, STEP, f).unwrap();
    assert!(
        report.max_rel_error() < TOL,
        "{name}: relative error {:?}",
        report.rel_errors
    );
}

#[test]
fn elementwise_binary_ops() {
    let a = random(&[1, 3, 4, 5], -1.0, 1.0, 1);
    let b = random(&[1, 3, 4, 5], 0.5, 2.0, 2);
    let m = random(&[1, 1, 4, 5], 0.5, 2.0, 3);
    assert_check("add", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].add(v[1])?, 9));
    assert_check("sub", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].sub(v[1])?, 9));
    assert_check("mul", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 9));
    assert_check("div", &[a.clone(), b.clone()], |_, v| weighted_sum(v[0].div(v[1])?, 9));
    assert_check("mul-broadcast", &[a.clone(), m.clone()], |_, v| weighted_sum(v[0].mul(v[1])?, 9));
    assert_check("div-broadcast", &[a.clone(), m], |_, v| weighted_sum(v[0].div(v[1])?, 9));
    let s = Tensor::scalar(0.7);
    assert_check("scalar-broadcast", &[a, s], |_, v| weighted_sum(v[0].mul(v[1])?, 9));
}

#[test]
fn elementwise_unary_ops() {
    let x = random(&[1, 2, 3, 4], -1.5, 1.5, 4);
    let pos = random(&[1, 2, 3, 4], 0.2, 2.0, 5);
    assert_check("abs", &[x.clone()], |_, v| weighted_sum(v[0].abs(), 1));
    assert_check("exp", &[x.clone()], |_, v| weighted_sum(v[0].exp(), 1));
    assert_check("log", &[pos.clone()], |_, v| weighted_sum(v[0].log(), 1));
    assert_check("sqrt", &[pos.clone()], |_, v| weighted_sum(v[0].sqrt(), 1));
    assert_check("square", &[x.clone()], |_, v| weighted_sum(v[0].square(), 1));
    assert_check("elu", &[x.clone()], |_, v| weighted_sum(v[0].elu(), 1));
    assert_check("relu", &[x.clone()], |_, v| weighted_sum(v[0].relu(), 1));
    assert_check("sigmoid", &[x.clone()], |_, v| weighted_sum(v[0].sigmoid(), 1));
    assert_check("neg", &[x.clone()], |_, v| weighted_sum(v[0].neg(), 1));
    assert_check("affine-scalar", &[x.clone()], |_, v| weighted_sum(v[0].mul_scalar(-2.5).add_scalar(3.0), 1));
    assert_check("min-scalar", &[x.clone()], |_, v| weighted_sum(v[0].min_scalar(0.3), 1));
    assert_check("max-scalar", &[x.clone()], |_, v| weighted_sum(v[0].max_scalar(-0.3), 1));
    assert_check("clamp", &[x], |_, v| weighted_sum(v[0].clamp(-0.5, 0.5), 1));
}

#[test]
fn reductions_and_reshaping() {
    let x = random(&[2, 3, 4, 5], -1.0, 1.0, 6);
    assert_check("sum", &[x.clone()], |_, v| Ok(v[0].square().sum()));
    assert_check("mean", &[x.clone()], |_, v| v[0].square().mean());
    assert_check("sum_axis", &[x.clone()], |_, v| weighted_sum(v[0].sum_axis(1)?, 2));
    assert_check("mean_axis", &[x.clone()], |_, v| weighted_sum(v[0].mean_axis(3)?, 2));
    assert_check("max_axis", &[x.clone()], |_, v| weighted_sum(v[0].max_axis(1)?, 2));
    assert_check("narrow", &[x.clone()], |_, v| weighted_sum(v[0].narrow(2, 1, 2)?, 2));
    assert_check("flip", &[x.clone()], |_, v| weighted_sum(v[0].flip_w(), 2));
    assert_check("diff", &[x.clone()], |_, v| {
        let a = weighted_sum(v[0].diff_x()?, 3)?;
        let b = weighted_sum(v[0].diff_y()?, 4)?;
        a.add(b)
    });
    let y = random(&[2, 2, 4, 5], -1.0, 1.0, 7);
    assert_check("concat", &[x, y], |_, v| {
        weighted_sum(tio_core::Var::concat(&[v[0], v[1]], 1)?, 2)
    });
}

#[test]
fn conv2d_matches_finite_differences() {
    let x = random(&[1, 2, 5, 5], -1.0, 1.0, 8);
    let w3 = random(&[3, 2, 3, 3], -0.5, 0.5, 9);
    let w1 = random(&[3, 2, 1, 1], -0.5, 0.5, 10);
    assert_check("conv3x3-sum", &[x.clone(), w3.clone()], |_, v| Ok(v[0].conv2d(v[1], 1, 1)?.sum()));
    assert_check("conv3x3", &[x.clone(), w3.clone()], |_, v| weighted_sum(v[0].conv2d(v[1], 1, 1)?, 3));
    assert_check("conv3x3-stride2", &[x.clone(), w3], |_, v| weighted_sum(v[0].conv2d(v[1], 2, 1)?, 3));
    assert_check("conv1x1", &[x, w1], |_, v| weighted_sum(v[0].conv2d(v[1], 1, 0)?, 3));
}

#[test]
fn conv2d_sum_gradient_below_1e6() {
    let x = random(&[1, 2, 5, 5], -1.0, 1.0, 11);
    let w = random(&[2, 2, 3, 3], -0.5, 0.5, 12);
    let r = check_gradients(&[x, w], STEP, |_, v| Ok(v[0].conv2d(v[1], 1, 1)?.sum())).unwrap();
    assert!(r.max_rel_error() < 1e-6, "{:?}", r.rel_errors);
}

#[test]
fn softmax_and_pooling() {
    let x = random(&[1, 4, 3, 5], -2.0, 2.0, 13);
    assert_check("softmax", &[x.clone()], |_, v| weighted_sum(v[0].softmax_channel()?, 5));
    assert_check("maxpool", &[x.clone()], |_, v| weighted_sum(v[0].maxpool3x3()?, 5));
    assert_check("avgpool", &[x.clone()], |_, v| weighted_sum(v[0].avgpool3x3()?, 5));
    assert_check("upsample", &[x], |_, v| weighted_sum(v[0].upsample2x()?, 5));
}

#[test]
fn bilinear_sampling_gradients() {
    let img = random(&[1, 2, 6, 7], -1.0, 1.0, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    // Keep coordinates away from integer kinks and the clamped border.
    let mut coord = |hi: f64| {
        let base: f64 = rng.gen_range(0.0..hi - 1.0).floor();
        base + rng.gen_range(0.1..0.9)
    };
    let xs = Tensor::from_fn(vec![1, 1, 3, 4], |_| coord(6.0));
    let ys = Tensor::from_fn(vec![1, 1, 3, 4], |_| coord(5.0));
    let r = check_gradients(&[img, xs, ys], STEP, |_, v| weighted_sum(v[0].bilinear_sample(v[1], v[2])?, 6)).unwrap();
    assert!(r.max_rel_error() < 1e-5, "{:?}", r.rel_errors);
}

#[test]
fn shift_gradients() {
    let x = random(&[1, 3, 2, 8], -1.0, 1.0, 16);
    assert_check("shift", &[x], |_, v| weighted_sum(v[0].shift_h(&[0.5, 2.25, -1.75])?, 7));
}

#[test]
fn shared_subexpression_accumulates() {
    let x = random(&[1, 1, 2, 3], -1.0, 1.0, 17);
    // y = e^x used twice versus the unshared rewrite e^x + e^x.
    let shared = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let e = v.exp();
        tape.backward(e.mul(e).unwrap().add(e).unwrap().sum()).unwrap();
        v.grad().unwrap()
    };
    let unshared = {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let (e1, e2, e3) = (v.exp(), v.exp(), v.exp());
        tape.backward(e1.mul(e2).unwrap().add(e3).unwrap().sum()).unwrap();
        v.grad().unwrap()
    };
    assert!(shared.max_abs_diff(&unshared) < 1e-14);
}
