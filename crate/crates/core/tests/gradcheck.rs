// SPDX-License-Identifier: Apache-2.0

//! Finite-difference checks for every differentiable tape op and for the
//! end-to-end steering gradient, 64-bit, step 1e-5, over 20 seeds.

use latentqa::autograd::Tape;
use latentqa::gradcheck::{check_adapter, check_op, check_steer_gradient, OPS};
use latentqa::steer::steer_gradient;
use latentqa::{ModelConfig, Tensor, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn check(name: &str, f: impl Fn(u64, f64) -> latentqa::Result<f64>) {
    for seed in 0..SEEDS {
        let err = f(seed, STEP).unwrap();
        assert!(err < TOL, "{name} seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul", |s, h| check_op("matmul", s, h));
}

#[test]
fn add_mul_scale() {
    check("add/mul/scale", |s, h| check_op("add/mul/scale", s, h));
}

#[test]
fn gelu() {
    check("gelu", |s, h| check_op("gelu", s, h));
}

#[test]
fn rms_norm() {
    check("rms_norm", |s, h| check_op("rms_norm", s, h));
}

#[test]
fn softmax_rows() {
    check("softmax_rows", |s, h| check_op("softmax_rows", s, h));
}

#[test]
fn causal_attention() {
    check("causal_attention", |s, h| check_op("causal_attention", s, h));
}

#[test]
fn cross_entropy() {
    check("cross_entropy", |s, h| check_op("cross_entropy", s, h));
}

#[test]
fn embedding_slice_splice() {
    check("embedding/slice/splice", |s, h| check_op("embedding/slice/splice", s, h));
}

#[test]
fn every_listed_op_has_a_check() {
    for op in OPS {
        check_op(op, 0, STEP).unwrap();
    }
    assert!(check_op("conv2d", 0, STEP).is_err());
}

#[test]
fn adapter_gradient_matches_finite_differences() {
    check("adapter", check_adapter);
}

#[test]
fn steer_gradient_matches_finite_differences() {
    check("steer_gradient", check_steer_gradient);
}

/// A hand-computed case: for `L = ½‖x‖²` the gradient is `x` itself.
#[test]
fn oracle_agrees_with_a_closed_form() {
    let x = Tensor::new(vec![1, 4], vec![0.5, -2.0, 1.5, 3.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(&x, true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let l = tape.scale(s, 0.5);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(v).unwrap(), x.data());
}

fn steer_fixture(seed: u64) -> (TransformerModel<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = TransformerModel::<f64>::new_random(ModelConfig::new(2, 64, 4, 16, 16), &mut rng).unwrap();
    dec.attach_lora(latentqa::LoraSpec::on_layers(0..2, 2, 4.0), &mut rng).unwrap();
    for p in dec.adapter_mut().unwrap().params_mut() {
        for x in p.data_mut() {
            *x = rng.random_range(-0.1..0.1);
        }
    }
    (dec, rand_tensor(&mut rng, 2, 64))
}

#[test]
fn steer_gradient_rejects_detached_activation() {
    let (dec, act) = steer_fixture(0);
    let mut tape = Tape::new();
    let v = tape.leaf(&act, false);
    assert!(matches!(
        steer_gradient(&mut tape, &dec, v, &[3], &[11, 2], 0),
        Err(latentqa::LitError::Tape(_))
    ));
}

#[test]
fn steer_gradient_leaves_decoder_untouched() {
    let (dec, act) = steer_fixture(1);
    let before = dec.adapter().unwrap().hash();
    let mut tape = Tape::new();
    let v = tape.leaf(&act, true);
    steer_gradient(&mut tape, &dec, v, &[3], &[11, 2], 0).unwrap();
    assert_eq!(dec.adapter().unwrap().hash(), before);
}

#[test]
fn different_answers_pull_in_different_directions() {
    let (dec, act) = steer_fixture(2);
    let grad = |ans: &[usize]| {
        let mut tape = Tape::new();
        let v = tape.leaf(&act, true);
        steer_gradient(&mut tape, &dec, v, &[3], ans, 0).unwrap()
    };
    let a = grad(&[11, 2]);
    let b = grad(&[13, 2]);
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (na * nb) < 0.99);
}
