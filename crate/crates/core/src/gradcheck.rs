// SPDX-License-Identifier: Apache-2.0

//! Central finite-difference gradient oracle, and a suite that runs it
//! against every differentiable op and the two model-level gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{LitError, Result};
use crate::patching::{patched_decoder_forward, ActivationTensor, Provenance};
use crate::tensor::Tensor;
use crate::transformer::{Input, LoraSpec, ModelConfig, Span, Trainable, TransformerModel};

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape with every parameter registered as a
/// `requires_grad` leaf (in order) and must return a scalar. The result is
/// `max |analytic − numeric| / (|analytic| + |numeric| + 1e-12)` over all
/// coordinates.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let eval = |ps: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p, grads)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out);
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let gs = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(params, true)?;
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Names accepted by [`check_op`].
pub const OPS: [&str; 8] = [
    "matmul",
    "add/mul/scale",
    "gelu",
    "rms_norm",
    "softmax_rows",
    "causal_attention",
    "cross_entropy",
    "embedding/slice/splice",
];

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output coordinate matters.
fn project(t: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.dims(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = t.leaf(&uniform(&mut rng, r, c, 1.0), false);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

/// Worst relative error of one op on random inputs drawn from `seed`.
pub fn check_op(name: &str, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |rows, cols| uniform(&mut rng, rows, cols, 1.0);
    match name {
        "matmul" => finite_diff_check(
            |t, v| {
                let o = t.matmul(v[0], v[1])?;
                project(t, o, seed)
            },
            &[r(3, 4), r(4, 5)],
            step,
        ),
        "add/mul/scale" => finite_diff_check(
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let m = t.mul(a, v[1])?;
                let o = t.scale(m, 0.7);
                project(t, o, seed)
            },
            &[r(3, 4), r(3, 4)],
            step,
        ),
        "gelu" => finite_diff_check(
            |t, v| {
                let o = t.gelu(v[0]);
                project(t, o, seed)
            },
            &[r(4, 6)],
            step,
        ),
        "rms_norm" => finite_diff_check(
            |t, v| {
                let o = t.rms_norm(v[0], v[1], 1e-5)?;
                project(t, o, seed)
            },
            &[r(3, 8), r(1, 8)],
            step,
        ),
        "softmax_rows" => finite_diff_check(
            |t, v| {
                let o = t.softmax_rows(v[0]);
                project(t, o, seed)
            },
            &[r(3, 7)],
            step,
        ),
        "causal_attention" => finite_diff_check(
            |t, v| {
                let o = t.causal_attention(v[0], v[1], v[2], 2)?;
                project(t, o, seed)
            },
            &[r(5, 8), r(5, 8), r(5, 8)],
            step,
        ),
        "cross_entropy" => finite_diff_check(
            |t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], &[true, false, true, true]),
            &[r(4, 6)],
            step,
        ),
        "embedding/slice/splice" => finite_diff_check(
            |t, v| {
                let e = t.embedding(v[0], &[3, 1, 3, 0, 2])?;
                let mid = t.slice_rows(e, 1, 3)?;
                let g = t.gelu(mid);
                let o = t.splice_rows(e, g, 2)?;
                let o = t.splice_rows(o, v[1], 0)?;
                project(t, o, seed)
            },
            &[r(5, 4), r(1, 4)],
            step,
        ),
        other => Err(LitError::Config(format!("no gradient check for op {other:?}"))),
    }
}

fn central<F: Fn(f64) -> Result<f64>>(f: F, step: f64) -> Result<f64> {
    Ok((f(step)? - f(-step)?) / (2.0 * step))
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

/// The full transformer with a randomly filled adapter: tape gradients of
/// the next-token loss with respect to every adapter coordinate.
pub fn check_adapter(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransformerModel::<f64>::new_random(ModelConfig::new(2, 8, 2, 12, 8), &mut rng)?;
    m.attach_lora(LoraSpec::on_layers(0..2, 2, 4.0), &mut rng)?;
    for p in m.adapter_mut().expect("attached").params_mut() {
        for x in p.data_mut() {
            *x = rng.random_range(-0.3..0.3);
        }
    }
    let tokens = [1usize, 5, 7, 3, 9];
    let targets = [5usize, 7, 3, 9, 0];
    let mask = [true, true, true, true, false];
    let loss_of = |model: &TransformerModel<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let bm = model.bind(&mut t, Trainable::Nothing);
        let (logits, _) = model.forward_on(&mut t, &bm, Input::Tokens(&tokens), None, &[])?;
        let l = t.cross_entropy(logits, &targets, &mask)?;
        Ok(t.scalar(l))
    };
    let mut t = Tape::new();
    let bm = m.bind(&mut t, Trainable::Adapter);
    let (logits, _) = m.forward_on(&mut t, &bm, Input::Tokens(&tokens), None, &[])?;
    let l = t.cross_entropy(logits, &targets, &mask)?;
    t.backward(l)?;
    let analytic: Vec<Vec<f64>> = bm
        .adapter_vars()
        .iter()
        .map(|&v| t.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for (ci, &a) in g.iter().enumerate() {
            let n = central(
                |h| {
                    let mut shifted = m.clone();
                    shifted.adapter_mut().expect("attached").params_mut()[pi].data_mut()[ci] += h;
                    loss_of(&shifted)
                },
                step,
            )?;
            worst = worst.max(rel(a, n));
        }
    }
    Ok(worst)
}

/// Steering gradient: derivative of the decoder's answer loss with respect
/// to the patched activations, through a frozen decoder with an adapter.
pub fn check_steer_gradient(seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dec = TransformerModel::<f64>::new_random(ModelConfig::new(2, 64, 4, 16, 16), &mut rng)?;
    dec.attach_lora(LoraSpec::on_layers(0..2, 2, 4.0), &mut rng)?;
    for p in dec.adapter_mut().expect("attached").params_mut() {
        for x in p.data_mut() {
            *x = rng.random_range(-0.1..0.1);
        }
    }
    let act = uniform(&mut rng, 2, 64, 1.0);
    let question = [3usize, 9, 4];
    let answer = [11usize, 12, 2];
    let mut tape = Tape::new();
    let v = tape.leaf(&act, true);
    let g = crate::steer::steer_gradient(&mut tape, &dec, v, &question, &answer, 0)?;
    let loss = |a: &Tensor<f64>| -> Result<f64> {
        let at = ActivationTensor {
            values: a.clone(),
            layer: 0,
            span: Span::new(0, 2),
            provenance: Provenance {
                model_hash: String::new(),
                prompt_hash: String::new(),
            },
        };
        patched_decoder_forward(&dec, &at, &question, Some(&answer), 0)?
            .loss
            .ok_or_else(|| LitError::State("answer loss missing".into()))
    };
    let mut worst = 0.0f64;
    for i in 0..act.len() {
        let n = central(
            |h| {
                let mut p = act.clone();
                p.data_mut()[i] += h;
                loss(&p)
            },
            step,
        )?;
        worst = worst.max(rel(g.data()[i], n));
    }
    Ok(worst)
}
