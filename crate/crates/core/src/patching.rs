// SPDX-License-Identifier: Apache-2.0

//! Capturing target activations and running the decoder with them patched
//! over a placeholder run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::data::{ACT, PAD};
use crate::error::{LitError, Result};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{BoundModel, CaptureSpec, Input, Span, TapePatch, Trainable, TransformerModel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub model_hash: String,
    pub prompt_hash: String,
}

/// Residual-stream slice `[n_tokens × hidden]` entering block `layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor<T: Scalar = f32> {
    pub values: Tensor<T>,
    pub layer: usize,
    pub span: Span,
    pub provenance: Provenance,
}

impl<T: Scalar> ActivationTensor<T> {
    pub fn n_tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn prompt_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u64).to_le_bytes());
    }
    crate::hex(&h.finalize())
}

/// Residual input to block `k` of `target` over `span` of `prompt`.
pub fn capture<T: Scalar>(
    target: &TransformerModel<T>,
    prompt: &[usize],
    k: usize,
    span: Span,
) -> Result<ActivationTensor<T>> {
    let out = target.forward(prompt, Some(&CaptureSpec { layer: k, span }), None)?;
    Ok(ActivationTensor {
        values: out.captured.expect("capture requested"),
        layer: k,
        span,
        provenance: Provenance {
            model_hash: target.base_hash(),
            prompt_hash: prompt_hash(prompt),
        },
    })
}

/// Decoder token layout for `n` patched positions: the input ids, next-token
/// targets and a loss mask selecting the rows that predict answer tokens.
pub fn decoder_layout(n: usize, question: &[usize], answer: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut input = vec![ACT; n];
    input.extend_from_slice(question);
    let answer_start = input.len();
    input.extend_from_slice(answer);
    let t = input.len();
    let targets = (0..t).map(|i| if i + 1 < t { input[i + 1] } else { PAD }).collect();
    let mask = (0..t).map(|i| i + 1 >= answer_start && i + 1 < t).collect();
    (input, targets, mask)
}

fn check_fit(decoder_hidden: usize, max_context: usize, n: usize, d: usize, total: usize) -> Result<()> {
    if d != decoder_hidden {
        return Err(LitError::HiddenSize {
            got: d,
            expected: decoder_hidden,
        });
    }
    if n == 0 {
        return Err(LitError::Precondition("activation has no tokens".into()));
    }
    if total > max_context {
        return Err(LitError::ContextOverflow { len: total, max: max_context });
    }
    Ok(())
}

/// Patched decoder pass on a caller-owned tape with the activation given as
/// a tape variable, so gradients can flow into it. Returns the logits and,
/// when `answer` is given, the mean answer cross-entropy.
pub fn patched_forward_on<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &TransformerModel<T>,
    bound: &BoundModel,
    act: Var,
    question: &[usize],
    answer: Option<&[usize]>,
    ell: usize,
) -> Result<(Var, Option<Var>)> {
    let (n, d) = tape.dims(act);
    let answer_len = answer.map_or(0, <[usize]>::len);
    check_fit(
        decoder.config.hidden,
        decoder.config.max_context,
        n,
        d,
        n + question.len() + answer_len,
    )?;
    let (input, targets, mask) = decoder_layout(n, question, answer.unwrap_or(&[]));
    let patch = TapePatch {
        layer: ell,
        start: 0,
        source: act,
    };
    let (logits, _) = decoder.forward_on(tape, bound, Input::Tokens(&input), Some(patch), &[])?;
    let loss = match answer {
        Some(_) => Some(tape.cross_entropy(logits, &targets, &mask)?),
        None => None,
    };
    Ok((logits, loss))
}

#[derive(Clone, Debug)]
pub struct PatchedOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub loss: Option<f64>,
}

/// Inference wrapper around [`patched_forward_on`].
pub fn patched_decoder_forward<T: Scalar>(
    decoder: &TransformerModel<T>,
    act: &ActivationTensor<T>,
    question: &[usize],
    answer: Option<&[usize]>,
    ell: usize,
) -> Result<PatchedOutput<T>> {
    let mut tape = Tape::new();
    let bound = decoder.bind(&mut tape, Trainable::Nothing);
    let v = tape.leaf(&act.values, false);
    let (logits, loss) = patched_forward_on(&mut tape, decoder, &bound, v, question, answer, ell)?;
    Ok(PatchedOutput {
        logits: tape.tensor(logits),
        loss: loss.map(|l| tape.scalar(l).as_f64()),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    dtype: String,
    shape: Vec<usize>,
    layer: usize,
    span: Span,
    provenance: Provenance,
}

/// Writes a one-line JSON header followed by raw little-endian values.
pub fn save_activation<T: Scalar>(path: &Path, act: &ActivationTensor<T>) -> Result<()> {
    let header = DumpHeader {
        dtype: T::DTYPE.into(),
        shape: act.values.shape().to_vec(),
        layer: act.layer,
        span: act.span,
        provenance: act.provenance.clone(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    act.values.data().iter().for_each(|&x| x.write_le(&mut out));
    fs::write(path, out)?;
    Ok(())
}

pub fn load_activation<T: Scalar>(path: &Path) -> Result<ActivationTensor<T>> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| LitError::Checkpoint("activation dump has no header line".into()))?;
    let h: DumpHeader = serde_json::from_slice(&bytes[..nl])?;
    if h.dtype != T::DTYPE {
        return Err(LitError::Checkpoint(format!("dtype {} requested as {}", h.dtype, T::DTYPE)));
    }
    let raw = &bytes[nl + 1..];
    let n: usize = h.shape.iter().product();
    if raw.len() != n * T::BYTES {
        return Err(LitError::Checkpoint("activation dump length does not match header".into()));
    }
    Ok(ActivationTensor {
        values: Tensor::new(h.shape, raw.chunks_exact(T::BYTES).map(T::read_le).collect())?,
        layer: h.layer,
        span: h.span,
        provenance: h.provenance,
    })
}
