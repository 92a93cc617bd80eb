// SPDX-License-Identifier: Apache-2.0

//! Decoder-only transformer with residual-stream capture and patch hooks.
//!
//! Blocks are pre-norm (RMS) with learned absolute positions. The residual
//! stream *entering* block `l` is the hook point for both capture and
//! patching, so patching at layer 0 replaces the embeddings outright.

mod checkpoint;
mod lora;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use lora::{LoraAdapter, LoraFactors, LoraSpec, Module, Site};

use crate::autograd::{Tape, Var};
use crate::error::{LitError, Result};
use crate::patching::ActivationTensor;
use crate::tensor::{argmax, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub mlp_ratio: usize,
    pub positional: Positional,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn new(n_layers: usize, hidden: usize, n_heads: usize, vocab_size: usize, max_context: usize) -> Self {
        Self {
            n_layers,
            hidden,
            n_heads,
            vocab_size,
            max_context,
            mlp_ratio: 4,
            positional: Positional::Learned,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(LitError::Config("n_layers must be at least 1".into()));
        }
        if self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(LitError::Config(format!(
                "n_heads {} must divide hidden {}",
                self.n_heads, self.hidden
            )));
        }
        if self.max_context == 0 || self.vocab_size == 0 || self.mlp_ratio == 0 {
            return Err(LitError::Config("context, vocabulary and MLP ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    pub fn n_params(&self) -> usize {
        let d = self.hidden;
        let per_layer = 2 * d + 4 * d * d + 2 * d * self.mlp_hidden();
        self.vocab_size * d * 2 + self.max_context * d + d + self.n_layers * per_layer
    }
}

/// The six projections of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linear {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 6] = [
        Linear::Query,
        Linear::Key,
        Linear::Value,
        Linear::Output,
        Linear::Up,
        Linear::Down,
    ];

    /// `(fan_in, fan_out)`.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.hidden;
        match self {
            Linear::Up => (d, cfg.mlp_hidden()),
            Linear::Down => (cfg.mlp_hidden(), d),
            _ => (d, d),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Linear::Query => "wq",
            Linear::Key => "wk",
            Linear::Value => "wv",
            Linear::Output => "wo",
            Linear::Up => "w_up",
            Linear::Down => "w_down",
        }
    }
}

/// Half-open range of token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.start >= self.end || self.end > len {
            return Err(LitError::Span {
                start: self.start,
                end: self.end,
                len,
            });
        }
        Ok(())
    }
}

/// Read the residual stream entering block `layer` over `span`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureSpec {
    pub layer: usize,
    pub span: Span,
}

/// Overwrite the residual stream entering block `layer`, starting at
/// position `start`, with `source`.
#[derive(Clone, Debug)]
pub struct PatchConfig<T: Scalar = f32> {
    pub layer: usize,
    pub start: usize,
    pub source: ActivationTensor<T>,
}

impl<T: Scalar> PatchConfig<T> {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.start + self.source.n_tokens())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn linear(&self, l: Linear) -> &Tensor<T> {
        match l {
            Linear::Query => &self.wq,
            Linear::Key => &self.wk,
            Linear::Value => &self.wv,
            Linear::Output => &self.wo,
            Linear::Up => &self.w_up,
            Linear::Down => &self.w_down,
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 8] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Toy decoder-only language model; also serves as the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Tensor<T>,
    pub unembed: Tensor<T>,
    adapter: Option<LoraAdapter<T>>,
}

/// Which leaves of a bound model receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapter,
}

#[derive(Clone, Debug)]
struct BoundLayer {
    attn_norm: Var,
    mlp_norm: Var,
    linears: [Var; 6],
}

/// A model's weights registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    final_norm: Var,
    unembed: Var,
    adapter: BTreeMap<Site, (Var, Var)>,
    lora_scale: f64,
}

impl BoundModel {
    /// Base leaves in [`TransformerModel::params`] order.
    pub fn base_vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.extend(&l.linears[..4]);
            out.push(l.mlp_norm);
            out.extend(&l.linears[4..]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }

    /// Adapter leaves in [`LoraAdapter::params`] order.
    pub fn adapter_vars(&self) -> Vec<Var> {
        self.adapter.values().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// What enters block 0.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    /// Full residual input to block 0 (token and position terms included).
    Residual(Var),
}

/// Patch expressed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapePatch {
    pub layer: usize,
    pub start: usize,
    pub source: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub captured: Option<Tensor<T>>,
}

impl<T: Scalar> TransformerModel<T> {
    pub fn new_random(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let f = config.mlp_hidden();
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let lin = |fan_in: usize, fan_out: usize, gain: f64, rng: &mut _| {
            Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)
        };
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: Tensor::filled(&[1, d], T::one()),
                wq: lin(d, d, 1.0, rng),
                wk: lin(d, d, 1.0, rng),
                wv: lin(d, d, 1.0, rng),
                wo: lin(d, d, resid, rng),
                mlp_norm: Tensor::filled(&[1, d], T::one()),
                w_up: lin(d, f, 1.0, rng),
                w_down: lin(f, d, resid, rng),
            })
            .collect();
        Ok(Self {
            tok_emb: Tensor::randn(&[config.vocab_size, d], 0.5, rng),
            pos_emb: Tensor::randn(&[config.max_context, d], 0.1, rng),
            layers,
            final_norm: Tensor::filled(&[1, d], T::one()),
            unembed: lin(d, config.vocab_size, 1.0, rng),
            adapter: None,
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembed: self.unembed.cast(),
            adapter: self.adapter.as_ref().map(LoraAdapter::cast),
        }
    }

    /// Base weights with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    /// SHA-256 over the config and base weights (adapter excluded).
    pub fn base_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let mut buf = Vec::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            buf.clear();
            t.data().iter().for_each(|&x| x.write_le(&mut buf));
            h.update(&buf);
        }
        crate::hex(&h.finalize())
    }

    pub fn adapter(&self) -> Option<&LoraAdapter<T>> {
        self.adapter.as_ref()
    }

    pub fn adapter_mut(&mut self) -> Option<&mut LoraAdapter<T>> {
        self.adapter.as_mut()
    }

    pub fn attach_lora(&mut self, spec: LoraSpec, rng: &mut impl Rng) -> Result<()> {
        let adapter = LoraAdapter::init(spec, &self.config, rng)?;
        self.attach_adapter(adapter)
    }

    pub fn attach_adapter(&mut self, adapter: LoraAdapter<T>) -> Result<()> {
        if self.adapter.is_some() {
            return Err(LitError::State("an adapter is already attached".into()));
        }
        for (site, f) in &adapter.factors {
            if site.layer >= self.config.n_layers {
                return Err(LitError::Layer {
                    layer: site.layer,
                    n_layers: self.config.n_layers,
                });
            }
            let (fi, fo) = site.linear.dims(&self.config);
            if f.a.shape() != [fi, adapter.spec.rank] || f.b.shape() != [adapter.spec.rank, fo] {
                return Err(LitError::Shape {
                    op: "attach_adapter",
                    lhs: f.a.shape().to_vec(),
                    rhs: vec![fi, adapter.spec.rank],
                });
            }
        }
        self.adapter = Some(adapter);
        Ok(())
    }

    pub fn detach_lora(&mut self) -> Option<LoraAdapter<T>> {
        self.adapter.take()
    }

    /// Copy of the base weights with no adapter.
    pub fn base_clone(&self) -> Self {
        let mut m = self.clone();
        m.adapter = None;
        m
    }

    /// Registers all weights on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: Trainable) -> BoundModel {
        let base = trainable == Trainable::Base;
        let tok_emb = tape.leaf(&self.tok_emb, base);
        let pos_emb = tape.leaf(&self.pos_emb, base);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let attn_norm = tape.leaf(&l.attn_norm, base);
                let wq = tape.leaf(&l.wq, base);
                let wk = tape.leaf(&l.wk, base);
                let wv = tape.leaf(&l.wv, base);
                let wo = tape.leaf(&l.wo, base);
                let mlp_norm = tape.leaf(&l.mlp_norm, base);
                let w_up = tape.leaf(&l.w_up, base);
                let w_down = tape.leaf(&l.w_down, base);
                BoundLayer {
                    attn_norm,
                    mlp_norm,
                    linears: [wq, wk, wv, wo, w_up, w_down],
                }
            })
            .collect();
        let final_norm = tape.leaf(&self.final_norm, base);
        let unembed = tape.leaf(&self.unembed, base);
        let train_adapter = trainable == Trainable::Adapter;
        let (adapter, lora_scale) = match &self.adapter {
            Some(ad) => (
                ad.factors
                    .iter()
                    .map(|(s, f)| (*s, (tape.leaf(&f.a, train_adapter), tape.leaf(&f.b, train_adapter))))
                    .collect(),
                ad.spec.scale(),
            ),
            None => (BTreeMap::new(), 0.0),
        };
        BoundModel {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            unembed,
            adapter,
            lora_scale,
        }
    }

    fn linear(&self, tape: &mut Tape<T>, bm: &BoundModel, layer: usize, which: Linear, x: Var) -> Result<Var> {
        let idx = Linear::ALL.iter().position(|&l| l == which).expect("known linear");
        let base = tape.matmul(x, bm.layers[layer].linears[idx])?;
        match bm.adapter.get(&Site { layer, linear: which }) {
            Some(&(a, b)) => {
                let xa = tape.matmul(x, a)?;
                let xab = tape.matmul(xa, b)?;
                let delta = tape.scale(xab, T::of(bm.lora_scale));
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }

    fn block(&self, tape: &mut Tape<T>, bm: &BoundModel, l: usize, h: Var) -> Result<Var> {
        let eps = self.config.norm_eps;
        let bl = &bm.layers[l];
        let a = tape.rms_norm(h, bl.attn_norm, eps)?;
        let q = self.linear(tape, bm, l, Linear::Query, a)?;
        let k = self.linear(tape, bm, l, Linear::Key, a)?;
        let v = self.linear(tape, bm, l, Linear::Value, a)?;
        let att = tape.causal_attention(q, k, v, self.config.n_heads)?;
        let o = self.linear(tape, bm, l, Linear::Output, att)?;
        let h = tape.add(h, o)?;
        let m = tape.rms_norm(h, bm.layers[l].mlp_norm, eps)?;
        let up = self.linear(tape, bm, l, Linear::Up, m)?;
        let act = tape.gelu(up);
        let down = self.linear(tape, bm, l, Linear::Down, act)?;
        tape.add(h, down)
    }

    /// Forward pass on a caller-owned tape.
    ///
    /// Returns the logits and one captured block per entry of `captures`.
    pub fn forward_on(
        &self,
        tape: &mut Tape<T>,
        bm: &BoundModel,
        input: Input<'_>,
        patch: Option<TapePatch>,
        captures: &[CaptureSpec],
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        let mut h = match input {
            Input::Tokens(ids) => {
                if ids.is_empty() {
                    return Err(LitError::Precondition("empty token sequence".into()));
                }
                if ids.len() > cfg.max_context {
                    return Err(LitError::ContextOverflow {
                        len: ids.len(),
                        max: cfg.max_context,
                    });
                }
                let tok = tape.embedding(bm.tok_emb, ids)?;
                let pos = tape.slice_rows(bm.pos_emb, 0, ids.len())?;
                tape.add(tok, pos)?
            }
            Input::Residual(v) => {
                let (t, d) = tape.dims(v);
                if d != cfg.hidden {
                    return Err(LitError::HiddenSize {
                        got: d,
                        expected: cfg.hidden,
                    });
                }
                if t == 0 || t > cfg.max_context {
                    return Err(LitError::ContextOverflow {
                        len: t,
                        max: cfg.max_context,
                    });
                }
                v
            }
        };
        let seq_len = tape.dims(h).0;
        for c in captures {
            if c.layer >= cfg.n_layers {
                return Err(LitError::Layer {
                    layer: c.layer,
                    n_layers: cfg.n_layers,
                });
            }
            c.span.check(seq_len)?;
        }
        if let Some(p) = &patch {
            if p.layer >= cfg.n_layers {
                return Err(LitError::Layer {
                    layer: p.layer,
                    n_layers: cfg.n_layers,
                });
            }
            let (n, d) = tape.dims(p.source);
            if d != cfg.hidden {
                return Err(LitError::HiddenSize {
                    got: d,
                    expected: cfg.hidden,
                });
            }
            let span = Span::new(p.start, p.start + n);
            span.check(seq_len)?;
            if captures.iter().any(|c| c.layer == p.layer && c.span.overlaps(&span)) {
                return Err(LitError::Precedence { layer: p.layer });
            }
        }

        let mut captured: Vec<Option<Var>> = vec![None; captures.len()];
        for l in 0..cfg.n_layers {
            if let Some(p) = patch.filter(|p| p.layer == l) {
                h = tape.splice_rows(h, p.source, p.start)?;
            }
            for (slot, c) in captured.iter_mut().zip(captures) {
                if c.layer == l {
                    *slot = Some(tape.slice_rows(h, c.span.start, c.span.end)?);
                }
            }
            h = self.block(tape, bm, l, h)?;
        }
        let f = tape.rms_norm(h, bm.final_norm, cfg.norm_eps)?;
        let logits = tape.matmul(f, bm.unembed)?;
        Ok((logits, captured.into_iter().map(|c| c.expect("every capture layer visited")).collect()))
    }

    /// Inference forward with optional capture and patch.
    pub fn forward(
        &self,
        tokens: &[usize],
        capture: Option<&CaptureSpec>,
        patch: Option<&PatchConfig<T>>,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, Trainable::Nothing);
        let tp = patch.map(|p| {
            let (n, d) = p.source.values.dims2().expect("activation is 2-D");
            TapePatch {
                layer: p.layer,
                start: p.start,
                source: tape.leaf_raw(n, d, p.source.values.data().to_vec(), false),
            }
        });
        let caps: Vec<CaptureSpec> = capture.copied().into_iter().collect();
        let (logits, captured) = self.forward_on(&mut tape, &bm, Input::Tokens(tokens), tp, &caps)?;
        Ok(ForwardOutput {
            logits: tape.tensor(logits),
            captured: captured.first().map(|&v| tape.tensor(v)),
        })
    }

    /// Forward pass from an explicit block-0 residual input.
    pub fn forward_residual(&self, residual: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bm = self.bind(&mut tape, Trainable::Nothing);
        let input = tape.leaf(residual, false);
        let (logits, _) = self.forward_on(&mut tape, &bm, Input::Residual(input), None, &[])?;
        Ok(tape.tensor(logits))
    }

    /// Sum of next-token log-probabilities of `tokens[1..]` given prefixes.
    pub fn sequence_log_likelihood(&self, tokens: &[usize]) -> Result<f64> {
        let out = self.forward(tokens, None, None)?;
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for t in 0..tokens.len().saturating_sub(1) {
            let row = &out.logits.data()[t * v..(t + 1) * v];
            let lse = crate::tensor::log_sum_exp(row);
            total += (row[tokens[t + 1]] - lse).as_f64();
        }
        Ok(total)
    }
}

/// Greedy decoding. Returns the prompt followed by the generated tokens;
/// generation stops after `max_new` tokens or right after emitting `eos`.
pub fn generate_greedy<T: Scalar>(
    model: &TransformerModel<T>,
    prompt: &[usize],
    max_new: usize,
    patch: Option<&PatchConfig<T>>,
    eos: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.len() + max_new > model.config.max_context {
        return Err(LitError::ContextOverflow {
            len: prompt.len() + max_new,
            max: model.config.max_context,
        });
    }
    let mut seq = prompt.to_vec();
    let v = model.config.vocab_size;
    for _ in 0..max_new {
        let out = model.forward(&seq, None, patch)?;
        let last = seq.len() - 1;
        let next = argmax(&out.logits.data()[last * v..(last + 1) * v]);
        seq.push(next);
        if Some(next) == eos {
            break;
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> TransformerModel<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TransformerModel::new_random(ModelConfig::new(4, 16, 2, 11, 12), &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(0, 8, 2, 5, 4).validate().is_err());
        assert!(ModelConfig::new(1, 9, 2, 5, 4).validate().is_err());
        assert!(ModelConfig::new(1, 8, 2, 5, 0).validate().is_err());
        assert!(ModelConfig::new(1, 8, 2, 5, 4).validate().is_ok());
    }

    #[test]
    fn logits_are_finite() {
        let m = small(0);
        let out = m.forward(&[1, 2, 3, 4, 5], None, None).unwrap();
        assert_eq!(out.logits.shape(), &[5, 11]);
        assert!(out.logits.is_finite());
    }

    #[test]
    fn context_overflow() {
        let m = small(0);
        let toks = vec![1; 13];
        assert!(matches!(
            m.forward(&toks, None, None),
            Err(LitError::ContextOverflow { .. })
        ));
        assert!(generate_greedy(&m, &[1, 2], 11, None, None).is_err());
    }

    #[test]
    fn capture_at_zero_is_embedding_plus_position() {
        let m = small(1);
        let toks = [3, 1, 4, 1];
        let cap = CaptureSpec {
            layer: 0,
            span: Span::new(0, 4),
        };
        let out = m.forward(&toks, Some(&cap), None).unwrap();
        let got = out.captured.unwrap();
        for (i, &t) in toks.iter().enumerate() {
            for j in 0..16 {
                let want = m.tok_emb.data()[t * 16 + j] + m.pos_emb.data()[i * 16 + j];
                assert_eq!(got.data()[i * 16 + j], want);
            }
        }
    }

    #[test]
    fn causality() {
        let m = small(2);
        let a = m.forward(&[1, 2, 3, 4, 5, 6], None, None).unwrap();
        let b = m.forward(&[1, 2, 3, 9, 5, 6], None, None).unwrap();
        let v = 11;
        assert_eq!(&a.logits.data()[..3 * v], &b.logits.data()[..3 * v]);
        assert_ne!(&a.logits.data()[3 * v..4 * v], &b.logits.data()[3 * v..4 * v]);
    }

    #[test]
    fn overlapping_patch_and_capture_is_rejected() {
        let m = small(3);
        let toks = [1, 2, 3, 4];
        let cap = CaptureSpec {
            layer: 2,
            span: Span::new(0, 2),
        };
        let src = m.forward(&toks, Some(&cap), None).unwrap().captured.unwrap();
        let mut tape = Tape::new();
        let bm = m.bind(&mut tape, Trainable::Nothing);
        let s = tape.leaf(&src, false);
        let patch = TapePatch {
            layer: 2,
            start: 1,
            source: s,
        };
        let err = m
            .forward_on(&mut tape, &bm, Input::Tokens(&toks), Some(patch), &[cap])
            .unwrap_err();
        assert!(matches!(err, LitError::Precedence { layer: 2 }));
    }

    #[test]
    fn double_attach_is_a_state_error() {
        let mut m = small(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        m.attach_lora(LoraSpec::on_layers(0..4, 2, 4.0), &mut rng).unwrap();
        assert!(matches!(
            m.attach_lora(LoraSpec::on_layers(0..4, 2, 4.0), &mut rng),
            Err(LitError::State(_))
        ));
        assert!(m.detach_lora().is_some());
        assert!(m.detach_lora().is_none());
    }

    #[test]
    fn adapter_on_missing_layer_is_rejected() {
        let mut m = small(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(m.attach_lora(LoraSpec::on_layers([7], 2, 4.0), &mut rng).is_err());
    }

    #[test]
    fn max_new_zero_returns_prompt() {
        let m = small(6);
        assert_eq!(generate_greedy(&m, &[1, 2, 3], 0, None, None).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn forced_argmax_repeats() {
        // Blocks write nothing and every token embeds to the same vector, so
        // the final hidden state is constant and column `c` of the unembedding
        // can be aligned with it.
        let mut m = small(7);
        let (d, v, c) = (16, 11, 5);
        for l in &mut m.layers {
            l.wo.data_mut().iter_mut().for_each(|x| *x = 0.0);
            l.w_down.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        m.pos_emb.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let e: Vec<f32> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { -0.5 }).collect();
        for t in 0..v {
            m.tok_emb.data_mut()[t * d..(t + 1) * d].copy_from_slice(&e);
        }
        let un = m.unembed.data_mut();
        un.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..d {
            un[j * v + c] = e[j];
        }
        let out = generate_greedy(&m, &[1, 2], 4, None, None).unwrap();
        assert_eq!(&out[2..], &[c; 4]);
        let stopped = generate_greedy(&m, &[1, 2], 4, None, Some(c)).unwrap();
        assert_eq!(stopped, vec![1, 2, c]);
    }
}
