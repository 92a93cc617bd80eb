// SPDX-License-Identifier: Apache-2.0

//! Target pretraining, decoder adapter training, the layer sweep and the
//! scaling protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{
    build_pretraining_corpus, render_datum, Category, DatumType, LatentDatum, QaKind, Split, Tokenizer,
};
use crate::error::{LitError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::patching::{capture, patched_forward_on, ActivationTensor};
use crate::reader::answer_tokens;
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{Input, LoraAdapter, LoraSpec, ModelConfig, Trainable, TransformerModel};

/// Gradients of `vars` after a backward pass, zeros where none reached.
fn grads_of<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .map_or_else(|| vec![T::zero(); tape.value(v).len()], <[T]>::to_vec)
        })
        .collect()
}

fn accumulate<T: Scalar>(acc: &mut [Vec<T>], g: &[Vec<T>]) {
    for (a, g) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(g).for_each(|(a, &g)| *a += g);
    }
}

fn scale_all<T: Scalar>(acc: &mut [Vec<T>], s: f64) {
    let s = T::of(s);
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x *= s));
}

// ---------------------------------------------------------------------------
// Target pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTrainConfig {
    pub model: ModelConfig,
    pub train_dialogs: usize,
    pub heldout_dialogs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub eval_every: usize,
    /// The gate is held-out loss ≤ `gate_ratio` × the grammar entropy.
    pub gate_ratio: f64,
    pub seed: u64,
}

impl TargetTrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            train_dialogs: 20_000,
            heldout_dialogs: 500,
            max_steps: 1500,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 100,
            eval_every: 250,
            gate_ratio: 1.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub config: TargetTrainConfig,
    pub steps: usize,
    /// Held-out next-token loss, nats per predicted token.
    pub heldout_loss: f64,
    /// Grammar entropy of the held-out set, nats per predicted token.
    pub entropy: f64,
    pub gate: f64,
    pub gate_passed: bool,
    /// First evaluation step at which the gate held.
    pub gate_step: Option<usize>,
    /// `(step, held-out loss)` at every evaluation.
    pub curve: Vec<(usize, f64)>,
    pub base_hash: String,
    pub wall_clock_secs: f64,
}

/// Mean next-token loss per predicted token over `seqs`.
pub fn sequence_loss<T: Scalar>(model: &TransformerModel<T>, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        total -= model.sequence_log_likelihood(s)?;
        count += s.len() - 1;
    }
    Ok(total / count as f64)
}

/// Pretrains a fresh target on the toy language for `max_steps` steps,
/// checking the held-out gate every `eval_every` steps. The learning rate
/// warms up linearly and then follows a cosine down to a tenth.
pub fn train_target<T: Scalar>(cfg: &TargetTrainConfig) -> Result<(TransformerModel<T>, TargetReport)> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 || cfg.train_dialogs == 0 || cfg.heldout_dialogs == 0 {
        return Err(LitError::Config("batch size and dialog counts must be positive".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TransformerModel::<T>::new_random(cfg.model.clone(), &mut rng)?;
    let train: Vec<Vec<usize>> = build_pretraining_corpus(cfg.seed.wrapping_mul(2).wrapping_add(1), cfg.train_dialogs)
        .into_iter()
        .map(|s| s.tokens)
        .collect();
    let held = build_pretraining_corpus(cfg.seed.wrapping_mul(2).wrapping_add(2), cfg.heldout_dialogs);
    let predicted: usize = held.iter().map(|s| s.tokens.len() - 1).sum();
    let entropy = held.iter().map(|s| s.entropy_nats).sum::<f64>() / predicted as f64;
    let gate = cfg.gate_ratio * entropy;
    let held: Vec<Vec<usize>> = held.into_iter().map(|s| s.tokens).collect();
    if let Some(s) = train.iter().chain(&held).find(|s| s.len() > cfg.model.max_context) {
        return Err(LitError::ContextOverflow {
            len: s.len(),
            max: cfg.model.max_context,
        });
    }

    let sizes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &sizes,
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut curve = Vec::new();
    let mut last = f64::INFINITY;
    let mut gate_step = None;
    let mut step = 0;
    while step < cfg.max_steps {
        let mut acc: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
        let mut ids = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            ids.push(i);
            let s = &train[i];
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape, Trainable::Base);
            let (logits, _) = model.forward_on(&mut tape, &bm, Input::Tokens(&s[..s.len() - 1]), None, &[])?;
            let loss = tape.cross_entropy(logits, &s[1..], &vec![true; s.len() - 1])?;
            if !tape.scalar(loss).as_f64().is_finite() {
                return Err(LitError::NonFinite {
                    step,
                    datums: ids.iter().map(|i| format!("pretrain-{i}")).collect(),
                });
            }
            tape.backward(loss)?;
            accumulate(&mut acc, &grads_of(&tape, &bm.base_vars()));
        }
        scale_all(&mut acc, 1.0 / cfg.batch_size as f64);
        opt.cfg.lr = cfg.lr * lr_factor(step, cfg.warmup_steps, cfg.max_steps);
        opt.step(&mut model.params_mut(), &acc);
        step += 1;
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            last = sequence_loss(&model, &held)?;
            curve.push((step, last));
            if last <= gate && gate_step.is_none() {
                gate_step = Some(step);
            }
        }
    }
    let report = TargetReport {
        config: cfg.clone(),
        steps: step,
        heldout_loss: last,
        entropy,
        gate,
        gate_passed: last <= gate,
        gate_step,
        curve,
        base_hash: model.base_hash(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

fn lr_factor(step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}

// ---------------------------------------------------------------------------
// Decoder training

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub ell: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fraction: f64,
    pub precision: Precision,
    /// Answer budget when scoring eval accuracy; 0 skips accuracy.
    pub max_answer_tokens: usize,
}

/// Input of the last block. Shallow toy targets move the control into the
/// stimulus positions late, so earlier reads see little of it.
pub fn default_read_layer(cfg: &ModelConfig) -> usize {
    cfg.n_layers.saturating_sub(1)
}

impl TrainConfig {
    /// Defaults for a model: read from the input of the last block, write
    /// at layer 0.
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            k: default_read_layer(cfg),
            ell: 0,
            rank: 8,
            alpha: 16.0,
            lr: 1e-3,
            batch_size: 32,
            epochs: 8,
            seed: 0,
            fraction: 1.0,
            precision: Precision::F32,
            max_answer_tokens: 8,
        }
    }

    fn validate(&self, target: &ModelConfig, decoder: &ModelConfig) -> Result<()> {
        if target.hidden != decoder.hidden {
            return Err(LitError::HiddenSize {
                got: target.hidden,
                expected: decoder.hidden,
            });
        }
        if self.k >= target.n_layers {
            return Err(LitError::Layer {
                layer: self.k,
                n_layers: target.n_layers,
            });
        }
        if self.ell >= decoder.n_layers {
            return Err(LitError::Layer {
                layer: self.ell,
                n_layers: decoder.n_layers,
            });
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(LitError::Config(format!("fraction {} not in (0, 1]", self.fraction)));
        }
        if self.batch_size == 0 || self.rank == 0 {
            return Err(LitError::Config("batch size and rank must be positive".into()));
        }
        Ok(())
    }
}

/// Reference decoder hyperparameters of the full-scale setup, echoed into
/// reports next to the toy values actually used.
pub fn reference_hyperparams() -> serde_json::Value {
    serde_json::json!({
        "decoder_lora_rank": 32,
        "decoder_lora_alpha": 64,
        "decoder_lr": 1e-4,
        "decoder_batch_size": 128,
        "best_read_layer": 15,
        "best_write_layer": 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: Option<f64>,
    pub n: usize,
    pub by_category: BTreeMap<String, f64>,
    pub by_datum_type: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub reference: serde_json::Value,
    pub n_train_controls: usize,
    pub n_train_examples: usize,
    pub n_eval_examples: usize,
    /// Loss on a fixed subset of training examples before and after.
    pub probe_loss_before: f64,
    pub probe_loss_after: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_eval_loss: f64,
    /// Descriptive-question accuracy on eval controls, best-epoch adapter.
    pub eval_accuracy: Accuracy,
    pub base_hash: String,
    pub adapter_hash: String,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// The report with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// One (activation, question, answer) training item.
#[derive(Clone, Debug)]
pub struct Example<T: Scalar = f32> {
    pub datum_id: String,
    pub category: Category,
    pub datum_type: DatumType,
    pub kind: QaKind,
    /// Token id of the behavior key a correct answer contains.
    pub key_id: usize,
    pub act: Tensor<T>,
    /// `<q>` question `<a>`.
    pub question: Vec<usize>,
    /// Answer then `<eos>`.
    pub answer: Vec<usize>,
}

/// Renders datums and captures their activations from `target` at `k`, once
/// per datum.
pub fn build_examples<T: Scalar>(
    target: &TransformerModel<T>,
    tok: &Tokenizer,
    datums: &[&LatentDatum],
    k: usize,
) -> Result<Vec<Example<T>>> {
    let mut out = Vec::new();
    for d in datums {
        let r = render_datum(d, tok)?;
        let act = capture(target, &r.target_tokens, k, r.span)?;
        let key = d.behavior.key_token();
        let key_id = tok.id(key).ok_or_else(|| LitError::OutOfVocab(key.to_string()))?;
        for item in r.items {
            out.push(Example {
                datum_id: d.id.clone(),
                category: d.category,
                datum_type: d.datum_type,
                kind: item.kind,
                key_id,
                act: act.values.clone(),
                question: item.question,
                answer: item.answer,
            });
        }
    }
    Ok(out)
}

/// Keeps `fraction` of the training controls of each category, chosen by
/// control id under `seed`. Eval datums are kept unchanged.
pub fn sample_fraction<'a>(datums: &'a [LatentDatum], fraction: f64, seed: u64) -> Vec<&'a LatentDatum> {
    let mut by_cat: BTreeMap<Category, BTreeSet<&str>> = BTreeMap::new();
    for d in datums.iter().filter(|d| d.split == Split::Train) {
        by_cat.entry(d.category).or_default().insert(&d.control_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: BTreeSet<&str> = BTreeSet::new();
    for ids in by_cat.values() {
        let mut ids: Vec<&str> = ids.iter().copied().collect();
        ids.shuffle(&mut rng);
        let n = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len());
        keep.extend(&ids[..n]);
    }
    datums
        .iter()
        .filter(|d| d.split == Split::Eval || keep.contains(d.control_id.as_str()))
        .collect()
}

/// Answer cross-entropy of one example.
fn example_loss<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &TransformerModel<T>,
    trainable: Trainable,
    ex: &Example<T>,
    ell: usize,
) -> Result<(Var, crate::transformer::BoundModel)> {
    let bm = decoder.bind(tape, trainable);
    let act = tape.leaf(&ex.act, false);
    let (_, loss) = patched_forward_on(tape, decoder, &bm, act, &ex.question, Some(&ex.answer), ell)?;
    Ok((loss.expect("answer supplied"), bm))
}

/// Mean answer loss over `examples`, no gradients.
pub fn mean_loss<T: Scalar>(decoder: &TransformerModel<T>, examples: &[Example<T>], ell: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let (loss, _) = example_loss(&mut tape, decoder, Trainable::Nothing, ex, ell)?;
        total += tape.scalar(loss).as_f64();
    }
    Ok(total / examples.len() as f64)
}

/// Descriptive-question accuracy: the greedy answer must contain the
/// behavior key token.
pub fn descriptive_accuracy<T: Scalar>(
    decoder: &TransformerModel<T>,
    examples: &[Example<T>],
    ell: usize,
    max_new: usize,
) -> Result<Accuracy> {
    let mut by_cat: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut hit, mut n) = (0, 0);
    for ex in examples.iter().filter(|e| e.kind == QaKind::Descriptive) {
        let act = ActivationTensor {
            values: ex.act.clone(),
            layer: 0,
            span: crate::transformer::Span::new(0, ex.act.shape()[0]),
            provenance: crate::patching::Provenance {
                model_hash: String::new(),
                prompt_hash: String::new(),
            },
        };
        // strip the <q> ... <a> framing that answer_tokens adds back
        let q = &ex.question[1..ex.question.len() - 1];
        let ans = answer_tokens(decoder, &act, q, max_new, ell)?;
        let text_ok = ans.contains(&ex.key_id);
        n += 1;
        hit += text_ok as usize;
        for (map, key) in [
            (&mut by_cat, ex.category.name().to_string()),
            (&mut by_type, ex.datum_type.name().to_string()),
        ] {
            let e = map.entry(key).or_default();
            e.0 += text_ok as usize;
            e.1 += 1;
        }
    }
    let frac = |m: BTreeMap<String, (usize, usize)>| m.into_iter().map(|(k, (h, t))| (k, h as f64 / t as f64)).collect();
    Ok(Accuracy {
        overall: (n > 0).then(|| hit as f64 / n as f64),
        n,
        by_category: frac(by_cat),
        by_datum_type: frac(by_type),
    })
}

/// Trains the decoder's adapter on the training split of `datums`.
///
/// `decoder` must be an unadapted copy of `target` (checked by weight hash);
/// an adapter with the configured rank and alpha is attached on the attention
/// and MLP modules of every layer. Only the adapter changes. After the last
/// epoch the adapter from the epoch with the lowest eval loss is kept
/// attached and returned.
pub fn train_decoder<T: Scalar>(
    decoder: &mut TransformerModel<T>,
    target: &TransformerModel<T>,
    tok: &Tokenizer,
    datums: &[LatentDatum],
    cfg: &TrainConfig,
) -> Result<(LoraAdapter<T>, TrainReport)> {
    let started = Instant::now();
    cfg.validate(&target.config, &decoder.config)?;
    if cfg.precision.name() != T::DTYPE {
        return Err(LitError::Config(format!(
            "config precision {} does not match model dtype {}",
            cfg.precision.name(),
            T::DTYPE
        )));
    }
    if decoder.adapter().is_some() {
        return Err(LitError::State("decoder already has an adapter attached".into()));
    }
    let base_hash = decoder.base_hash();
    if base_hash != target.base_hash() {
        return Err(LitError::Precondition("decoder is not a copy of the target".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = LoraSpec::on_layers(0..decoder.config.n_layers, cfg.rank, cfg.alpha);
    decoder.attach_lora(spec, &mut rng)?;

    let chosen = sample_fraction(datums, cfg.fraction, cfg.seed);
    let train_d: Vec<&LatentDatum> = chosen.iter().copied().filter(|d| d.split == Split::Train).collect();
    let eval_d: Vec<&LatentDatum> = chosen.iter().copied().filter(|d| d.split == Split::Eval).collect();
    if train_d.is_empty() {
        return Err(LitError::Precondition("no training datums".into()));
    }
    let n_train_controls = train_d.iter().map(|d| &d.control_id).collect::<BTreeSet<_>>().len();
    let train = build_examples(target, tok, &train_d, cfg.k)?;
    let eval = build_examples(target, tok, &eval_d, cfg.k)?;
    let probe: Vec<Example<T>> = train.iter().step_by((train.len() / 256).max(1)).cloned().collect();
    let probe_loss_before = mean_loss(decoder, &probe, cfg.ell)?;

    let sizes: Vec<usize> = decoder.adapter().expect("attached").params().iter().map(|p| p.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &sizes,
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, LoraAdapter<T>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            for &i in batch {
                let mut tape = Tape::new();
                let (loss, bm) = example_loss(&mut tape, decoder, Trainable::Adapter, &train[i], cfg.ell)?;
                let lv = tape.scalar(loss).as_f64();
                if !lv.is_finite() {
                    return Err(LitError::NonFinite {
                        step,
                        datums: batch.iter().map(|&j| train[j].datum_id.clone()).collect(),
                    });
                }
                loss_sum += lv;
                tape.backward(loss)?;
                accumulate(&mut acc, &grads_of(&tape, &bm.adapter_vars()));
            }
            scale_all(&mut acc, 1.0 / batch.len() as f64);
            let adapter = decoder.adapter_mut().expect("attached");
            opt.step(&mut adapter.params_mut(), &acc);
            step += 1;
        }
        let eval_loss = if eval.is_empty() {
            f64::NAN
        } else {
            mean_loss(decoder, &eval, cfg.ell)?
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_loss,
        });
        if best.as_ref().is_none_or(|b| eval_loss < b.1) {
            best = Some((epoch, eval_loss, decoder.adapter().expect("attached").clone()));
        }
    }
    let (best_epoch, best_eval_loss) = match best {
        Some((e, l, adapter)) => {
            decoder.detach_lora();
            decoder.attach_adapter(adapter)?;
            (e, l)
        }
        None => (0, f64::NAN),
    };
    let probe_loss_after = mean_loss(decoder, &probe, cfg.ell)?;
    let eval_accuracy = if cfg.max_answer_tokens > 0 {
        descriptive_accuracy(decoder, &eval, cfg.ell, cfg.max_answer_tokens)?
    } else {
        Accuracy {
            overall: None,
            n: 0,
            by_category: BTreeMap::new(),
            by_datum_type: BTreeMap::new(),
        }
    };
    let adapter = decoder.adapter().expect("attached").clone();
    let report = TrainReport {
        config: cfg.clone(),
        reference: reference_hyperparams(),
        n_train_controls,
        n_train_examples: train.len(),
        n_eval_examples: eval.len(),
        probe_loss_before,
        probe_loss_after,
        epochs,
        best_epoch,
        best_eval_loss,
        eval_accuracy,
        base_hash,
        adapter_hash: adapter.hash(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((adapter, report))
}

// ---------------------------------------------------------------------------
// Sweep and scaling

/// Best eval loss per `(k, ℓ)` cell; rows follow `ks`, columns `ells`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepMatrix {
    pub ks: Vec<usize>,
    pub ells: Vec<usize>,
    pub loss: Vec<Vec<f64>>,
}

impl SweepMatrix {
    /// `(k, ℓ)` of the lowest loss; ties go to the first cell in row order.
    pub fn argmin(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::INFINITY);
        for (i, row) in self.loss.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v < best.2 {
                    best = (i, j, v);
                }
            }
        }
        (self.ks[best.0], self.ells[best.1])
    }

    /// CSV with a header row of write layers and one row per read layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k\\ell");
        for e in &self.ells {
            s.push_str(&format!(",{e}"));
        }
        s.push('\n');
        for (k, row) in self.ks.iter().zip(&self.loss) {
            s.push_str(&k.to_string());
            for v in row {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// One full decoder training per cell, each from a fresh copy of `target`
/// with the same seed and data.
pub fn layer_sweep<T: Scalar>(
    target: &TransformerModel<T>,
    tok: &Tokenizer,
    datums: &[LatentDatum],
    ks: &[usize],
    ells: &[usize],
    cfg: &TrainConfig,
) -> Result<SweepMatrix> {
    let mut loss = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut row = Vec::with_capacity(ells.len());
        for &ell in ells {
            let mut decoder = target.base_clone();
            let cell = TrainConfig {
                k,
                ell,
                max_answer_tokens: 0,
                ..cfg.clone()
            };
            let (_, report) = train_decoder(&mut decoder, target, tok, datums, &cell)?;
            row.push(report.best_eval_loss);
        }
        loss.push(row);
    }
    Ok(SweepMatrix {
        ks: ks.to_vec(),
        ells: ells.to_vec(),
        loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub model: String,
    pub n_params: usize,
    pub fraction: f64,
    pub seed: u64,
    pub eval_loss: f64,
}

/// Eval loss for every (model, fraction) pair. Each model serves as its own
/// target and decoder base, read at [`default_read_layer`].
pub fn scaling_run<T: Scalar>(
    targets: &[(String, &TransformerModel<T>)],
    tok: &Tokenizer,
    datums: &[LatentDatum],
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<ScalingPoint>> {
    let mut out = Vec::new();
    for (name, target) in targets {
        for &fraction in fractions {
            let mut decoder = target.base_clone();
            let run = TrainConfig {
                k: default_read_layer(&target.config),
                fraction,
                max_answer_tokens: 0,
                ..cfg.clone()
            };
            let (_, report) = train_decoder(&mut decoder, target, tok, datums, &run)?;
            out.push(ScalingPoint {
                model: name.clone(),
                n_params: target.config.n_params(),
                fraction,
                seed: cfg.seed,
                eval_loss: report.best_eval_loss,
            });
        }
    }
    Ok(out)
}

pub fn scaling_csv(points: &[ScalingPoint]) -> String {
    let mut s = String::from("model,n_params,fraction,seed,eval_loss\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{:.6}\n", p.model, p.n_params, p.fraction, p.seed, p.eval_loss));
    }
    s
}
