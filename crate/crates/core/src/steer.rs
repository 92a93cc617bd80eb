// SPDX-License-Identifier: Apache-2.0

//! Steering the target by gradient descent on the frozen decoder's answer
//! loss, backpropagated through the patch into a target-side adapter.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::world::{self, Stimulus, GROUPS};
use crate::data::{Tokenizer, BOS, EOS};
use crate::error::{LitError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::patching::patched_forward_on;
use crate::reader::{interpret, LayerPair, ReadRequest, SpanRule, DEFAULT_MAX_NEW};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{CaptureSpec, Input, LoraAdapter, LoraSpec, Span, Trainable, TransformerModel};

/// Which captured layers feed the steering loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Read only layer `k`.
    LayerK,
    /// Read every layer `0..=k` from the same forward pass.
    Sequential,
}

impl std::str::FromStr for Schedule {
    type Err = LitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-k" => Ok(Schedule::LayerK),
            "sequential" => Ok(Schedule::Sequential),
            other => Err(LitError::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerQa {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerSpec {
    pub control_text: String,
    pub qa: Vec<SteerQa>,
    pub schedule: Schedule,
    /// With the sequential schedule, take one optimizer step per captured
    /// layer instead of one step on the summed loss.
    pub per_layer_updates: bool,
    pub steps: usize,
    pub k: usize,
    pub ell: usize,
    pub rank: usize,
    pub alpha: f64,
    pub lr: f64,
    pub seed: u64,
}

impl SteerSpec {
    pub fn new(control_text: &str, qa: Vec<SteerQa>, k: usize) -> Self {
        Self {
            control_text: control_text.to_string(),
            qa,
            schedule: Schedule::Sequential,
            per_layer_updates: false,
            steps: 200,
            k,
            ell: 0,
            rank: 8,
            alpha: 16.0,
            lr: 1e-3,
            seed: 0,
        }
    }

    fn layers(&self) -> Vec<usize> {
        match self.schedule {
            Schedule::LayerK => vec![self.k],
            Schedule::Sequential => (0..=self.k).collect(),
        }
    }
}

/// Reference steering hyperparameters of the full-scale setup.
pub fn reference_hyperparams() -> serde_json::Value {
    serde_json::json!({
        "target_lora_rank": 8,
        "target_lora_alpha": 16,
        "target_lr": 1e-4,
        "debias_mean_abs_loglik_diff": {"no_control": 4.05, "steered": 3.70},
        "debias_percent_stereotype": {"no_control": 64.3, "steered": 60.9},
    })
}

/// Default fixed questions: the persona questions the decoder was trained on.
pub fn default_questions() -> Vec<String> {
    world::PERSONA_QUESTIONS.iter().map(|(q, _)| q.to_string()).collect()
}

/// A control given as bare user text becomes `user : {text} model :`.
pub fn control_prompt(text: &str) -> String {
    let t = text.trim();
    if t.starts_with("user :") {
        t.to_string()
    } else {
        format!("user : {t} model :")
    }
}

/// Answers each fixed question from the control prompt's activations.
pub fn derive_control_qas<T: Scalar>(
    target: &TransformerModel<T>,
    decoder: &TransformerModel<T>,
    tok: &Tokenizer,
    control_text: &str,
    questions: &[String],
    layers: LayerPair,
) -> Result<Vec<SteerQa>> {
    if questions.is_empty() {
        return Err(LitError::Precondition("fixed question list is empty".into()));
    }
    let prompt = control_prompt(control_text);
    questions
        .iter()
        .map(|q| {
            let req = ReadRequest {
                prompt: prompt.clone(),
                span: SpanRule::Full,
                question: q.clone(),
                max_new_tokens: DEFAULT_MAX_NEW,
            };
            Ok(SteerQa {
                question: q.clone(),
                answer: interpret(target, decoder, tok, &req, layers)?,
            })
        })
        .collect()
}

/// Tokenized steering QA: `<q> question <a>` and `answer <eos>`.
fn encode_qas(tok: &Tokenizer, qa: &[SteerQa]) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    qa.iter()
        .map(|p| {
            let q = crate::data::render_question(tok, &p.question)?;
            let a = crate::data::render_answer(tok, &p.answer)?;
            Ok((q, a))
        })
        .collect()
}

/// Gradient of the decoder's answer loss with respect to an activation that
/// lives on `tape`. The decoder is bound frozen, so only the activation and
/// whatever produced it receive gradients.
pub fn steer_gradient<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &TransformerModel<T>,
    act: Var,
    question: &[usize],
    answer: &[usize],
    ell: usize,
) -> Result<Tensor<T>> {
    if !tape.requires_grad(act) {
        return Err(LitError::Tape("activation is detached from any trainable input".into()));
    }
    let bound = decoder.bind(tape, Trainable::Nothing);
    let (_, loss) = patched_forward_on(tape, decoder, &bound, act, question, Some(answer), ell)?;
    let loss = loss.expect("answer supplied");
    tape.backward(loss)?;
    let (n, d) = tape.dims(act);
    let g = tape.grad(act).map_or_else(|| vec![T::zero(); n * d], <[T]>::to_vec);
    Tensor::new(vec![n, d], g)
}

/// Behavior probes measured before and after steering.
#[derive(Clone, Debug, Default)]
pub struct BehaviorProbe {
    /// Marker token whose frequency in completions is tracked.
    pub marker: Option<String>,
    /// Held-out stimulus texts for the marker metric.
    pub stimuli: Vec<String>,
    /// Paired full dialogs, stereotyped first.
    pub pairs: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub mean_abs_diff: f64,
    /// Percent of pairs whose first sentence is more likely; ties count half.
    pub percent_first: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub marker_frequency: Option<f64>,
    pub pairs: Option<PairStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerReport {
    pub spec: SteerSpec,
    pub reference: serde_json::Value,
    /// Mean decoder answer loss at each step, before that step's update.
    pub loss_trajectory: Vec<f64>,
    pub steps_executed: usize,
    pub before: BehaviorMetrics,
    pub after: BehaviorMetrics,
    pub decoder_hash_before: String,
    pub decoder_hash_after: String,
    pub adapter_hash: String,
    pub wall_clock_secs: f64,
}

/// Mean |Δ log-likelihood| over sentence pairs and the share of pairs whose
/// first sentence is more likely.
pub fn pair_loglik_diff<T: Scalar>(model: &TransformerModel<T>, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<PairStats> {
    if pairs.is_empty() {
        return Err(LitError::Precondition("no sentence pairs".into()));
    }
    let mut abs = 0.0;
    let mut first = 0.0;
    for (a, b) in pairs {
        let diff = model.sequence_log_likelihood(a)? - model.sequence_log_likelihood(b)?;
        abs += diff.abs();
        first += if diff > 0.0 {
            1.0
        } else if diff == 0.0 {
            0.5
        } else {
            0.0
        };
    }
    let n = pairs.len() as f64;
    Ok(PairStats {
        mean_abs_diff: abs / n,
        percent_first: 100.0 * first / n,
    })
}

/// `<bos> user : {stimulus} model :`.
pub fn stimulus_prompt(tok: &Tokenizer, stimulus: &str) -> Result<Vec<usize>> {
    let mut t = vec![BOS];
    t.extend(tok.encode(&format!("user : {stimulus} model :"))?);
    Ok(t)
}

/// Share of stimuli whose greedy completion contains `marker`.
pub fn marker_frequency<T: Scalar>(
    model: &TransformerModel<T>,
    tok: &Tokenizer,
    marker: &str,
    stimuli: &[String],
) -> Result<f64> {
    let id = tok.id(marker).ok_or_else(|| LitError::OutOfVocab(marker.to_string()))?;
    if stimuli.is_empty() {
        return Err(LitError::Precondition("no stimuli".into()));
    }
    let mut hits = 0;
    for s in stimuli {
        let prompt = stimulus_prompt(tok, s)?;
        let room = model.config.max_context - prompt.len();
        let out = crate::transformer::generate_greedy(model, &prompt, DEFAULT_MAX_NEW.min(room), None, Some(EOS))?;
        hits += out[prompt.len()..].contains(&id) as usize;
    }
    Ok(hits as f64 / stimuli.len() as f64)
}

pub fn measure<T: Scalar>(model: &TransformerModel<T>, tok: &Tokenizer, probe: &BehaviorProbe) -> Result<BehaviorMetrics> {
    let marker_frequency = match &probe.marker {
        Some(m) => Some(marker_frequency(model, tok, m, &probe.stimuli)?),
        None => None,
    };
    let pairs = if probe.pairs.is_empty() {
        None
    } else {
        let enc = |s: &str| -> Result<Vec<usize>> {
            let mut t = vec![BOS];
            t.extend(tok.encode(s)?);
            t.push(EOS);
            Ok(t)
        };
        let toks = probe
            .pairs
            .iter()
            .map(|(a, b)| Ok((enc(a)?, enc(b)?)))
            .collect::<Result<Vec<_>>>()?;
        Some(pair_loglik_diff(model, &toks)?)
    };
    Ok(BehaviorMetrics {
        marker_frequency,
        pairs,
    })
}

/// Held-out everyday stimuli for the marker metric.
pub fn held_out_stimuli() -> Vec<String> {
    Stimulus::steering_split().1.iter().map(Stimulus::text).collect()
}

/// Stimuli the steering loop samples from.
pub fn training_stimuli() -> Vec<String> {
    Stimulus::steering_split().0.iter().map(Stimulus::text).collect()
}

/// Uncontrolled group-description dialogs, stereotyped adjective first.
pub fn stereotype_pairs() -> Vec<(String, String)> {
    Stimulus::open_pool()
        .into_iter()
        .filter_map(|s| match s {
            Stimulus::Group { group, .. } => {
                let (name, stereo, counter) = GROUPS[group];
                let head = format!("user : {} model : the {name} people are", s.text());
                Some((format!("{head} {stereo} ."), format!("{head} {counter} .")))
            }
            _ => None,
        })
        .collect()
}

/// Attaches an adapter on target layers `0..=k` and trains it so the frozen
/// decoder gives `spec.qa` high likelihood from the target's stimulus
/// activations. Behavior metrics from `probe` are measured before and after.
pub fn control_target<T: Scalar>(
    target: &mut TransformerModel<T>,
    decoder: &TransformerModel<T>,
    tok: &Tokenizer,
    spec: &SteerSpec,
    stimuli: &[String],
    probe: &BehaviorProbe,
) -> Result<(LoraAdapter<T>, SteerReport)> {
    let started = Instant::now();
    if spec.qa.is_empty() {
        return Err(LitError::Precondition("steering QA list is empty".into()));
    }
    if stimuli.is_empty() {
        return Err(LitError::Precondition("no steering stimuli".into()));
    }
    if spec.k >= target.config.n_layers || spec.ell >= decoder.config.n_layers {
        return Err(LitError::Layer {
            layer: spec.k.max(spec.ell),
            n_layers: target.config.n_layers.min(decoder.config.n_layers),
        });
    }
    if spec.per_layer_updates && spec.schedule == Schedule::LayerK {
        return Err(LitError::Config("per-layer updates need the sequential schedule".into()));
    }
    let decoder_hash_before = decoder.adapter().map(|a| a.hash()).unwrap_or_default();
    let before = measure(target, tok, probe)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    target.attach_lora(LoraSpec::on_layers(0..=spec.k, spec.rank, spec.alpha), &mut rng)?;
    let sizes: Vec<usize> = target.adapter().expect("attached").params().iter().map(|p| p.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: spec.lr,
            ..Default::default()
        },
        &sizes,
    );
    let qas = encode_qas(tok, &spec.qa)?;
    let layers = spec.layers();
    let mut trajectory = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        let stim = &stimuli[rng.random_range(0..stimuli.len())];
        let prompt = stimulus_prompt(tok, stim)?;
        let span = Span::new(1, prompt.len());
        let mut tape = Tape::new();
        let tb = target.bind(&mut tape, Trainable::Adapter);
        let caps: Vec<CaptureSpec> = layers.iter().map(|&layer| CaptureSpec { layer, span }).collect();
        let (_, acts) = target.forward_on(&mut tape, &tb, Input::Tokens(&prompt), None, &caps)?;
        let db = decoder.bind(&mut tape, Trainable::Nothing);
        let mut per_layer: Vec<Var> = Vec::with_capacity(acts.len());
        for &act in &acts {
            let mut sum: Option<Var> = None;
            for (q, a) in &qas {
                let (_, loss) = patched_forward_on(&mut tape, decoder, &db, act, q, Some(a), spec.ell)?;
                let loss = loss.expect("answer supplied");
                sum = Some(match sum {
                    Some(s) => tape.add(s, loss)?,
                    None => loss,
                });
            }
            per_layer.push(tape.scale(sum.expect("qa nonempty"), T::of(1.0 / qas.len() as f64)));
        }
        let total = per_layer.iter().map(|&v| tape.scalar(v).as_f64()).sum::<f64>() / per_layer.len() as f64;
        if !total.is_finite() {
            return Err(LitError::NonFinite {
                step,
                datums: vec![stim.clone()],
            });
        }
        trajectory.push(total);
        let adapter_vars = tb.adapter_vars();
        if spec.per_layer_updates {
            for &l in &per_layer {
                tape.zero_grad();
                tape.backward(l)?;
                let g = grads(&tape, &adapter_vars);
                opt.step(&mut target.adapter_mut().expect("attached").params_mut(), &g);
            }
        } else {
            let mut loss = per_layer[0];
            for &l in &per_layer[1..] {
                loss = tape.add(loss, l)?;
            }
            let loss = tape.scale(loss, T::of(1.0 / per_layer.len() as f64));
            tape.backward(loss)?;
            let g = grads(&tape, &adapter_vars);
            opt.step(&mut target.adapter_mut().expect("attached").params_mut(), &g);
        }
    }
    let after = measure(target, tok, probe)?;
    let adapter = target.adapter().expect("attached").clone();
    let report = SteerReport {
        spec: spec.clone(),
        reference: reference_hyperparams(),
        loss_trajectory: trajectory,
        steps_executed: spec.steps,
        before,
        after,
        decoder_hash_before,
        decoder_hash_after: decoder.adapter().map(|a| a.hash()).unwrap_or_default(),
        adapter_hash: adapter.hash(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((adapter, report))
}

fn grads<T: Scalar>(tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![T::zero(); tape.value(v).len()], <[T]>::to_vec))
        .collect()
}

/// Mean decoder answer loss of `qa` on `stimuli` for the current target,
/// read at layer `k`.
pub fn steering_loss<T: Scalar>(
    target: &TransformerModel<T>,
    decoder: &TransformerModel<T>,
    tok: &Tokenizer,
    qa: &[SteerQa],
    stimuli: &[String],
    layers: LayerPair,
) -> Result<f64> {
    let qas = encode_qas(tok, qa)?;
    let mut total = 0.0;
    for s in stimuli {
        let prompt = stimulus_prompt(tok, s)?;
        let act = crate::patching::capture(target, &prompt, layers.k, Span::new(1, prompt.len()))?;
        for (q, a) in &qas {
            let out = crate::patching::patched_decoder_forward(decoder, &act, q, Some(a), layers.ell)?;
            total += out.loss.expect("answer supplied");
        }
    }
    Ok(total / (stimuli.len() * qas.len()) as f64)
}
