// SPDX-License-Identifier: Apache-2.0

//! Control sampling, datum expansion and rendering to token sequences.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, ACT, ASEP, BOS, EOS, QSEP};
use super::world::{self, fill, Stimulus};
use super::{BehaviorKey, Category, ControlSpec, DatumType, Dialog, LatentDatum, QaKind, Split};
use crate::error::{LitError, Result};
use crate::transformer::Span;

/// Number of controls to generate per category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryCounts {
    pub goals: usize,
    pub personas: usize,
    pub extractive: usize,
}

/// Dataset counts of the full-scale reference corpus.
pub const REFERENCE_COUNTS: CategoryCounts = CategoryCounts {
    goals: 4670,
    personas: 3359,
    extractive: 8703,
};

impl CategoryCounts {
    /// Split `total` in proportion to [`REFERENCE_COUNTS`] by largest
    /// remainders, so the parts always sum to `total`.
    pub fn proportional(total: usize) -> Self {
        let r = REFERENCE_COUNTS;
        let weights = [r.goals, r.personas, r.extractive];
        let sum: usize = weights.iter().sum();
        let mut parts: Vec<usize> = weights.iter().map(|w| total * w / sum).collect();
        let mut order: Vec<usize> = (0..3).collect();
        // remainder numerators; ties go to the earlier category
        order.sort_by_key(|&i| std::cmp::Reverse((total * weights[i]) % sum));
        let short = total - parts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            parts[i] += 1;
        }
        Self {
            goals: parts[0],
            personas: parts[1],
            extractive: parts[2],
        }
    }

    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::Goal => self.goals,
            Category::Persona => self.personas,
            Category::ExtractiveQa => self.extractive,
        }
    }

    pub fn total(&self) -> usize {
        self.goals + self.personas + self.extractive
    }
}

/// Controls held out for evaluation: about a tenth, at least one when a
/// category has two or more controls.
pub fn eval_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        ((n as f64 * 0.1).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Draw {
    key: usize,
    user: usize,
    model: usize,
    stimulus: Stimulus,
}

fn draws(category: Category) -> Vec<Draw> {
    let mut out = Vec::with_capacity(world::capacity(category));
    match category {
        Category::Persona | Category::Goal => {
            let (n_keys, n_user, n_model) = if category == Category::Persona {
                (world::STYLES.len(), world::PERSONA_USER.len(), world::PERSONA_MODEL.len())
            } else {
                (world::TOPICS.len(), world::GOAL_USER.len(), world::GOAL_MODEL.len())
            };
            let pool = Stimulus::open_pool();
            for key in 0..n_keys {
                for user in 0..n_user {
                    for model in 0..n_model {
                        for &stimulus in &pool {
                            out.push(Draw {
                                key,
                                user,
                                model,
                                stimulus,
                            });
                        }
                    }
                }
            }
        }
        Category::ExtractiveQa => {
            for slot in 0..world::SLOTS.len() {
                for value in 0..world::VALUES.len() {
                    for user in 0..world::FACT_USER.len() {
                        for model in 0..world::FACT_MODEL.len() {
                            for phrasing in 0..world::FACT_PROMPTS.len() {
                                out.push(Draw {
                                    key: slot * world::VALUES.len() + value,
                                    user,
                                    model,
                                    stimulus: Stimulus::Fact { slot, phrasing },
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn control_of(category: Category, d: &Draw) -> ControlSpec {
    let (behavior, user, model) = match category {
        Category::Persona => {
            let (style, marker, _) = world::STYLES[d.key];
            let pairs = [("style", style), ("marker", marker)];
            (
                BehaviorKey::Style { style: style.into() },
                fill(world::PERSONA_USER[d.user], &pairs),
                fill(world::PERSONA_MODEL[d.model], &pairs),
            )
        }
        Category::Goal => {
            let (topic, _) = world::TOPICS[d.key];
            let pairs = [("topic", topic)];
            (
                BehaviorKey::Goal { topic: topic.into() },
                fill(world::GOAL_USER[d.user], &pairs),
                fill(world::GOAL_MODEL[d.model], &pairs),
            )
        }
        Category::ExtractiveQa => {
            let slot = world::SLOTS[d.key / world::VALUES.len()];
            let value = world::VALUES[d.key % world::VALUES.len()];
            let pairs = [("slot", slot), ("value", value)];
            (
                BehaviorKey::Fact {
                    slot: slot.into(),
                    value: value.into(),
                },
                fill(world::FACT_USER[d.user], &pairs),
                fill(world::FACT_MODEL[d.model], &pairs),
            )
        }
    };
    let tag = match &behavior {
        BehaviorKey::Style { style } => style.clone(),
        BehaviorKey::Goal { topic } => topic.clone(),
        BehaviorKey::Fact { slot, value } => format!("{slot}.{value}"),
    };
    ControlSpec {
        category,
        control_id: format!("{}-{tag}-u{}m{}-{}", category.name(), d.user, d.model, d.stimulus.id()),
        control_user: user,
        control_model: model,
        behavior,
    }
}

/// Label string for a behavior key, e.g. `style=pirate` or `capital=zorn`.
pub fn label(b: &BehaviorKey) -> String {
    match b {
        BehaviorKey::Style { style } => format!("style={style}"),
        BehaviorKey::Goal { topic } => format!("goal={topic}"),
        BehaviorKey::Fact { slot, value } => format!("{slot}={value}"),
    }
}

/// Deterministic corpus of `counts` controls, each expanded into all three
/// datum types. Control order within a category is random under `seed`; the
/// first [`eval_count`] controls of each category form the eval split.
pub fn generate_corpus(seed: u64, counts: CategoryCounts) -> Result<Vec<LatentDatum>> {
    if counts.total() == 0 {
        return Err(LitError::Config("at least one control must be requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * counts.total());
    for category in Category::ALL {
        let n = counts.get(category);
        let max = world::capacity(category);
        if n > max {
            return Err(LitError::Capacity {
                category: category.name().into(),
                requested: n,
                max,
            });
        }
        let mut pool = draws(category);
        let (chosen, _) = pool.partial_shuffle(&mut rng, n);
        let n_eval = eval_count(n);
        for (i, d) in chosen.iter().enumerate() {
            let control = control_of(category, d);
            let completion = world::complete(Some(&control.behavior), &d.stimulus, &mut rng);
            let dialog = Dialog {
                control_user: control.control_user.clone(),
                control_model: control.control_model.clone(),
                stimulus_user: d.stimulus.text(),
                stimulus_model: completion.text,
                label: label(&control.behavior),
            };
            let qa = world::qa_pairs(&control.behavior);
            let split = if i < n_eval { Split::Eval } else { Split::Train };
            for datum_type in DatumType::ALL {
                out.push(LatentDatum {
                    id: format!("{}/{}", control.control_id, datum_type.name()),
                    control_id: control.control_id.clone(),
                    category,
                    behavior: control.behavior.clone(),
                    split,
                    datum_type,
                    dialog: dialog.clone(),
                    qa: qa.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Token layout of one question-answer pair on the decoder side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedQa {
    /// `<q>`, question words, `<a>`.
    pub question: Vec<usize>,
    /// Answer words then `<eos>`.
    pub answer: Vec<usize>,
    pub kind: QaKind,
    /// Placeholder run of span length, then question, then answer.
    pub decoder_input: Vec<usize>,
    /// True exactly at answer positions of `decoder_input`.
    pub loss_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedDatum {
    pub target_tokens: Vec<usize>,
    pub span: Span,
    pub items: Vec<RenderedQa>,
}

/// Token segments of a dialog: control turns, stimulus turn (ending in the
/// assistant cue), completion words.
pub fn segments(tok: &Tokenizer, d: &Dialog) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let control = tok.encode(&format!("user : {} model : {}", d.control_user, d.control_model))?;
    let stimulus = tok.encode(&format!("user : {} model :", d.stimulus_user))?;
    let completion = tok.encode(&d.stimulus_model)?;
    Ok((control, stimulus, completion))
}

pub fn render_question(tok: &Tokenizer, question: &str) -> Result<Vec<usize>> {
    let mut q = vec![QSEP];
    q.extend(tok.encode(question)?);
    q.push(ASEP);
    Ok(q)
}

pub fn render_answer(tok: &Tokenizer, answer: &str) -> Result<Vec<usize>> {
    let mut a = tok.encode(answer)?;
    a.push(EOS);
    Ok(a)
}

pub fn render_datum(datum: &LatentDatum, tok: &Tokenizer) -> Result<RenderedDatum> {
    let (control, stimulus, completion) = segments(tok, &datum.dialog)?;
    let mut target_tokens = vec![BOS];
    target_tokens.extend(&control);
    target_tokens.extend(&stimulus);
    let c0 = 1;
    let s0 = c0 + control.len();
    let span = match datum.datum_type {
        DatumType::Control => Span::new(c0, s0),
        DatumType::Stimulus => Span::new(s0, s0 + stimulus.len()),
        DatumType::StimulusCompletion => {
            target_tokens.extend(&completion);
            Span::new(s0, s0 + stimulus.len() + completion.len())
        }
    };
    let items = datum
        .qa
        .iter()
        .map(|qa| {
            let question = render_question(tok, &qa.question)?;
            let answer = render_answer(tok, &qa.answer)?;
            let mut decoder_input = vec![ACT; span.len()];
            decoder_input.extend(&question);
            let answer_start = decoder_input.len();
            decoder_input.extend(&answer);
            let loss_mask = (0..decoder_input.len()).map(|i| i >= answer_start).collect();
            Ok(RenderedQa {
                question,
                answer,
                kind: qa.kind,
                decoder_input,
                loss_mask,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RenderedDatum {
        target_tokens,
        span,
        items,
    })
}
