// SPDX-License-Identifier: Apache-2.0

//! Dialog sequences for pretraining the target model on the toy language.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tokenizer::{Tokenizer, BOS, EOS};
use super::world::{self, fill, Stimulus};
use super::BehaviorKey;

/// Category mix: no control, persona, goal, planted fact.
const MIX: [f64; 4] = [0.25, 0.30, 0.20, 0.25];

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSequence {
    /// `<bos>`, optional control turns, stimulus turn, completion, `<eos>`.
    pub tokens: Vec<usize>,
    /// Negative log-probability of this sequence under the generator, in
    /// nats. Its mean over samples estimates the grammar's entropy, which
    /// bounds from below the loss any model can reach.
    pub entropy_nats: f64,
}

fn pick<'a, T>(rng: &mut impl Rng, xs: &'a [T]) -> (usize, &'a T) {
    let i = rng.random_range(0..xs.len());
    (i, &xs[i])
}

/// `n_dialogs` sampled dialogs. Every choice is uniform except the category
/// and the group adjective, and each contributes its log-probability to
/// `entropy_nats`.
pub fn build_pretraining_corpus(seed: u64, n_dialogs: usize) -> Vec<PretrainSequence> {
    let tok = Tokenizer::world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let open = Stimulus::open_pool();
    let fact_stimuli: Vec<Stimulus> = (0..world::SLOTS.len())
        .flat_map(|slot| (0..world::FACT_PROMPTS.len()).map(move |phrasing| Stimulus::Fact { slot, phrasing }))
        .collect();
    let any_stimulus: Vec<Stimulus> = open.iter().chain(&fact_stimuli).copied().collect();
    let ln = |n: usize| (n as f64).ln();

    (0..n_dialogs)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let cat = MIX
                .iter()
                .position(|&p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(MIX.len() - 1);
            let mut h = -MIX[cat].ln();
            let (control, behavior, stimulus) = match cat {
                0 => {
                    let (_, &s) = pick(&mut rng, &any_stimulus);
                    h += ln(any_stimulus.len());
                    (None, None, s)
                }
                1 => {
                    let (_, &(style, marker, _)) = pick(&mut rng, world::STYLES);
                    let (_, user) = pick(&mut rng, world::PERSONA_USER);
                    let (_, model) = pick(&mut rng, world::PERSONA_MODEL);
                    let (_, &s) = pick(&mut rng, &open);
                    h += ln(world::STYLES.len())
                        + ln(world::PERSONA_USER.len())
                        + ln(world::PERSONA_MODEL.len())
                        + ln(open.len());
                    let pairs = [("style", style), ("marker", marker)];
                    (
                        Some((fill(user, &pairs), fill(model, &pairs))),
                        Some(BehaviorKey::Style { style: style.into() }),
                        s,
                    )
                }
                2 => {
                    let (_, &(topic, _)) = pick(&mut rng, world::TOPICS);
                    let (_, user) = pick(&mut rng, world::GOAL_USER);
                    let (_, model) = pick(&mut rng, world::GOAL_MODEL);
                    let (_, &s) = pick(&mut rng, &open);
                    h += ln(world::TOPICS.len())
                        + ln(world::GOAL_USER.len())
                        + ln(world::GOAL_MODEL.len())
                        + ln(open.len());
                    let pairs = [("topic", topic)];
                    (
                        Some((fill(user, &pairs), fill(model, &pairs))),
                        Some(BehaviorKey::Goal { topic: topic.into() }),
                        s,
                    )
                }
                _ => {
                    let (slot, _) = pick(&mut rng, world::SLOTS);
                    let (_, &value) = pick(&mut rng, world::VALUES);
                    let (_, user) = pick(&mut rng, world::FACT_USER);
                    let (_, model) = pick(&mut rng, world::FACT_MODEL);
                    let phrasing = rng.random_range(0..world::FACT_PROMPTS.len());
                    h += ln(world::SLOTS.len())
                        + ln(world::VALUES.len())
                        + ln(world::FACT_USER.len())
                        + ln(world::FACT_MODEL.len())
                        + ln(world::FACT_PROMPTS.len());
                    let pairs = [("slot", world::SLOTS[slot]), ("value", value)];
                    (
                        Some((fill(user, &pairs), fill(model, &pairs))),
                        Some(BehaviorKey::Fact {
                            slot: world::SLOTS[slot].into(),
                            value: value.into(),
                        }),
                        Stimulus::Fact { slot, phrasing },
                    )
                }
            };
            let completion = world::complete(behavior.as_ref(), &stimulus, &mut rng);
            h -= completion.prob.ln();
            let mut text = String::new();
            if let Some((cu, cm)) = control {
                text.push_str(&format!("user : {cu} model : {cm} "));
            }
            text.push_str(&format!("user : {} model : {}", stimulus.text(), completion.text));
            let mut tokens = vec![BOS];
            tokens.extend(tok.encode(&text).expect("world text is in vocabulary"));
            tokens.push(EOS);
            PretrainSequence {
                tokens,
                entropy_nats: h,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_context() {
        let a = build_pretraining_corpus(3, 200);
        assert_eq!(a, build_pretraining_corpus(3, 200));
        assert!(a.iter().all(|s| s.tokens.len() <= 64 && s.entropy_nats > 0.0));
    }

    #[test]
    fn covers_styles_and_slots() {
        let tok = Tokenizer::world();
        let seqs = build_pretraining_corpus(0, 512);
        let text: Vec<String> = seqs.iter().map(|s| tok.decode(&s.tokens)).collect();
        let styles = world::STYLES
            .iter()
            .filter(|(s, _, _)| text.iter().any(|t| t.split_whitespace().any(|w| w == *s)))
            .count();
        let slots = world::SLOTS
            .iter()
            .filter(|s| text.iter().any(|t| t.contains(&format!(" the {s} "))))
            .count();
        assert!(styles >= 8, "{styles}");
        assert!(slots >= 16, "{slots}");
    }
}
