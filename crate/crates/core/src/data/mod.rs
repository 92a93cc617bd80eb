// SPDX-License-Identifier: Apache-2.0

//! LatentQA datum schema, the synthetic control world, tokenization and
//! on-disk formats.

mod corpus;
mod jsonl;
mod pretrain;
mod tokenizer;
pub mod world;

use serde::{Deserialize, Serialize};

pub use corpus::{
    generate_corpus, render_answer, render_datum, render_question, CategoryCounts, RenderedDatum, RenderedQa, REFERENCE_COUNTS,
};
pub use jsonl::{load_jsonl, save_jsonl};
pub use pretrain::{build_pretraining_corpus, PretrainSequence};
pub use tokenizer::{Tokenizer, ACT, ASEP, BOS, EOS, PAD, QSEP, RESERVED};
pub use world::Stimulus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    ExtractiveQa,
    Goal,
    Persona,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::ExtractiveQa, Category::Goal, Category::Persona];

    pub fn name(self) -> &'static str {
        match self {
            Category::ExtractiveQa => "extractive-qa",
            Category::Goal => "goal",
            Category::Persona => "persona",
        }
    }
}

/// The latent variable a control sets; answers to every question about the
/// control are functions of it.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BehaviorKey {
    Style { style: String },
    Goal { topic: String },
    Fact { slot: String, value: String },
}

impl BehaviorKey {
    pub fn category(&self) -> Category {
        match self {
            BehaviorKey::Style { .. } => Category::Persona,
            BehaviorKey::Goal { .. } => Category::Goal,
            BehaviorKey::Fact { .. } => Category::ExtractiveQa,
        }
    }

    /// The single token a correct descriptive answer must contain.
    pub fn key_token(&self) -> &str {
        match self {
            BehaviorKey::Style { style } => style,
            BehaviorKey::Goal { topic } => topic,
            BehaviorKey::Fact { value, .. } => value,
        }
    }

    /// Tokens that would reveal the key if they appeared in a stimulus. The
    /// slot name of a fact is not among them: stimuli must be able to ask
    /// about the slot.
    pub fn revealing_tokens(&self) -> Vec<&str> {
        match self {
            BehaviorKey::Style { style } => {
                let marker = world::style(style).map(|s| s.1).unwrap_or_default();
                vec![style.as_str(), marker]
            }
            BehaviorKey::Goal { topic } => vec![topic.as_str()],
            BehaviorKey::Fact { value, .. } => vec![value.as_str()],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QaKind {
    Descriptive,
    Reasoning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub kind: QaKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub category: Category,
    pub control_id: String,
    pub control_user: String,
    pub control_model: String,
    pub behavior: BehaviorKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialog {
    pub control_user: String,
    pub control_model: String,
    pub stimulus_user: String,
    pub stimulus_model: String,
    pub label: String,
}

/// Which part of the rendered prompt supplies activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatumType {
    /// Control turns only.
    #[serde(rename = "control")]
    Control,
    /// Stimulus turn only; control positions withheld.
    #[serde(rename = "stimulus")]
    Stimulus,
    /// Stimulus plus completion; control positions withheld.
    #[serde(rename = "stimulus+completion")]
    StimulusCompletion,
}

impl DatumType {
    pub const ALL: [DatumType; 3] = [DatumType::Control, DatumType::Stimulus, DatumType::StimulusCompletion];

    pub fn name(self) -> &'static str {
        match self {
            DatumType::Control => "control",
            DatumType::Stimulus => "stimulus",
            DatumType::StimulusCompletion => "stimulus+completion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDatum {
    pub id: String,
    pub control_id: String,
    pub category: Category,
    pub behavior: BehaviorKey,
    pub split: Split,
    pub datum_type: DatumType,
    pub dialog: Dialog,
    pub qa: Vec<QaPair>,
}

/// Rule-based answer to a question, from the behavior key alone.
pub fn oracle_answer(behavior: &BehaviorKey, question: &str) -> Option<String> {
    world::qa_pairs(behavior)
        .into_iter()
        .find(|qa| qa.question == question)
        .map(|qa| qa.answer)
}

/// Case-insensitive whole-token containment.
pub fn contains_token(text: &str, token: &str) -> bool {
    let token = token.to_lowercase();
    text.split_whitespace().any(|w| w.to_lowercase() == token)
}
