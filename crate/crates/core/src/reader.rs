// SPDX-License-Identifier: Apache-2.0

//! Open-ended question answering about captured activations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{contains_token, Category, Tokenizer, ACT, ASEP, BOS, EOS, QSEP};
use crate::error::{LitError, Result};
use crate::patching::{capture, ActivationTensor};
use crate::tensor::Scalar;
use crate::transformer::{generate_greedy, PatchConfig, Span, TransformerModel};

/// Default answer budget in tokens.
pub const DEFAULT_MAX_NEW: usize = 20;

/// Which prompt positions supply activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanRule {
    /// Every position after `<bos>`.
    Full,
    /// From the last `user` turn onward, withholding earlier turns.
    StimulusOnly,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadRequest {
    /// Dialog text, e.g. `user : ... model : ... user : ... model :`.
    pub prompt: String,
    pub span: SpanRule,
    pub question: String,
    pub max_new_tokens: usize,
}

/// Read and write layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPair {
    pub k: usize,
    pub ell: usize,
}

/// `<bos>` + prompt tokens and the activation span selected by `rule`.
pub fn prompt_and_span(tok: &Tokenizer, prompt: &str, rule: SpanRule) -> Result<(Vec<usize>, Span)> {
    let mut tokens = vec![BOS];
    tokens.extend(tok.encode(prompt)?);
    if tokens.len() < 2 {
        return Err(LitError::Precondition("empty prompt".into()));
    }
    let start = match rule {
        SpanRule::Full => 1,
        SpanRule::StimulusOnly => {
            let user = tok.id("user").expect("world vocabulary has user");
            tokens
                .iter()
                .rposition(|&t| t == user)
                .ok_or_else(|| LitError::Precondition("prompt has no user turn".into()))?
        }
    };
    Ok((tokens.clone(), Span::new(start, tokens.len())))
}

/// Greedy answer from the decoder with `act` patched at `ell`. Returns the
/// answer tokens without the trailing `<eos>`.
pub fn answer_tokens<T: Scalar>(
    decoder: &TransformerModel<T>,
    act: &ActivationTensor<T>,
    question: &[usize],
    max_new: usize,
    ell: usize,
) -> Result<Vec<usize>> {
    let mut prompt = vec![ACT; act.n_tokens()];
    prompt.push(QSEP);
    prompt.extend_from_slice(question);
    prompt.push(ASEP);
    let room = decoder.config.max_context.saturating_sub(prompt.len());
    if room == 0 {
        return Err(LitError::ContextOverflow {
            len: prompt.len() + 1,
            max: decoder.config.max_context,
        });
    }
    let patch = PatchConfig {
        layer: ell,
        start: 0,
        source: act.clone(),
    };
    let out = generate_greedy(decoder, &prompt, max_new.min(room), Some(&patch), Some(EOS))?;
    Ok(out[prompt.len()..].iter().copied().take_while(|&t| t != EOS).collect())
}

/// INTERPRET: capture at `layers.k`, decode the answer with the patch at
/// `layers.ell`.
pub fn interpret<T: Scalar>(
    target: &TransformerModel<T>,
    decoder: &TransformerModel<T>,
    tok: &Tokenizer,
    req: &ReadRequest,
    layers: LayerPair,
) -> Result<String> {
    if req.question.trim().is_empty() {
        return Err(LitError::Precondition("question is empty".into()));
    }
    let (tokens, span) = prompt_and_span(tok, &req.prompt, req.span)?;
    let act = capture(target, &tokens, layers.k, span)?;
    let question = tok.encode(&req.question)?;
    if req.max_new_tokens == 0 {
        return Ok(String::new());
    }
    let ans = answer_tokens(decoder, &act, &question, req.max_new_tokens, layers.ell)?;
    Ok(tok.decode_answer(&ans))
}

/// A request with the token a correct answer must contain.
#[derive(Clone, Debug)]
pub struct ScoredRequest {
    pub request: ReadRequest,
    pub oracle_key: String,
    pub category: Category,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub answers: Vec<String>,
    /// `None` when there were no requests.
    pub accuracy: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
    pub n: usize,
}

/// Answers every request and scores by containment of the oracle key.
pub fn batch_interpret<T: Scalar>(
    target: &TransformerModel<T>,
    decoder: &TransformerModel<T>,
    tok: &Tokenizer,
    requests: &[ScoredRequest],
    layers: LayerPair,
) -> Result<BatchResult> {
    let answers = requests
        .iter()
        .map(|r| interpret(target, decoder, tok, &r.request, layers))
        .collect::<Result<Vec<_>>>()?;
    let hits: Vec<(Category, bool)> = requests
        .iter()
        .zip(&answers)
        .map(|(r, a)| (r.category, contains_token(a, &r.oracle_key)))
        .collect();
    Ok(score(answers, &hits))
}

pub(crate) fn score(answers: Vec<String>, hits: &[(Category, bool)]) -> BatchResult {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for &(c, hit) in hits {
        let e = per.entry(c.name().to_string()).or_default();
        e.0 += hit as usize;
        e.1 += 1;
    }
    let n = hits.len();
    let correct = hits.iter().filter(|h| h.1).count();
    BatchResult {
        answers,
        accuracy: (n > 0).then(|| correct as f64 / n as f64),
        per_category: per.into_iter().map(|(k, (c, t))| (k, c as f64 / t as f64)).collect(),
        n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_rules() {
        let tok = Tokenizer::world();
        let p = "user : you are a pirate now . model : of course . user : what should i cook today ? model :";
        let (t, full) = prompt_and_span(&tok, p, SpanRule::Full).unwrap();
        assert_eq!(full, Span::new(1, t.len()));
        let (_, stim) = prompt_and_span(&tok, p, SpanRule::StimulusOnly).unwrap();
        assert_eq!(stim.len(), tok.encode("user : what should i cook today ? model :").unwrap().len());
    }

    #[test]
    fn empty_batch_is_undefined() {
        let r = score(Vec::new(), &[]);
        assert!(r.accuracy.is_none() && r.answers.is_empty());
    }

    #[test]
    fn oracle_answers_score_one() {
        let hits = [(Category::Persona, contains_token("like a Pirate", "pirate")), (Category::Goal, true)];
        let r = score(vec!["like a Pirate".into(), "ocean".into()], &hits);
        assert_eq!(r.accuracy, Some(1.0));
        assert_eq!(r.per_category["persona"], 1.0);
    }
}
