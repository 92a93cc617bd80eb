// SPDX-License-Identifier: Apache-2.0

//! Closed word-level tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LitError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const QSEP: usize = 3;
pub const ASEP: usize = 4;
/// Placeholder whose residual stream is overwritten by patched activations.
pub const ACT: usize = 5;

pub const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<q>", "<a>", "<act>"];

const VOCAB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Tokenizer {
    /// Reserved tokens followed by `words` in order.
    pub fn new(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(LitError::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(LitError::Config(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(LitError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// The vocabulary of the synthetic world.
    pub fn world() -> Self {
        Self::new(super::world::words()).expect("world vocabulary is well formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| LitError::OutOfVocab(w.to_string())))
            .collect()
    }

    /// Ids to space-joined words. Unknown ids render as `<unk:N>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).map(str::to_string).unwrap_or_else(|| format!("<unk:{i}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Like [`decode`](Self::decode), stopping at the first `<eos>` and
    /// skipping reserved tokens.
    pub fn decode_answer(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            version: VOCAB_VERSION,
            tokens: self.tokens.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LitError::MissingArtifact {
                path: path.to_path_buf(),
                hint: "latentqa gen-data".into(),
            },
            _ => e.into(),
        })?;
        let file: VocabFile = serde_json::from_str(&text)?;
        if file.version != VOCAB_VERSION {
            return Err(LitError::Config(format!("unsupported vocabulary version {}", file.version)));
        }
        Self::from_tokens(file.tokens)
    }
}
