use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const L2R: usize = 2;
pub const R2L: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "</s>", "<l2r>", "<r2l>"];

/// Token/id bijection. Ids `0..4` are reserved for padding, end of
/// sentence and the two direction start tokens; the start tokens are
/// ordinary trainable embedding rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the distinct tokens of `words`, sorted.
    pub fn from_tokens<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct: Vec<&str> = words.into_iter().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            distinct
                .into_iter()
                .filter(|w| !RESERVED.contains(w))
                .map(String::from),
        );
        Self::from_list(tokens)
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::invalid("vocabulary", format!("unknown token {w:?}")))
            })
            .collect()
    }

    /// Renders ids as text, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::format(
                path,
                "vocabulary does not start with the reserved tokens",
            ));
        }
        Ok(Self::from_list(tokens))
    }
}
