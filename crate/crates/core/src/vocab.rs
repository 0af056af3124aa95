//! Word-level vocabulary shared by goals, actions, captions and the
//! pretraining corpus.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{CoreError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Collects every lowercased whitespace-delimited word; ids follow sorted order
    /// after the reserved tokens.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CoreError::EmptyCorpus);
        }
        let words: BTreeSet<String> = corpus
            .iter()
            .flat_map(|line| line.as_ref().split_whitespace().map(str::to_lowercase))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(CoreError::TokenOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.ids.get(&w.to_lowercase()).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins words with single spaces; reserved ids other than SEP are skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let w = self.token(id)?;
            if (id as usize) < RESERVED.len() && id != SEP {
                continue;
            }
            words.push(w);
        }
        Ok(words.join(" "))
    }

    pub fn contains_unk(&self, text: &str) -> bool {
        self.encode(text).contains(&UNK)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()]
                .iter()
                .zip(RESERVED)
                .any(|(a, b)| a != b)
        {
            return Err(CoreError::Config(
                "vocabulary file must start with the reserved tokens".into(),
            ));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(CoreError::Config(
                "vocabulary file has duplicate tokens".into(),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
