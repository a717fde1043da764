use std::collections::HashMap;

use crate::error::{ensure, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const FILE_HEADER: &str = "#swifter-vocab v1 min_freq=";

/// Lowercases, drops ASCII punctuation and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// Words seen at least `min_freq` times, ordered by count (descending)
    /// then lexicographically, after the four specials.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        ensure!(
            min_freq >= 1,
            Error::Config("min_freq must be at least 1".into())
        );
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in normalize(line.as_ref()).split(' ').filter(|w| !w.is_empty()) {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w), min_freq)
    }

    fn from_words(words: impl IntoIterator<Item = String>, min_freq: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            ensure!(
                index.insert(t.clone(), i).is_none(),
                Error::Format(format!("duplicate vocabulary token {t:?}"))
            );
        }
        Ok(Self {
            tokens,
            index,
            min_freq,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS.len()..]
    }

    /// Word ids of the normalized text; unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        normalize(text)
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(|w| match self.index.get(w) {
                Some(&i) if i >= SPECIAL_TOKENS.len() => i,
                _ => UNK,
            })
            .collect()
    }

    /// `BOS`, the words, `EOS`.
    pub fn encode_caption(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.tokenize(text));
        ids.push(EOS);
        ids
    }

    /// Joins word tokens with spaces. Stops at `EOS`, skips `PAD` and `BOS`,
    /// renders `UNK` (and out-of-range ids) as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &i in ids {
            match i {
                EOS => break,
                PAD | BOS => {}
                _ => words.push(self.token(i).filter(|_| i != UNK).unwrap_or(SPECIAL_TOKENS[UNK])),
            }
        }
        words.join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("{FILE_HEADER}{}\n", self.min_freq);
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self> {
        let mut lines = s.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let min_freq = header
            .strip_prefix(FILE_HEADER)
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad vocabulary header {header:?}")))?;
        Self::from_words(lines.map(str::to_string), min_freq)
    }
}
