use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const MAX_SENTENCE_TOKENS: usize = 150;

const RESERVED: [&str; NUM_RESERVED] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Normalized surface form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    normalize_tokens(text).join(" ")
}

/// Token vocabulary with reserved ids `BOS=0, EOS=1, UNK=2, PAD=3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from non-reserved tokens in id order (first token gets id 4).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        };
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("invalid vocabulary token {t:?}")));
            }
            if v.index.contains_key(&t) {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Tokens with count ≥ `min_count`, ordered by frequency (descending) then
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for t in normalize_tokens(line.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    /// `[BOS, tokens..., EOS]`, unknown words mapped to `UNK`, at most 150
    /// interior tokens.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::with_capacity(8);
        ids.push(BOS);
        ids.extend(
            normalize_tokens(text)
                .iter()
                .take(MAX_SENTENCE_TOKENS)
                .map(|t| self.id(t)),
        );
        ids.push(EOS);
        ids
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary text. Stops at
    /// the first `EOS`; `BOS` and `PAD` are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => continue,
                _ => words.push(self.token(id).unwrap_or(RESERVED[UNK])),
            }
        }
        words.join(" ")
    }

    /// One token per line; line `n` (1-based) holds id `n - 1 + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines()).map_err(|e| Error::format(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_wraps_and_splits_punctuation() {
        let v = Vocabulary::from_tokens(["pick", "up", "the", "mug", "."]).unwrap();
        assert_eq!(v.encode("Pick up the mug."), vec![BOS, 4, 5, 6, 7, 8, EOS]);
    }

    #[test]
    fn unseen_word_maps_to_unk() {
        let v = Vocabulary::from_tokens(["the"]).unwrap();
        assert_eq!(v.encode("the zebra"), vec![BOS, 4, UNK, EOS]);
    }

    #[test]
    fn long_sentences_are_truncated() {
        let v = Vocabulary::from_tokens(["a"]).unwrap();
        let text = vec!["a"; 200].join(" ");
        assert_eq!(v.encode(&text).len(), MAX_SENTENCE_TOKENS + 2);
    }

    #[test]
    fn build_orders_by_frequency_then_lexically() {
        let v = Vocabulary::build(&["a b", "a"], 1).unwrap();
        assert!(v.id("a") < v.id("b"));
        let w = Vocabulary::build(&["z y", "y z x"], 1).unwrap();
        assert_eq!(w.words(), &["y", "z", "x"]);
        assert_eq!(Vocabulary::build(&["a b", "a"], 1).unwrap(), v);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let v = Vocabulary::build(&["a b", "a"], 2).unwrap();
        assert_eq!(v.words(), &["a"]);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::from_tokens(["x", "y"]).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), "x y");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(&["walk to the fridge", "open the fridge"], 1).unwrap();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(back.id(&first), NUM_RESERVED);
    }
}
