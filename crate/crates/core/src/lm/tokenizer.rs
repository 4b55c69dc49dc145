use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Closed word-level vocabulary. Ids 0..4 are the specials, the remaining
/// words follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    words: Vec<String>,
}

impl From<TokenizerRepr> for Tokenizer {
    fn from(r: TokenizerRepr) -> Self {
        let ids = r
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            words: r.words,
            ids,
        }
    }
}

impl From<Tokenizer> for TokenizerRepr {
    fn from(t: Tokenizer) -> Self {
        Self { words: t.words }
    }
}

impl Tokenizer {
    /// Builds a vocabulary from every whitespace-separated word in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        let words: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(set)
            .map(str::to_string)
            .collect();
        TokenizerRepr { words }.into()
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Unknown words map to [`UNK`].
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins words with single spaces; special tokens are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i))
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_then_sorted_words() {
        let t = Tokenizer::from_texts(["b a", "c a ."]);
        assert_eq!(t.vocab_size(), 8);
        assert_eq!(t.id("."), Some(4));
        assert_eq!(t.id("a"), Some(5));
        assert_eq!(t.word(EOS), Some("<eos>"));
    }

    #[test]
    fn unknown_words_become_unk() {
        let t = Tokenizer::from_texts(["hello world"]);
        assert_eq!(t.tokenize("hello there"), vec![t.id("hello").unwrap(), UNK]);
    }

    #[test]
    fn detokenize_skips_specials() {
        let t = Tokenizer::from_texts(["x y"]);
        let mut ids = vec![BOS];
        ids.extend(t.tokenize("x y"));
        ids.push(EOS);
        assert_eq!(t.detokenize(&ids), "x y");
    }

    #[test]
    fn serde_keeps_the_id_map() {
        let t = Tokenizer::from_texts(["one two three"]);
        let json = serde_json::to_string(&t).unwrap();
        let back: Tokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.id("two"), t.id("two"));
    }
}
