//! Word-level whitespace tokenizer.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEPARATOR: &str = "&&";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first (`<pad>`, `<bos>`, `<eos>`, `&&`), then every distinct
    /// word of `texts` in lexicographic order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let specials = [PAD, BOS, EOS, SEPARATOR];
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !specials.contains(w))
            .collect();
        Self::from_words(specials.iter().copied().chain(words).map(str::to_string).collect())
            .expect("specials are unique")
    }

    /// Rebuilds a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let specials = [PAD, BOS, EOS, SEPARATOR];
        if words.len() < specials.len() || words[..4].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::Tokenizer("word list must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || index.insert(w.clone(), i).is_some() {
                return Err(Error::Tokenizer(format!("invalid or duplicate word `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn separator(&self) -> usize {
        3
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Tokenizer(format!("out-of-vocabulary word `{w}`"))))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["b a", "c && a"]);
        assert_eq!(v.words()[..4], [PAD, BOS, EOS, SEPARATOR]);
        assert_eq!(v.id("&&"), Some(v.separator()));
        assert_eq!(v.words()[4..], ["a", "b", "c"]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(["a quiet hum fades"]);
        let ids = v.encode("hum  a fades").unwrap();
        assert_eq!(v.decode(&ids), "hum a fades");
        assert!(matches!(v.encode("loud"), Err(Error::Tokenizer(_))));
    }

    #[test]
    fn prompt_tokenizes_deterministically() {
        let p = "Write an audio caption describing the sound";
        let a = Vocab::build([p, "x y"]);
        let b = Vocab::build(["x y", p]);
        assert_eq!(a, b);
        assert_eq!(a.encode(p).unwrap().len(), 7);
        assert_eq!(a.encode(p).unwrap(), b.encode(p).unwrap());
    }

    #[test]
    fn word_list_round_trips() {
        let v = Vocab::build(["one two"]);
        assert_eq!(Vocab::from_words(v.words().to_vec()).unwrap(), v);
        assert!(Vocab::from_words(vec!["x".into()]).is_err());
    }
}
