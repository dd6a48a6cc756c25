use std::collections::HashMap;
use std::sync::OnceLock;

use super::world::{ATTRIBUTE_KINDS, ATTRIBUTE_VALUES, CLASSES, CONTEXTS, VERBS};
use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const SKS: &str = "<sks>";

const STRUCTURAL: [&str; 35] = [
    "is", ".", "'s", "a", "what", "where", "can", "you", "describe", "?", "at", "the", "in", "photo", "yes",
    "no", "with", "their", "request", "query", "answer", "prompt", "plan", "remove", "from", ":", "change", "to",
    "flip", "move", "turn", "into", "sketch", "of", "and",
];

/// Whitespace-tokenized closed vocabulary of the micro world.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let mut words = vec![EOS, SKS];
            words.extend(STRUCTURAL);
            words.extend(VERBS);
            words.extend(ATTRIBUTE_KINDS);
            for vals in ATTRIBUTE_VALUES {
                words.extend(vals);
            }
            for (_, members) in CLASSES {
                words.extend(*members);
            }
            words.extend(CONTEXTS);
            let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
            Vocab { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Index(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    pub fn eos(&self) -> usize {
        0
    }

    pub fn sks(&self) -> usize {
        1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
