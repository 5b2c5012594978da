//! Closed prompt vocabulary and fixed-length token sequences.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prompt length `L`.
pub const PROMPT_LEN: usize = 6;
/// Vocabulary size.
pub const VOCAB: usize = 7;

pub const NULL: usize = 0;
pub const PAD: usize = 1;
pub const RED: usize = 2;
pub const GREEN: usize = 3;
pub const BLUE: usize = 4;
pub const SQUARE: usize = 5;
pub const DISK: usize = 6;

const WORDS: [&str; VOCAB] = ["<null>", "<pad>", "red", "green", "blue", "square", "disk"];

pub fn word(id: usize) -> &'static str {
    WORDS.get(id).copied().unwrap_or("<?>")
}

pub fn lookup(word: &str) -> Result<usize> {
    WORDS
        .iter()
        .position(|w| *w == word)
        .filter(|&id| id != NULL && id != PAD)
        .ok_or_else(|| Error::invalid(format!("unknown word {word:?}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: [usize; PROMPT_LEN],
}

impl PromptTokens {
    pub fn new(ids: [usize; PROMPT_LEN]) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i >= VOCAB) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        if ids.iter().all(|&i| i == PAD) {
            return Err(Error::invalid("prompt is entirely padding"));
        }
        Ok(PromptTokens { ids })
    }

    /// The unconditional prompt `∅`.
    pub fn null() -> Self {
        PromptTokens {
            ids: [NULL; PROMPT_LEN],
        }
    }

    /// Words in order, padded with PAD.
    pub fn from_words(words: &[usize]) -> Result<Self> {
        if words.len() > PROMPT_LEN {
            return Err(Error::invalid(format!("prompt longer than {PROMPT_LEN} tokens")));
        }
        let mut ids = [PAD; PROMPT_LEN];
        ids[..words.len()].copy_from_slice(words);
        Self::new(ids)
    }

    pub fn is_null(&self) -> bool {
        self.ids.iter().all(|&i| i == NULL)
    }

    /// Columns that take part in attention (everything but PAD).
    pub fn keep_mask(&self) -> [bool; PROMPT_LEN] {
        self.ids.map(|i| i != PAD)
    }

    pub fn non_pad(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }

    /// Position of the first occurrence of `id`.
    pub fn position(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Positions of a space-separated phrase such as `"red square"`, matched
    /// as a consecutive run.
    pub fn find_phrase(&self, phrase: &str) -> Result<Vec<usize>> {
        let words = phrase
            .split_whitespace()
            .map(lookup)
            .collect::<Result<Vec<_>>>()?;
        if words.is_empty() {
            return Err(Error::invalid("empty target phrase"));
        }
        (0..=PROMPT_LEN - words.len())
            .find(|&s| self.ids[s..s + words.len()] == words[..])
            .map(|s| (s..s + words.len()).collect())
            .ok_or_else(|| Error::invalid(format!("phrase {phrase:?} not in prompt \"{self}\"")))
    }
}

impl fmt::Display for PromptTokens {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let words: Vec<_> = self.ids.iter().filter(|&&i| i != PAD).map(|&i| word(i)).collect();
        write!(f, "{}", words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_lookup() {
        let p = PromptTokens::from_words(&[RED, SQUARE, BLUE, DISK]).unwrap();
        assert_eq!(p.find_phrase("blue disk").unwrap(), vec![2, 3]);
        assert_eq!(p.find_phrase("square").unwrap(), vec![1]);
        assert!(p.find_phrase("green disk").is_err());
        assert!(p.find_phrase("<pad>").is_err());
        assert_eq!(p.to_string(), "red square blue disk");
    }

    #[test]
    fn null_prompt_keeps_every_column() {
        let p = PromptTokens::null();
        assert!(p.is_null());
        assert!(p.keep_mask().iter().all(|&k| k));
    }

    #[test]
    fn rejects_all_pad() {
        assert!(PromptTokens::new([PAD; PROMPT_LEN]).is_err());
        assert!(PromptTokens::from_words(&[]).is_err());
    }
}
