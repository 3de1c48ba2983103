//! Char-level corpus and vocabulary.
//!
//! The embedded corpus is a plain-text asset compiled into the binary; its
//! character set defines the vocabulary, so every training character is in
//! vocabulary by construction.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type TokenId = u32;

/// Sorted character <-> token-id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Vocab {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        Vocab { chars }
    }

    pub fn from_chars(chars: Vec<char>) -> Vocab {
        debug_assert!(chars.windows(2).all(|w| w[0] < w[1]));
        Vocab { chars }
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode_char(&self, c: char) -> Result<TokenId> {
        self.chars
            .binary_search(&c)
            .map(|i| i as TokenId)
            .map_err(|_| Error::UnknownChar(c))
    }

    pub fn decode(&self, id: TokenId) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn encode_str(&self, s: &str) -> Result<Vec<TokenId>> {
        s.chars().map(|c| self.encode_char(c)).collect()
    }

    pub fn decode_tokens(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&id| self.decode(id)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub tokens: Vec<TokenId>,
    text: String,
}

const EMBEDDED_TEXT: &str = include_str!("../../assets/corpus.txt");

impl Corpus {
    pub fn from_text(text: String) -> Corpus {
        let vocab = Vocab::from_text(&text);
        let tokens = text
            .chars()
            .map(|c| vocab.encode_char(c).expect("vocab built from this text"))
            .collect();
        Corpus {
            vocab,
            tokens,
            text,
        }
    }

    /// The corpus compiled into the crate.
    pub fn embedded() -> Corpus {
        Corpus::from_text(EMBEDDED_TEXT.to_string())
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Leading training slice and trailing held-out slice.
    pub fn split(&self, holdout_frac: f32) -> (&[TokenId], &[TokenId]) {
        let cut = ((self.tokens.len() as f32) * (1.0 - holdout_frac)) as usize;
        let cut = cut.clamp(1, self.tokens.len().saturating_sub(1));
        self.tokens.split_at(cut)
    }

    fn is_boundary(&self, pos: usize) -> bool {
        if pos == 0 {
            return true;
        }
        matches!(self.vocab.decode(self.tokens[pos - 1]), Some(' ') | Some('\n'))
    }

    /// A length-`len` window starting at a word boundary; the in-distribution
    /// secret sampler.
    pub fn sample_window(&self, len: usize, rng: &mut Rng) -> Vec<TokenId> {
        assert!(len > 0 && len < self.tokens.len());
        loop {
            let pos = rng.below(self.tokens.len() - len);
            if self.is_boundary(pos) {
                return self.tokens[pos..pos + len].to_vec();
            }
        }
    }

    /// Empirical distribution of sequence-initial tokens (characters that
    /// open a word-boundary window), Laplace-smoothed so every token has
    /// nonzero mass.
    pub fn initial_token_prior(&self) -> Vec<f32> {
        let v = self.vocab.size();
        let mut counts = vec![1.0f64; v];
        for pos in 0..self.tokens.len() {
            if self.is_boundary(pos) {
                counts[self.tokens[pos] as usize] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        counts.iter().map(|&c| (c / total) as f32).collect()
    }
}
