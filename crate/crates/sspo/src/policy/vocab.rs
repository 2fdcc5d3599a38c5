//! Token vocabulary: dense ids over the task tokens plus format specials.

use crate::corpus::{self, SPECIAL_TOKENS};
use crate::duration::DurationOracle;
use crate::policy::PolicyError;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Specials first in fixed order, then task tokens sorted. Ids are dense.
    pub fn new(task_tokens: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut task: Vec<String> = task_tokens
            .into_iter()
            .filter(|t| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        task.sort_unstable();
        task.dedup();
        tokens.extend(task);
        Self::from_tokens(tokens)
    }

    /// Rebuild from an ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// All tokens the duration table knows about (it covers the whole
    /// emittable vocabulary, specials included).
    pub fn from_duration_table(oracle: &DurationOracle) -> Self {
        Self::new(oracle.token_durations.keys().cloned())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn bos(&self) -> u32 {
        self.index[corpus::TOK_BOS]
    }

    pub fn eos(&self) -> u32 {
        self.index[corpus::TOK_EOS]
    }

    pub fn newline(&self) -> u32 {
        self.index[corpus::TOK_NL]
    }

    pub fn open_paren(&self) -> u32 {
        self.index[corpus::TOK_OPEN]
    }

    pub fn close_paren(&self) -> u32 {
        self.index[corpus::TOK_CLOSE]
    }

    /// Tokenize text and map to ids; unknown tokens are an error.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>, PolicyError> {
        corpus::tokenize_text(text)
            .into_iter()
            .map(|t| {
                self.id(&t)
                    .ok_or_else(|| PolicyError::UnknownToken(t.clone()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks: Vec<String> = ids
            .iter()
            .map(|&i| self.tokens[i as usize].clone())
            .collect();
        corpus::detokenize(&toks)
    }

    /// Token durations indexed by id, for hot scoring loops.
    pub fn durations_by_id(&self, oracle: &DurationOracle) -> Vec<f64> {
        self.tokens
            .iter()
            .map(|t| oracle.token_durations[t])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_task, SyntheticTaskSpec};

    #[test]
    fn ids_are_dense_and_specials_first() {
        let spec = SyntheticTaskSpec {
            source_vocab_size: 8,
            line_length_range: (2, 2),
            lines_per_document: 2,
            total_documents: 2,
            test_documents: 0,
            ..SyntheticTaskSpec::default()
        };
        let (_, oracle, _) = generate_task(&spec, 1).unwrap();
        let vocab = Vocabulary::from_duration_table(&oracle);
        assert_eq!(vocab.token(vocab.bos()), corpus::TOK_BOS);
        for (i, t) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.id(t), Some(i as u32));
        }
        // specials + 8 sources * 6 synonyms + 8 sources + 4 function words
        assert_eq!(vocab.len(), 9 + 8 * 6 + 8 + 4);
    }

    #[test]
    fn encode_decode_round_trip() {
        let spec = SyntheticTaskSpec {
            source_vocab_size: 8,
            line_length_range: (2, 2),
            lines_per_document: 2,
            total_documents: 2,
            test_documents: 0,
            ..SyntheticTaskSpec::default()
        };
        let (_, oracle, _) = generate_task(&spec, 1).unwrap();
        let vocab = Vocabulary::from_duration_table(&oracle);
        let text = "s01 s02(t01x3 fw0 t02x1)\n";
        let ids = vocab.encode_text(text).unwrap();
        assert_eq!(vocab.decode(&ids), text);
        assert!(vocab.encode_text("nonsense").is_err());
    }
}
