use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Result;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const SEP_ID: usize = 4;
const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Lowercases and strips punctuation, keeping alphanumerics and internal
/// apostrophes. Returns None when nothing remains.
pub fn normalize_word(raw: &str) -> Option<String> {
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || *c == '\'')
        .collect();
    let trimmed = cleaned.trim_matches('\'');
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Token <-> id maps with reserved pad/unk/bos/eos/separator ids. Built from
/// training text only: ids are dense, ordered by descending frequency with
/// lexicographic tie-breaks, so construction is stable across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(words: impl Iterator<Item = &'a str>, max_size: Option<usize>) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for raw in words {
            if let Some(w) = normalize_word(raw) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let cap = max_size.unwrap_or(usize::MAX).max(RESERVED.len());
        for (token, _) in ordered {
            if id_to_token.len() >= cap {
                break;
            }
            id_to_token.push(token);
        }
        Vocab::from_tokens(id_to_token)
    }

    fn from_tokens(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Normalizes then maps each word; unknown words become `<unk>`.
    pub fn tokenize(&self, words: &[String]) -> Vec<usize> {
        words
            .iter()
            .map(|w| normalize_word(w).map(|n| self.id(&n)).unwrap_or(UNK_ID))
            .collect()
    }

    /// Maps ids back to words, dropping structural tokens (pad/bos/eos/sep)
    /// and rendering unknowns as `<unk>`.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID && id != SEP_ID)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let value = serde_json::to_value(self)?;
        std::fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let raw: Vocab = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(Vocab::from_tokens(raw.id_to_token))
    }
}
