//! Per-category rich-text descriptions: loading, validation, tokenization,
//! and the vocabulary used by the rectification loss.
//!
//! Corpus objects are immutable after load and safe to share across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;
pub const RESERVED_TOKENS: usize = 4;

/// Which stored description of a category an entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Manual,
    Extended,
    Llm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Manual => write!(f, "manual"),
            Variant::Extended => write!(f, "extended"),
            Variant::Llm => write!(f, "llm"),
        }
    }
}

/// One category's rich description in one variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RichTextEntry {
    pub dataset_id: String,
    pub category_name: String,
    pub variant: Variant,
    pub text: String,
}

impl RichTextEntry {
    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(CoreError::Validation(format!(
                "empty text for ({}, {}, {})",
                self.dataset_id, self.category_name, self.variant
            )));
        }
        let has_alpha = split_tokens(&self.text)
            .iter()
            .any(|t| t.chars().any(|c| c.is_alphabetic()));
        if !has_alpha {
            return Err(CoreError::Validation(format!(
                "no alphabetic token in text for ({}, {}, {})",
                self.dataset_id, self.category_name, self.variant
            )));
        }
        Ok(())
    }
}

/// Token-id mapping with fixed reserved ids BOS=0, EOS=1, UNK=2, PAD=3.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    token_to_id: IndexMap<String, u32>,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        RESERVED_TOKENS + self.token_to_id.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Tokens in id order (reserved ids excluded).
    pub fn tokens(&self) -> impl Iterator<Item = (&str, u32)> {
        self.token_to_id.iter().map(|(t, id)| (t.as_str(), *id))
    }
}

/// A tokenized description: `[BOS, interior.., EOS]`, length `M >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Wraps raw ids, enforcing the BOS/EOS sentinel invariants.
    pub fn from_ids(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.len() < 2 {
            return Err(CoreError::Validation(format!(
                "token sequence length {} < 2",
                ids.len()
            )));
        }
        if ids[0] != BOS_ID || *ids.last().unwrap() != EOS_ID {
            return Err(CoreError::Validation(
                "token sequence must start with BOS and end with EOS".into(),
            ));
        }
        for &id in &ids[1..ids.len() - 1] {
            if id == BOS_ID || id == EOS_ID {
                return Err(CoreError::Validation(
                    "BOS/EOS in interior of token sequence".into(),
                ));
            }
        }
        if let Some(&max) = ids.iter().max() {
            if max as usize >= vocab_size {
                return Err(CoreError::Validation(format!(
                    "token id {max} out of vocabulary range {vocab_size}"
                )));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Total length M including the sentinels.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: M >= 2
    }
}

// ---------------------------------------------------------------------------
// Corpus JSON format

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusFile {
    datasets: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryRecord {
    name: String,
    texts: TextsRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TextsRecord {
    manual: String,
    extended: Option<String>,
    llm: Option<String>,
}

/// Loads and validates a corpus file; entries keep file order.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RichTextEntry>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path)?;
    parse_corpus(&raw, &path.display().to_string())
}

/// Parses corpus JSON from a string (`origin` used in error messages).
pub fn parse_corpus(raw: &str, origin: &str) -> Result<Vec<RichTextEntry>> {
    let file: CorpusFile = serde_json::from_str(raw).map_err(|e| CoreError::Parse {
        path: origin.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut entries = Vec::new();
    let mut seen: HashMap<(String, String, Variant), ()> = HashMap::new();
    for ds in &file.datasets {
        for cat in &ds.categories {
            let mut push = |variant: Variant, text: &str| -> Result<()> {
                let entry = RichTextEntry {
                    dataset_id: ds.id.clone(),
                    category_name: cat.name.clone(),
                    variant,
                    text: text.to_string(),
                };
                entry.validate()?;
                let key = (ds.id.clone(), cat.name.clone(), variant);
                if seen.insert(key, ()).is_some() {
                    return Err(CoreError::Validation(format!(
                        "duplicate entry ({}, {}, {variant})",
                        ds.id, cat.name
                    )));
                }
                entries.push(entry);
                Ok(())
            };
            push(Variant::Manual, &cat.texts.manual)?;
            if let Some(ext) = &cat.texts.extended {
                push(Variant::Extended, ext)?;
            }
            if let Some(llm) = &cat.texts.llm {
                push(Variant::Llm, llm)?;
            }
        }
    }
    Ok(entries)
}

/// Re-serializes entries into the corpus JSON format (inverse of [`load_corpus`]).
pub fn serialize_corpus(entries: &[RichTextEntry]) -> Result<String> {
    let mut datasets: IndexMap<String, IndexMap<String, TextsRecord>> = IndexMap::new();
    for e in entries {
        let ds = datasets.entry(e.dataset_id.clone()).or_default();
        let cat = ds.entry(e.category_name.clone()).or_insert(TextsRecord {
            manual: String::new(),
            extended: None,
            llm: None,
        });
        match e.variant {
            Variant::Manual => cat.manual = e.text.clone(),
            Variant::Extended => cat.extended = Some(e.text.clone()),
            Variant::Llm => cat.llm = Some(e.text.clone()),
        }
    }
    let file = CorpusFile {
        datasets: datasets
            .into_iter()
            .map(|(id, cats)| DatasetRecord {
                id,
                categories: cats
                    .into_iter()
                    .map(|(name, texts)| CategoryRecord { name, texts })
                    .collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

// ---------------------------------------------------------------------------
// Tokenization

/// Lower-cases and splits on every non-alphanumeric boundary, dropping the
/// separators. Deterministic by construction.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

/// Builds a vocabulary over every token occurring at least `min_count` times.
/// Ids are assigned from 4 in descending frequency, ties lexicographic.
pub fn build_vocabulary(entries: &[RichTextEntry], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(CoreError::Precondition("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in entries {
        for tok in split_tokens(&e.text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut token_to_id = IndexMap::new();
    for (i, (tok, _)) in kept.into_iter().enumerate() {
        token_to_id.insert(tok, (RESERVED_TOKENS + i) as u32);
    }
    Ok(Vocabulary { token_to_id })
}

/// Tokenizes text against a vocabulary; OOV tokens map to UNK, and the result
/// is wrapped in BOS/EOS. Empty text yields `[BOS, EOS]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![BOS_ID];
    for tok in split_tokens(text) {
        ids.push(vocab.id_of(&tok).unwrap_or(UNK_ID));
    }
    ids.push(EOS_ID);
    TokenSequence { ids }
}

// ---------------------------------------------------------------------------
// Statistics (the text-length axis of the variant comparison)

#[derive(Debug, Clone, Serialize)]
pub struct VariantStats {
    pub dataset_id: String,
    pub variant: Variant,
    pub entries: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub mean_tokens: f64,
}

/// Interior token-count statistics per (dataset, variant), in first-seen order.
pub fn variant_stats(entries: &[RichTextEntry]) -> Vec<VariantStats> {
    let mut groups: IndexMap<(String, Variant), Vec<usize>> = IndexMap::new();
    for e in entries {
        let n = split_tokens(&e.text).len();
        groups
            .entry((e.dataset_id.clone(), e.variant))
            .or_default()
            .push(n);
    }
    groups
        .into_iter()
        .map(|((dataset_id, variant), lens)| VariantStats {
            dataset_id,
            variant,
            entries: lens.len(),
            min_tokens: *lens.iter().min().unwrap(),
            max_tokens: *lens.iter().max().unwrap(),
            mean_tokens: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
        })
        .collect()
}
