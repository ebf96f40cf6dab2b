//! Corpus validation: schema and invariant checks plus per-variant token
//! length statistics (the text-length axis of the variant comparison).

use std::path::Path;

use serde::Serialize;

use crate::corpus::{load_corpus, variant_stats, VariantStats};

#[derive(Debug, Serialize)]
pub struct CorpusValidation {
    pub path: String,
    pub entries: usize,
    pub datasets: usize,
    pub errors: Vec<String>,
    pub stats: Vec<VariantStats>,
}

impl CorpusValidation {
    pub fn ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Loads and validates a corpus file, collecting any schema or invariant
/// failure as a named error instead of bailing out.
pub fn validate_corpus_file(path: impl AsRef<Path>) -> CorpusValidation {
    let path = path.as_ref();
    match load_corpus(path) {
        Ok(entries) => {
            let datasets = {
                let mut ids: Vec<&str> = entries.iter().map(|e| e.dataset_id.as_str()).collect();
                ids.dedup();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            };
            CorpusValidation {
                path: path.display().to_string(),
                entries: entries.len(),
                datasets,
                errors: Vec::new(),
                stats: variant_stats(&entries),
            }
        }
        Err(e) => CorpusValidation {
            path: path.display().to_string(),
            entries: 0,
            datasets: 0,
            errors: vec![e.to_string()],
            stats: Vec::new(),
        },
    }
}
