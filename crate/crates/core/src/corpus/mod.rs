//! Note preprocessing: masking-artifact cleanup, abbreviation-aware sentence
//! segmentation, fragment filtering and vocabulary construction.

mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{atomic_write, read_text};
use crate::error::{Error, Result};

pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};

/// Sentences with fewer whitespace words than this are dropped.
pub const MIN_WORDS: usize = 5;

/// Shipped abbreviation table (one entry per line, `#` comments).
pub const ABBREVIATIONS: &str = include_str!("abbreviations.txt");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub doc_id: String,
    pub admission_id: String,
    pub subject_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub doc_id: String,
    pub admission_id: String,
    pub index: usize,
    pub text: String,
    pub word_count: usize,
}

impl SentenceRecord {
    /// Identifier used as the row id in embedding stores.
    pub fn record_id(&self) -> String {
        format!("{}:{}", self.doc_id, self.index)
    }
}

/// Drops line breaks and the `=`/`_` masking characters, then collapses
/// whitespace runs to single spaces.
pub fn clean_text(raw: &str) -> String {
    let kept: String = raw.chars().filter(|&c| c != '=' && c != '_').collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn abbreviation_table() -> Vec<String> {
    ABBREVIATIONS
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// True when `token` ends a sentence.
fn ends_sentence(token: &str, table: &[String]) -> bool {
    let core = token
        .trim_start_matches(['(', '"', '\'', '['])
        .trim_end_matches([')', '"', '\'', ']']);
    let Some(last) = core.chars().last() else {
        return false;
    };
    match last {
        '!' | '?' => true,
        '.' => {
            if table.iter().any(|a| a.eq_ignore_ascii_case(core)) {
                return false;
            }
            // single capital initial, e.g. "J."
            let mut chars = core.chars();
            !matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_ascii_uppercase())
        }
        _ => false,
    }
}

/// Splits cleaned text into sentences at `.`, `!` and `?`.
///
/// A period does not end a sentence when its token is in the abbreviation
/// table, is a single capital initial, or when the period sits between
/// characters of a token (as in `21.7`).
pub fn segment_sentences(text: &str) -> Vec<String> {
    let table = abbreviation_table();
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for token in text.split_whitespace() {
        current.push(token);
        if ends_sentence(token, &table) {
            out.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        out.push(current.join(" "));
    }
    out
}

pub fn word_count(sentence: &str) -> usize {
    sentence.split_whitespace().count()
}

/// Keeps sentences of at least [`MIN_WORDS`] words, indexing survivors in order.
pub fn filter_fragments(doc_id: &str, admission_id: &str, sentences: &[String]) -> Vec<SentenceRecord> {
    sentences
        .iter()
        .filter(|s| word_count(s) >= MIN_WORDS)
        .enumerate()
        .map(|(index, s)| SentenceRecord {
            doc_id: doc_id.to_string(),
            admission_id: admission_id.to_string(),
            index,
            text: s.clone(),
            word_count: word_count(s),
        })
        .collect()
}

/// Full pipeline for one document.
pub fn preprocess_document(doc: &RawDocument) -> Vec<SentenceRecord> {
    let cleaned = clean_text(&doc.text);
    filter_fragments(&doc.doc_id, &doc.admission_id, &segment_sentences(&cleaned))
}

/// Full pipeline over a corpus, ordered by `(doc_id, index)`.
pub fn preprocess_corpus(docs: &[RawDocument]) -> Result<Vec<SentenceRecord>> {
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = docs.iter().find(|d| !seen.insert(d.doc_id.as_str())) {
        return Err(Error::Input(format!("duplicate doc_id `{}`", dup.doc_id)));
    }
    let mut out: Vec<SentenceRecord> = docs.iter().flat_map(preprocess_document).collect();
    out.sort_by(|a, b| a.doc_id.cmp(&b.doc_id).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Reads one JSON object per non-empty line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}
