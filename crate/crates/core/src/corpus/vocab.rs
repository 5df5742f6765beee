use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::SentenceRecord;
use crate::binio::{atomic_write, read_text};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut run = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                run.extend(c.to_lowercase());
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_frequency: usize,
}

impl Vocabulary {
    pub fn specials_only(min_frequency: usize) -> Self {
        Self::from_tokens(Vec::new(), min_frequency)
    }

    fn from_tokens(regular: Vec<String>, min_frequency: usize) -> Self {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(regular).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            ids,
            min_frequency,
        }
    }

    /// Tokens seen at least `min_frequency` times, by descending frequency then
    /// lexicographically.
    pub fn build(corpus: &[SentenceRecord], min_frequency: usize) -> Result<Self> {
        Self::build_from_texts(corpus.iter().map(|r| r.text.as_str()), min_frequency)
    }

    pub fn build_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_frequency: usize) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::Usage("min_frequency must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_texts = 0;
        for text in texts {
            n_texts += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_texts == 0 {
            return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_frequency && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect(), min_frequency))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK]).to_string())
            .collect()
    }

    /// `BOS`, token ids, `EOS`, truncated to `max_len` ids (the last kept id
    /// is `EOS` only when the sentence fits).
    pub fn encode_sentence(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        let mut ids = Vec::with_capacity(max_len.min(64));
        ids.push(BOS);
        ids.extend(tokenize(sentence).iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids.truncate(max_len);
        ids
    }

    /// Content ids of a sentence without specials or truncation.
    pub fn encode_content(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).iter().map(|t| self.id(t)).collect()
    }

    /// `id<TAB>token` per line, specials first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{i}\t{t}").unwrap();
        }
        out
    }

    /// Parses [`Vocabulary::to_text`] output. The file does not record the
    /// frequency threshold, so the loaded value is 1.
    pub fn from_text(text: &str) -> Result<Self> {
        let min_frequency = 1;
        let mut tokens = Vec::new();
        let err = |line: usize, message: String| Error::Parse {
            path: "<vocabulary>".into(),
            line,
            message,
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| err(lineno + 1, "expected `id<TAB>token`".into()))?;
            let id: usize = id.parse().map_err(|_| err(lineno + 1, format!("bad id `{id}`")))?;
            if id != tokens.len() {
                return Err(err(lineno + 1, format!("id {id} out of order, expected {}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4] != SPECIAL_TOKENS {
            return Err(err(1, "vocabulary must start with the four special tokens".into()));
        }
        let regular = tokens.split_off(SPECIAL_TOKENS.len());
        let vocab = Self::from_tokens(regular, min_frequency);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(err(1, "duplicate token".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }
}
