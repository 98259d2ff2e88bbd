//! Explicit vocabulary with greedy longest-match tokenization.
//!
//! The vocabulary file is UTF-8 text, one token per line; the line number is
//! the token id. Ids 0, 1, 2 are reserved for BOS, EOS, and UNK. There are no
//! merge rules: encoding walks the text and takes the longest vocabulary entry
//! matching at the cursor, emitting one UNK id per maximal unmatched span.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

/// Number of reserved ids at the front of every vocabulary.
pub const N_RESERVED: usize = 3;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty vocabulary: needs at least the {N_RESERVED} reserved entries (BOS, EOS, UNK)")]
    Empty,
    #[error("line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    by_text: HashMap<String, u32>,
    max_token_len: usize,
}

impl Vocabulary {
    /// Build from token strings, index = id. The first three entries are the
    /// surface forms of BOS/EOS/UNK.
    pub fn new(tokens: Vec<String>) -> Result<Self, VocabError> {
        if tokens.len() < N_RESERVED {
            return Err(VocabError::Empty);
        }
        let mut by_text = HashMap::with_capacity(tokens.len());
        let mut max_token_len = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(VocabError::EmptyToken { line: i + 1 });
            }
            if by_text.insert(tok.clone(), i as u32).is_some() {
                return Err(VocabError::DuplicateToken {
                    line: i + 1,
                    token: tok.clone(),
                });
            }
            max_token_len = max_token_len.max(tok.len());
        }
        Ok(Self {
            tokens,
            by_text,
            max_token_len,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        // A trailing newline produces one empty final split; drop it.
        let mut lines: Vec<&str> = text.split('\n').collect();
        if lines.last() == Some(&"") {
            lines.pop();
        }
        Self::new(lines.into_iter().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.by_text.get(token).copied()
    }

    /// Greedy longest-match encoding. Spans with no matching entry collapse
    /// to a single UNK id per maximal span.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let bytes = text.as_bytes();
        let mut pos = 0;
        let mut unk_open = false;
        while pos < bytes.len() {
            let mut matched = None;
            let limit = (bytes.len() - pos).min(self.max_token_len);
            for len in (1..=limit).rev() {
                if !text.is_char_boundary(pos + len) {
                    continue;
                }
                if let Some(&id) = self.by_text.get(&text[pos..pos + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                    unk_open = false;
                }
                None => {
                    if !unk_open {
                        ids.push(UNK_ID);
                        unk_open = true;
                    }
                    // Advance one char; consecutive unmatched chars share one UNK.
                    pos += 1;
                    while pos < bytes.len() && !text.is_char_boundary(pos) {
                        pos += 1;
                    }
                }
            }
        }
        ids
    }

    /// Concatenate token strings. Unknown ids render as the UNK surface form.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id).unwrap_or(&self.tokens[UNK_ID as usize]));
        }
        out
    }
}
