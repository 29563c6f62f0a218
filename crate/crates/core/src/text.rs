//! Vocabulary, tokenizer and the query/document preparation rules.
//!
//! Queries are prefixed with `[Q]` and padded with `[MASK]` to a fixed
//! length; documents are prefixed with `[D]` and truncated, never padded.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const QUERY_MARKER: &str = "[Q]";
pub const DOC_MARKER: &str = "[D]";
pub const MASK: &str = "[MASK]";
pub const UNKNOWN: &str = "[UNK]";

const VOCAB_MAGIC: &str = "#! optical-vocab 1";
const SPECIALS_PREFIX: &str = "#! specials";

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub query: TokenId,
    pub doc: TokenId,
    pub mask: TokenId,
    pub unknown: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    ids: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered term list that already contains
    /// the four special tokens. Ids are list positions.
    pub fn new(terms: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(terms.len());
        for (i, term) in terms.iter().enumerate() {
            if term.is_empty() {
                return Err(Error::InvalidInput(format!("empty vocabulary term at id {i}")));
            }
            if ids.insert(term.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary term `{term}`")));
            }
        }
        let lookup = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks special token {name}")))
        };
        let specials = SpecialIds {
            query: lookup(QUERY_MARKER)?,
            doc: lookup(DOC_MARKER)?,
            mask: lookup(MASK)?,
            unknown: lookup(UNKNOWN)?,
        };
        Ok(Self {
            terms,
            ids,
            specials,
        })
    }

    /// Specials at ids 0..4, followed by `content` in order.
    pub fn with_specials<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut terms: Vec<String> = [QUERY_MARKER, DOC_MARKER, MASK, UNKNOWN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        terms.extend(content.into_iter().map(Into::into));
        Self::new(terms)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, term: &str) -> Option<TokenId> {
        self.ids.get(term).copied()
    }

    pub fn term(&self, id: TokenId) -> Option<&str> {
        self.terms.get(id as usize).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let s = self.specials;
        id == s.query || id == s.doc || id == s.mask || id == s.unknown
    }

    /// File layout: a `#!` header block (magic line, then the special-token
    /// declaration), followed by one term per line where line index = id.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{VOCAB_MAGIC}").unwrap();
        writeln!(out, "{SPECIALS_PREFIX} {QUERY_MARKER} {DOC_MARKER} {MASK} {UNKNOWN}").unwrap();
        for t in &self.terms {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|msg| Error::format(path, msg))
    }

    fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_MAGIC) {
            return Err("missing vocabulary header".into());
        }
        let specials = lines.next().ok_or("missing specials declaration")?;
        let declared: Vec<&str> = specials
            .strip_prefix(SPECIALS_PREFIX)
            .ok_or("missing specials declaration")?
            .split_whitespace()
            .collect();
        if declared != [QUERY_MARKER, DOC_MARKER, MASK, UNKNOWN] {
            return Err(format!("unexpected specials declaration {declared:?}"));
        }
        let terms: Vec<String> = lines.map(str::to_string).collect();
        Self::new(terms).map_err(|e| e.to_string())
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || !c.is_alphanumeric()
}

/// Lowercases, splits on whitespace and punctuation, then greedily matches
/// the longest vocabulary prefix of each word. Any remainder with no
/// matching prefix becomes a single `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    for word in lowered.split(is_separator).filter(|w| !w.is_empty()) {
        let mut rest = word;
        while !rest.is_empty() {
            if let Some(id) = vocab.id(rest) {
                out.push(id);
                break;
            }
            let cuts: Vec<usize> = rest.char_indices().map(|(i, _)| i).skip(1).collect();
            let found = cuts
                .into_iter()
                .rev()
                .find_map(|end| vocab.id(&rest[..end]).map(|id| (id, end)));
            match found {
                Some((id, end)) => {
                    out.push(id);
                    rest = &rest[end..];
                }
                None => {
                    out.push(vocab.specials().unknown);
                    break;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqKind {
    Query,
    Document,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub kind: SeqKind,
}

/// `[Q]` + content, truncated or `[MASK]`-padded to exactly `l_max` tokens.
pub fn prepare_query(ids: &[TokenId], l_max: usize, specials: SpecialIds) -> TokenSequence {
    let l_max = l_max.max(2);
    let mut out = Vec::with_capacity(l_max);
    out.push(specials.query);
    out.extend(ids.iter().take(l_max - 1));
    out.resize(l_max, specials.mask);
    TokenSequence {
        ids: out,
        kind: SeqKind::Query,
    }
}

/// `[D]` + content, keeping at most `d_max` tokens in total.
pub fn prepare_document(ids: &[TokenId], d_max: usize, specials: SpecialIds) -> TokenSequence {
    let d_max = d_max.max(2);
    let mut out = Vec::with_capacity(d_max.min(ids.len() + 1));
    out.push(specials.doc);
    out.extend(ids.iter().take(d_max - 1));
    TokenSequence {
        ids: out,
        kind: SeqKind::Document,
    }
}

/// Overlapping windows at offsets `0, stride, 2·stride, …`. The walk stops
/// once a window reaches the end of the input, so a trailing window is only
/// emitted when it covers tokens the previous one did not.
pub fn split_passages(ids: &[TokenId], window: usize, stride: usize) -> Vec<Vec<TokenId>> {
    let window = window.max(1);
    let stride = stride.clamp(1, window);
    let mut passages = Vec::new();
    let mut offset = 0;
    loop {
        let end = (offset + window).min(ids.len());
        passages.push(ids[offset..end].to_vec());
        if offset + window >= ids.len() {
            break;
        }
        offset += stride;
    }
    passages
}
