//! Readers and writers for the plain-text bundle formats.
//!
//! - corpus: JSONL, one `{"doc_id": .., "text": ..}` object per line
//! - queries: TSV `query_id<TAB>text`
//! - bitext: TSV `source_sentence<TAB>target_sentence`
//! - triples: TSV `query_text<TAB>positive_doc_id<TAB>negative_doc_id`
//! - bijection: TSV `teacher_term<TAB>student_term`
//! - passages: JSONL, `{"doc_id": .., "passages": [[id, ..], ..]}`

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexical::CorpusDoc;
use crate::text::TokenId;

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn split_fields<'a>(path: &Path, lineno: usize, line: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::format(
            path,
            format!("line {lineno}: expected {n} tab-separated fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    let text = read_text(path)?;
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in lines(&text) {
        let doc: CorpusDoc =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Empty(format!("corpus {}", path.display())));
    }
    Ok(docs)
}

pub fn corpus_to_jsonl(docs: &[CorpusDoc]) -> String {
    docs.iter()
        .map(|d| serde_json::to_string(d).expect("corpus record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in lines(&text) {
        let f = split_fields(path, lineno, line, 2)?;
        if !seen.insert(f[0]) {
            return Err(Error::format(path, format!("line {lineno}: duplicate query id `{}`", f[0])));
        }
        out.push(Query {
            id: f[0].to_string(),
            text: f[1].to_string(),
        });
    }
    Ok(out)
}

pub fn queries_to_tsv(queries: &[Query]) -> String {
    queries.iter().map(|q| format!("{}\t{}\n", q.id, q.text)).collect()
}

/// One parallel sentence pair; `source` is in the student language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitextLine {
    pub source: String,
    pub target: String,
}

pub fn load_bitext(path: &Path) -> Result<Vec<BitextLine>> {
    let text = read_text(path)?;
    lines(&text)
        .map(|(lineno, line)| {
            let f = split_fields(path, lineno, line, 2)?;
            Ok(BitextLine {
                source: f[0].to_string(),
                target: f[1].to_string(),
            })
        })
        .collect()
}

pub fn bitext_to_tsv(pairs: &[BitextLine]) -> String {
    pairs.iter().map(|p| format!("{}\t{}\n", p.source, p.target)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripleLine {
    pub query: String,
    pub pos: String,
    pub neg: String,
}

pub fn load_triples(path: &Path) -> Result<Vec<TripleLine>> {
    let text = read_text(path)?;
    lines(&text)
        .map(|(lineno, line)| {
            let f = split_fields(path, lineno, line, 3)?;
            Ok(TripleLine {
                query: f[0].to_string(),
                pos: f[1].to_string(),
                neg: f[2].to_string(),
            })
        })
        .collect()
}

pub fn triples_to_tsv(triples: &[TripleLine]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.query, t.pos, t.neg))
        .collect()
}

/// Word-level translation between the teacher and student languages.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Bijection {
    forward: BTreeMap<String, String>,
    inverse: BTreeMap<String, String>,
}

impl Bijection {
    /// Fails if either side repeats a term.
    pub fn new<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut out = Self::default();
        for (a, b) in pairs {
            if out.forward.contains_key(&a) || out.inverse.contains_key(&b) {
                return Err(Error::InvalidInput(format!("`{a}` -> `{b}` breaks one-to-one mapping")));
            }
            out.forward.insert(a.clone(), b.clone());
            out.inverse.insert(b, a);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Teacher-language term to student-language term.
    pub fn forward(&self, term: &str) -> Option<&str> {
        self.forward.get(term).map(String::as_str)
    }

    pub fn backward(&self, term: &str) -> Option<&str> {
        self.inverse.get(term).map(String::as_str)
    }

    pub fn inverse(&self) -> Bijection {
        Bijection {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    /// (teacher term, student term) in teacher-term order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.forward.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Translates whitespace-separated words; unmapped words pass through.
    pub fn translate(&self, sentence: &str) -> String {
        sentence
            .split_whitespace()
            .map(|w| self.forward(w).unwrap_or(w))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_tsv(&self) -> String {
        self.pairs().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut pairs = Vec::new();
        for (lineno, line) in lines(&text) {
            let f = split_fields(path, lineno, line, 2)?;
            pairs.push((f[0].to_string(), f[1].to_string()));
        }
        Self::new(pairs).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PassageRecord {
    doc_id: String,
    passages: Vec<Vec<TokenId>>,
}

/// Token-id passages per document, in doc-id order.
pub type Passages = BTreeMap<String, Vec<Vec<TokenId>>>;

pub fn passages_to_jsonl(passages: &Passages) -> String {
    passages
        .iter()
        .map(|(doc_id, p)| {
            let rec = PassageRecord {
                doc_id: doc_id.clone(),
                passages: p.clone(),
            };
            serde_json::to_string(&rec).expect("passage record serializes") + "\n"
        })
        .collect()
}

pub fn load_passages(path: &Path) -> Result<Passages> {
    let text = read_text(path)?;
    let mut out = Passages::new();
    for (lineno, line) in lines(&text) {
        let rec: PassageRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {lineno}: {e}")))?;
        if out.insert(rec.doc_id.clone(), rec.passages).is_some() {
            return Err(Error::DuplicateDocId(rec.doc_id));
        }
    }
    Ok(out)
}
