//! First-stage lexical retrieval: an inverted index scored with Okapi BM25.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::late_interaction::{sort_ranked, Provenance, ScoredDoc};
use crate::text::{tokenize, TokenId, Vocabulary};

pub const INDEX_VERSION: u32 = 1;
const INDEX_FORMAT: &str = "optical-bm25";
const META_FILE: &str = "meta.json";
const DOCS_FILE: &str = "docs.tsv";
const POSTINGS_FILE: &str = "postings.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Terms dropped at index and query time. Empty by default.
    pub stopwords: Vec<String>,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            stopwords: Vec::new(),
        }
    }
}

/// One corpus record as read from JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    /// term → (document number, tf), sorted by document number.
    postings: BTreeMap<TokenId, Vec<(u32, u32)>>,
    /// Document ids in ascending order; document number = position.
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    params: Bm25Params,
    stop_ids: BTreeSet<TokenId>,
}

fn stop_ids(params: &Bm25Params, vocab: &Vocabulary) -> BTreeSet<TokenId> {
    params.stopwords.iter().flat_map(|w| tokenize(w, vocab)).collect()
}

/// Tokenizes and indexes a corpus. Documents are numbered by ascending id.
pub fn build_index(corpus: &[CorpusDoc], vocab: &Vocabulary, params: Bm25Params) -> Result<InvertedIndex> {
    let stop = stop_ids(&params, vocab);
    let mut seen = HashSet::with_capacity(corpus.len());
    for doc in corpus {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(Error::DuplicateDocId(doc.doc_id.clone()));
        }
    }
    let mut order: Vec<&CorpusDoc> = corpus.iter().collect();
    order.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));

    let mut postings: BTreeMap<TokenId, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_ids = Vec::with_capacity(order.len());
    let mut doc_len = Vec::with_capacity(order.len());
    for (num, doc) in order.iter().enumerate() {
        let ids: Vec<TokenId> = tokenize(&doc.text, vocab)
            .into_iter()
            .filter(|t| !stop.contains(t))
            .collect();
        let mut tf: BTreeMap<TokenId, u32> = BTreeMap::new();
        for &t in &ids {
            *tf.entry(t).or_default() += 1;
        }
        for (t, n) in tf {
            postings.entry(t).or_default().push((num as u32, n));
        }
        doc_ids.push(doc.doc_id.clone());
        doc_len.push(ids.len() as u32);
    }
    Ok(InvertedIndex::from_parts(postings, doc_ids, doc_len, params, stop))
}

impl InvertedIndex {
    fn from_parts(
        postings: BTreeMap<TokenId, Vec<(u32, u32)>>,
        doc_ids: Vec<String>,
        doc_len: Vec<u32>,
        params: Bm25Params,
        stop_ids: BTreeSet<TokenId>,
    ) -> Self {
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        Self {
            postings,
            doc_ids,
            doc_len,
            avg_len,
            params,
            stop_ids,
        }
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        let num = self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()?;
        Some(self.doc_len[num])
    }

    pub fn term_frequency(&self, term: TokenId, doc_id: &str) -> u32 {
        let Ok(num) = self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)) else {
            return 0;
        };
        self.postings
            .get(&term)
            .and_then(|p| p.binary_search_by_key(&(num as u32), |&(d, _)| d).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    pub fn document_frequency(&self, term: TokenId) -> usize {
        self.postings.get(&term).map_or(0, Vec::len)
    }

    pub fn num_terms(&self) -> usize {
        self.postings.len()
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: TokenId) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Top-`k` documents by BM25. Each query token instance contributes, so
    /// repeated terms count repeatedly. Documents matching no term are omitted.
    pub fn search(&self, query: &[TokenId], k: usize) -> Vec<ScoredDoc> {
        let Bm25Params { k1, b, .. } = self.params;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for &term in query {
            if self.stop_ids.contains(&term) {
                continue;
            }
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let len = self.doc_len[doc as usize] as f64;
                let norm = k1 * (1.0 - b + b * len / self.avg_len);
                *scores.entry(doc).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<ScoredDoc> = scores
            .into_iter()
            .map(|(doc, score)| ScoredDoc {
                doc_id: self.doc_ids[doc as usize].clone(),
                score,
                provenance: Provenance::FirstStage,
            })
            .collect();
        sort_ranked(&mut ranked);
        ranked.truncate(k);
        ranked
    }

    /// Writes `meta.json`, `docs.tsv` and `postings.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = IndexMeta {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            n_docs: self.n_docs(),
            params: self.params.clone(),
            stop_ids: self.stop_ids.iter().copied().collect(),
        };
        let meta_path = dir.join(META_FILE);
        let meta_json = serde_json::to_string_pretty(&meta).expect("index meta serializes");
        std::fs::write(&meta_path, meta_json + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let mut docs = String::new();
        for (id, len) in self.doc_ids.iter().zip(&self.doc_len) {
            writeln!(docs, "{id}\t{len}").unwrap();
        }
        let docs_path = dir.join(DOCS_FILE);
        std::fs::write(&docs_path, docs).map_err(|e| Error::io(&docs_path, e))?;

        let mut postings = String::new();
        for (term, list) in &self.postings {
            write!(postings, "{term}").unwrap();
            for (doc, tf) in list {
                write!(postings, "\t{doc}:{tf}").unwrap();
            }
            postings.push('\n');
        }
        let postings_path = dir.join(POSTINGS_FILE);
        std::fs::write(&postings_path, postings).map_err(|e| Error::io(&postings_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: IndexMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.format != INDEX_FORMAT {
            return Err(Error::format(&meta_path, format!("unknown index format `{}`", meta.format)));
        }
        if meta.version != INDEX_VERSION {
            return Err(Error::Version {
                path: meta_path,
                found: meta.version,
                expected: INDEX_VERSION,
            });
        }

        let docs_path = dir.join(DOCS_FILE);
        let docs_text = std::fs::read_to_string(&docs_path).map_err(|e| Error::io(&docs_path, e))?;
        let mut doc_ids = Vec::with_capacity(meta.n_docs);
        let mut doc_len = Vec::with_capacity(meta.n_docs);
        for (lineno, line) in docs_text.lines().enumerate() {
            let bad = || Error::format(&docs_path, format!("line {}: expected `doc_id<TAB>length`", lineno + 1));
            let (id, len) = line.split_once('\t').ok_or_else(bad)?;
            doc_ids.push(id.to_string());
            doc_len.push(len.parse().map_err(|_| bad())?);
        }
        if doc_ids.len() != meta.n_docs {
            return Err(Error::format(&docs_path, "document count disagrees with meta.json"));
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format(&docs_path, "document ids not strictly ascending"));
        }

        let postings_path = dir.join(POSTINGS_FILE);
        let postings_text =
            std::fs::read_to_string(&postings_path).map_err(|e| Error::io(&postings_path, e))?;
        let mut postings = BTreeMap::new();
        for (lineno, line) in postings_text.lines().enumerate() {
            let bad = |what: &str| Error::format(&postings_path, format!("line {}: {what}", lineno + 1));
            let mut fields = line.split('\t');
            let term: TokenId = fields
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad term id"))?;
            let mut list = Vec::new();
            for field in fields {
                let (d, tf) = field.split_once(':').ok_or_else(|| bad("bad posting"))?;
                let d: u32 = d.parse().map_err(|_| bad("bad doc number"))?;
                let tf: u32 = tf.parse().map_err(|_| bad("bad tf"))?;
                if d as usize >= doc_ids.len() {
                    return Err(bad("doc number out of range"));
                }
                list.push((d, tf));
            }
            postings.insert(term, list);
        }
        Ok(Self::from_parts(
            postings,
            doc_ids,
            doc_len,
            meta.params,
            meta.stop_ids.into_iter().collect(),
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    format: String,
    version: u32,
    n_docs: usize,
    params: Bm25Params,
    stop_ids: Vec<TokenId>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn vocab() -> Vocabulary {
        Vocabulary::with_specials(["a", "b", "c", "d", "e", "f", "the"]).unwrap()
    }

    fn doc(id: &str, text: &str) -> CorpusDoc {
        CorpusDoc {
            doc_id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn build_examples() {
        let v = vocab();
        let empty = build_index(&[], &v, Bm25Params::default()).unwrap();
        assert_eq!(empty.n_docs(), 0);
        assert_eq!(empty.num_terms(), 0);
        assert!(empty.search(&[v.id("a").unwrap()], 10).is_empty());

        let one = build_index(&[doc("d1", "a a b")], &v, Bm25Params::default()).unwrap();
        assert_eq!(one.term_frequency(v.id("a").unwrap(), "d1"), 2);
        assert_eq!(one.term_frequency(v.id("b").unwrap(), "d1"), 1);
        assert_eq!(one.doc_len("d1"), Some(3));

        let two = build_index(&[doc("x", "a b"), doc("y", "c d e f")], &v, Bm25Params::default()).unwrap();
        assert_eq!(two.avg_len(), 3.0);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = build_index(&[doc("d1", "a"), doc("d1", "b")], &vocab(), Bm25Params::default()).unwrap_err();
        assert!(matches!(err, Error::DuplicateDocId(id) if id == "d1"));
    }

    #[test]
    fn single_document_hand_value() {
        // N = 1, df = 1: idf = ln(0.5/1.5 + 1) = ln(4/3); tf part = 2.2/2.2 = 1
        let v = vocab();
        let idx = build_index(&[doc("d1", "a")], &v, Bm25Params::default()).unwrap();
        let hits = idx.search(&[v.id("a").unwrap()], 10);
        assert_eq!(hits.len(), 1);
        assert_abs_diff_eq!(hits[0].score, (4.0f64 / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn absent_terms_and_repeated_terms() {
        let v = vocab();
        let idx = build_index(&[doc("d1", "a b"), doc("d2", "b c")], &v, Bm25Params::default()).unwrap();
        assert!(idx.search(&[v.id("f").unwrap()], 10).is_empty());
        let a = v.id("a").unwrap();
        let once = idx.search(&[a], 10)[0].score;
        let twice = idx.search(&[a, a], 10)[0].score;
        assert_abs_diff_eq!(twice, 2.0 * once, epsilon = 1e-15);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let v = vocab();
        let idx = build_index(&[doc("z", "a"), doc("m", "a"), doc("b", "a")], &v, Bm25Params::default()).unwrap();
        let ids: Vec<_> = idx.search(&[v.id("a").unwrap()], 2).into_iter().map(|d| d.doc_id).collect();
        assert_eq!(ids, ["b", "m"]);
    }

    #[test]
    fn stopwords_are_dropped_when_configured() {
        let v = vocab();
        let params = Bm25Params { stopwords: vec!["the".into()], ..Bm25Params::default() };
        let idx = build_index(&[doc("d1", "the a"), doc("d2", "the b")], &v, params).unwrap();
        assert_eq!(idx.doc_len("d1"), Some(1));
        assert!(idx.search(&[v.id("the").unwrap()], 10).is_empty());
    }

    #[test]
    fn tf_monotone_and_nonnegative() {
        let v = vocab();
        // every document has length 6; only the count of `a` varies
        let corpus: Vec<_> = (1..6)
            .map(|n| {
                let mut words = vec!["a"; n];
                words.resize(6, "b");
                doc(&format!("d{n}"), &words.join(" "))
            })
            .collect();
        let idx = build_index(&corpus, &v, Bm25Params::default()).unwrap();
        let a = v.id("a").unwrap();
        let mut by_tf: Vec<_> = idx.search(&[a], 10);
        by_tf.sort_by_key(|d| idx.term_frequency(a, &d.doc_id));
        for w in by_tf.windows(2) {
            assert!(w[1].score > w[0].score);
        }
        assert!(by_tf.iter().all(|d| d.score >= 0.0));
    }

    /// From-scratch BM25 straight from token lists, used as an oracle.
    fn oracle_score(docs: &[Vec<TokenId>], query: &[TokenId], target: usize) -> f64 {
        let n = docs.len() as f64;
        let avg = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let len = docs[target].len() as f64;
        query
            .iter()
            .map(|t| {
                let df = docs.iter().filter(|d| d.contains(t)).count() as f64;
                let tf = docs[target].iter().filter(|x| *x == t).count() as f64;
                let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                idf * tf * 2.2 / (tf + 1.2 * (1.0 - 0.75 + 0.75 * len / avg))
            })
            .sum()
    }

    #[test]
    fn matches_from_scratch_oracle_when_corpus_grows() {
        let v = vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let words = ["a", "b", "c", "d", "e", "f"];
        let mut corpus: Vec<CorpusDoc> = Vec::new();
        for n in 0..12 {
            let len = rng.gen_range(1..10);
            let text: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..6)]).collect();
            corpus.push(doc(&format!("d{n:02}"), &text.join(" ")));
            let idx = build_index(&corpus, &v, Bm25Params::default()).unwrap();
            let tokens: Vec<Vec<TokenId>> = corpus.iter().map(|d| tokenize(&d.text, &v)).collect();
            let query: Vec<TokenId> = (0..3).map(|_| v.id(words[rng.gen_range(0..6)]).unwrap()).collect();
            for hit in idx.search(&query, 100) {
                let target = corpus.iter().position(|d| d.doc_id == hit.doc_id).unwrap();
                assert_abs_diff_eq!(hit.score, oracle_score(&tokens, &query, target), epsilon = 1e-12);
                assert_eq!(idx.doc_len(&hit.doc_id), Some(tokens[target].len() as u32));
            }
        }
    }

    #[test]
    fn persistence_round_trip_and_errors() {
        let v = vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let words = ["a", "b", "c", "d", "e", "f", "the"];
        let corpus: Vec<_> = (0..30)
            .map(|n| {
                let text: Vec<&str> = (0..rng.gen_range(1..15)).map(|_| words[rng.gen_range(0..7)]).collect();
                doc(&format!("doc{n}"), &text.join(" "))
            })
            .collect();
        let idx = build_index(&corpus, &v, Bm25Params::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let loaded = InvertedIndex::load(dir.path()).unwrap();
        assert_eq!(loaded, idx);
        for _ in 0..100 {
            let q: Vec<TokenId> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(4..11)).collect();
            let a = idx.search(&q, 100);
            let b = loaded.search(&q, 100);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.doc_id, y.doc_id);
                assert!((x.score - y.score).abs() <= 1e-12);
            }
        }

        assert!(matches!(
            InvertedIndex::load(&dir.path().join("nowhere")),
            Err(Error::MissingFile(_))
        ));

        let meta_path = dir.path().join(META_FILE);
        let meta = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, meta.replace("\"version\": 1", "\"version\": 2")).unwrap();
        assert!(matches!(InvertedIndex::load(dir.path()), Err(Error::Version { found: 2, .. })));

        std::fs::write(&meta_path, "{ not json").unwrap();
        assert!(matches!(InvertedIndex::load(dir.path()), Err(Error::Format { .. })));
    }
}
