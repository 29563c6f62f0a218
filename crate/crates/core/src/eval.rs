//! Ranking metrics, TREC file I/O and the paired t-test.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::late_interaction::{sort_ranked, Provenance, ScoredDoc};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Relevance judgments: query id → doc id → grade. Grade ≥ 1 is relevant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|d| d.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.grade(query_id, doc_id) >= 1
    }

    pub fn num_relevant(&self, query_id: &str) -> usize {
        self.judgments
            .get(query_id)
            .map_or(0, |d| d.values().filter(|&&g| g >= 1).count())
    }

    /// Queries with at least one relevant document, in id order.
    pub fn judged_queries(&self) -> Vec<&str> {
        self.judgments
            .keys()
            .filter(|q| self.num_relevant(q) > 0)
            .map(String::as_str)
            .collect()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.values().flat_map(|d| d.keys().map(String::as_str))
    }

    /// Parses `qid 0 docid grade` lines.
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut qrels = Qrels::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(format!("line {}: expected 4 fields, got {}", lineno + 1, f.len()));
            }
            let grade: i64 = f[3]
                .parse()
                .map_err(|_| format!("line {}: bad grade `{}`", lineno + 1, f[3]))?;
            if grade < 0 {
                return Err(format!("line {}: negative grade", lineno + 1));
            }
            qrels.insert(f[0], f[2], grade as u32);
        }
        Ok(qrels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|m| Error::format(path, m))
    }

    pub fn to_trec_string(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.judgments {
            for (d, g) in docs {
                writeln!(out, "{q} 0 {d} {g}").unwrap();
            }
        }
        out
    }
}

/// Ranked lists per query.
pub type Run = BTreeMap<String, Vec<ScoredDoc>>;

/// Formats a run as `qid Q0 docid rank score tag` lines, rank starting at 1.
pub fn run_to_trec_string(run: &Run, tag: &str) -> String {
    let mut out = String::new();
    for (q, docs) in run {
        for (rank, d) in docs.iter().enumerate() {
            writeln!(out, "{q} Q0 {} {} {:.10} {tag}", d.doc_id, rank + 1, d.score).unwrap();
        }
    }
    out
}

/// Parses a TREC run. Lists are re-sorted by score with the doc-id tie rule.
pub fn parse_run(text: &str, provenance: Provenance) -> std::result::Result<Run, String> {
    let mut run = Run::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(format!("line {}: expected 6 fields, got {}", lineno + 1, f.len()));
        }
        let score: f64 = f[4]
            .parse()
            .map_err(|_| format!("line {}: bad score `{}`", lineno + 1, f[4]))?;
        if !score.is_finite() {
            return Err(format!("line {}: non-finite score", lineno + 1));
        }
        run.entry(f[0].to_string()).or_default().push(ScoredDoc {
            doc_id: f[2].to_string(),
            score,
            provenance,
        });
    }
    for docs in run.values_mut() {
        sort_ranked(docs);
    }
    Ok(run)
}

pub fn load_run(path: &Path, provenance: Provenance) -> Result<Run> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text, provenance).map_err(|m| Error::format(path, m))
}

fn relevant_total(qrels: &Qrels, query_id: &str) -> Result<usize> {
    match qrels.num_relevant(query_id) {
        0 => Err(Error::NoRelevant(query_id.to_string())),
        r => Ok(r),
    }
}

/// Average precision over the top `cutoff`, normalized by all judged relevant documents.
pub fn average_precision(run: &[ScoredDoc], qrels: &Qrels, query_id: &str, cutoff: usize) -> Result<f64> {
    let r = relevant_total(qrels, query_id)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, d) in run.iter().take(cutoff).enumerate() {
        if qrels.is_relevant(query_id, &d.doc_id) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / r as f64)
}

/// Relevant documents in the top `k`, divided by `k` even when the run is shorter.
pub fn precision_at(run: &[ScoredDoc], qrels: &Qrels, query_id: &str, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = run
        .iter()
        .take(k)
        .filter(|d| qrels.is_relevant(query_id, &d.doc_id))
        .count();
    hits as f64 / k as f64
}

pub fn recall_at(run: &[ScoredDoc], qrels: &Qrels, query_id: &str, k: usize) -> Result<f64> {
    let r = relevant_total(qrels, query_id)?;
    let hits = run
        .iter()
        .take(k)
        .filter(|d| qrels.is_relevant(query_id, &d.doc_id))
        .count();
    Ok(hits as f64 / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Two-tailed paired t-test on per-query scores.
///
/// Zero-variance differences are resolved by rule: all-zero differences give
/// `p = 1`; a constant nonzero difference gives `t = ±∞`, `p = 0`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidInput("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, significant: false }
        } else {
            TTest {
                t: f64::INFINITY.copysign(mean),
                p: 0.0,
                significant: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let p = two_tailed_p(t, (n - 1) as f64);
    Ok(TTest {
        t,
        p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom, via
/// `I_{ν/(ν+t²)}(ν/2, 1/2)`.
pub fn two_tailed_p(t: f64, dof: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = dof / (dof + t * t);
    beta_reg(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub p10: f64,
    pub recall100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemSummary {
    pub system: String,
    #[serde(rename = "MAP")]
    pub map: f64,
    #[serde(rename = "P@10")]
    pub p10: f64,
    #[serde(rename = "Recall@100")]
    pub recall100: f64,
    pub p_vs_baseline: Option<f64>,
    #[serde(skip)]
    pub per_query: Vec<QueryMetrics>,
}

/// Metrics for every judged query. Queries missing from the run score zero.
pub fn evaluate_run(system: &str, run: &Run, qrels: &Qrels, map_cutoff: usize) -> Result<SystemSummary> {
    let queries = qrels.judged_queries();
    if queries.is_empty() {
        return Err(Error::Empty("qrels contain no relevant judgments".into()));
    }
    let empty = Vec::new();
    let per_query = queries
        .iter()
        .map(|&q| {
            let docs = run.get(q).unwrap_or(&empty);
            Ok(QueryMetrics {
                query_id: q.to_string(),
                ap: average_precision(docs, qrels, q, map_cutoff)?,
                p10: precision_at(docs, qrels, q, 10),
                recall100: recall_at(docs, qrels, q, 100)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_query.len() as f64;
    Ok(SystemSummary {
        system: system.to_string(),
        map: per_query.iter().map(|m| m.ap).sum::<f64>() / n,
        p10: per_query.iter().map(|m| m.p10).sum::<f64>() / n,
        recall100: per_query.iter().map(|m| m.recall100).sum::<f64>() / n,
        p_vs_baseline: None,
        per_query,
    })
}

/// Fills `p_vs_baseline` of `system` from a paired t-test on per-query AP.
pub fn compare_to_baseline(system: &mut SystemSummary, baseline: &SystemSummary) -> Result<TTest> {
    let a: Vec<f64> = system.per_query.iter().map(|m| m.ap).collect();
    let b: Vec<f64> = baseline.per_query.iter().map(|m| m.ap).collect();
    let test = paired_t_test(&a, &b)?;
    system.p_vs_baseline = Some(test.p);
    Ok(test)
}

pub fn report_table(rows: &[SystemSummary]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<28} {:>8} {:>8} {:>11} {:>12}", "system", "MAP", "P@10", "Recall@100", "p_vs_base").unwrap();
    for r in rows {
        let p = r.p_vs_baseline.map_or("-".to_string(), |p| format!("{p:.4}"));
        writeln!(out, "{:<28} {:>8.4} {:>8.4} {:>11.4} {:>12}", r.system, r.map, r.p10, r.recall100, p).unwrap();
    }
    out
}
