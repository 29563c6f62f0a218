//! End-to-end commands over files: synth, index, search, train-teacher,
//! distill, rerank, eval and the alignment report.
//!
//! Every command reads its inputs from the paths in [`ExperimentConfig`],
//! writes its outputs there, and logs JSON records through `log`. Outputs
//! depend only on inputs and the seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, load_bitext, load_corpus, load_passages, load_queries, load_triples, write_text, Bijection, Passages};
use crate::distill::{train_distill, BitextPair, DistillConfig};
use crate::encoder::{init_params, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{self, compare_to_baseline, evaluate_run, report_table, Qrels, Run, SystemSummary};
use crate::late_interaction::{
    rerank, train_teacher, EncodedCorpus, LateInteractionModel, PassageStore, Provenance, TeacherConfig, Triple,
};
use crate::lexical::{build_index, Bm25Params, InvertedIndex};
use crate::synth::{self, Bundle, SynthConfig};
use crate::text::{prepare_document, prepare_query, split_passages, tokenize, TokenId, Vocabulary};

pub const BM25_RUN: &str = "bm25";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding the synthetic bundle or an equivalent hand-made one.
    pub bundle: PathBuf,
    /// Directory for everything the pipeline derives.
    pub work: PathBuf,
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Teacher-language queries.
    pub queries: Option<PathBuf>,
    /// The same queries in the student language.
    pub student_queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub bitext: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub bijection: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub runs: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            bundle: PathBuf::from("bundle"),
            work: PathBuf::from("work"),
            vocab: None,
            corpus: None,
            queries: None,
            student_queries: None,
            qrels: None,
            bitext: None,
            triples: None,
            bijection: None,
            index: None,
            passages: None,
            teacher: None,
            student: None,
            runs: None,
        }
    }
}

fn pick(explicit: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(name))
}

impl PathsConfig {
    pub fn vocab(&self) -> PathBuf {
        pick(&self.vocab, &self.bundle, synth::VOCAB_FILE)
    }
    pub fn corpus(&self) -> PathBuf {
        pick(&self.corpus, &self.bundle, synth::CORPUS_FILE)
    }
    pub fn queries(&self) -> PathBuf {
        pick(&self.queries, &self.bundle, synth::QUERIES_TEACHER_FILE)
    }
    pub fn student_queries(&self) -> PathBuf {
        pick(&self.student_queries, &self.bundle, synth::QUERIES_STUDENT_FILE)
    }
    pub fn qrels(&self) -> PathBuf {
        pick(&self.qrels, &self.bundle, synth::QRELS_FILE)
    }
    pub fn bitext(&self) -> PathBuf {
        pick(&self.bitext, &self.bundle, synth::BITEXT_FILE)
    }
    pub fn triples(&self) -> PathBuf {
        pick(&self.triples, &self.bundle, synth::TRIPLES_FILE)
    }
    pub fn bijection(&self) -> PathBuf {
        pick(&self.bijection, &self.bundle, synth::BIJECTION_FILE)
    }
    pub fn index(&self) -> PathBuf {
        pick(&self.index, &self.work, "index")
    }
    pub fn passages(&self) -> PathBuf {
        pick(&self.passages, &self.work, "passages.jsonl")
    }
    /// Teacher query encoder; a separate document encoder lives next to it.
    pub fn teacher(&self) -> PathBuf {
        pick(&self.teacher, &self.work, "teacher.enc")
    }
    pub fn teacher_document(&self) -> PathBuf {
        self.teacher().with_extension("doc.enc")
    }
    pub fn student(&self) -> PathBuf {
        pick(&self.student, &self.work, "student.enc")
    }
    pub fn runs(&self) -> PathBuf {
        pick(&self.runs, &self.work, "runs")
    }
    pub fn run_file(&self, name: &str) -> PathBuf {
        self.runs().join(format!("{name}.run"))
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.bundle);
        fix(&mut self.work);
        for p in [
            &mut self.vocab,
            &mut self.corpus,
            &mut self.queries,
            &mut self.student_queries,
            &mut self.qrels,
            &mut self.bitext,
            &mut self.triples,
            &mut self.bijection,
            &mut self.index,
            &mut self.passages,
            &mut self.teacher,
            &mut self.student,
            &mut self.runs,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Output dimension d of token representations.
    pub dim: usize,
    pub l_max: usize,
    pub d_max: usize,
    pub window: usize,
    pub stride: usize,
    pub k_first: usize,
    pub k_rerank: usize,
    pub map_cutoff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            dim: 32,
            l_max: 32,
            d_max: 180,
            window: 180,
            stride: 90,
            k_first: 100,
            k_rerank: 100,
            map_cutoff: 100,
        }
    }
}

impl ModelConfig {
    /// Passage window after the `[D]` marker: at most `d_max − 1` content ids.
    pub fn passage_window(&self) -> usize {
        self.window.min(self.d_max - 1)
    }

    pub fn passage_stride(&self) -> usize {
        self.stride.min(self.passage_window())
    }
}

/// Top-level experiment settings. Stage seeds (`teacher.seed`,
/// `distill.seed`) are derived from `seed` when commands run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Use only the first N bitext pairs when distilling.
    pub bitext_limit: Option<usize>,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub bm25: Bm25Params,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = data::read_text(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("hidden", m.hidden),
            ("dim", m.dim),
            ("window", m.window),
            ("stride", m.stride),
            ("k_first", m.k_first),
            ("k_rerank", m.k_rerank),
            ("map_cutoff", m.map_cutoff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if m.l_max < 2 || m.d_max < 2 {
            return Err(Error::Config("model.l_max and model.d_max must be at least 2".into()));
        }
        if m.stride > m.window {
            return Err(Error::Config("model.stride must not exceed model.window".into()));
        }
        if self.bitext_limit == Some(0) {
            return Err(Error::Config("bitext_limit must be positive".into()));
        }
        if !(self.bm25.k1 >= 0.0) || !(0.0..=1.0).contains(&self.bm25.b) {
            return Err(Error::Config("bm25.k1 must be >= 0 and bm25.b in [0, 1]".into()));
        }
        self.distill.validate()
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            seed: derive_seed(self.seed, 1),
            ..self.teacher
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            seed: derive_seed(self.seed, 2),
            ..self.distill
        }
    }

    fn dims(&self, vocab: &Vocabulary) -> EncoderDims {
        EncoderDims {
            vocab: vocab.len(),
            hidden: self.model.hidden,
            out: self.model.dim,
        }
    }
}

fn derive_seed(seed: u64, stage: u64) -> u64 {
    // splitmix64 step keeps stage seeds far apart
    let mut z = seed.wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn require(paths: &[PathBuf]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::MissingFile(p.clone())),
        None => Ok(()),
    }
}

fn log_event<T: Serialize>(target: &str, value: &T) {
    log::info!(target: target, "{}", serde_json::to_string(value).unwrap_or_default());
}

#[derive(Serialize)]
struct Done<'a> {
    command: &'a str,
    seconds: f64,
}

fn finished(command: &str, started: Instant) {
    log_event(
        command,
        &Done {
            command,
            seconds: started.elapsed().as_secs_f64(),
        },
    );
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Bundle> {
    let started = Instant::now();
    let bundle = synth::generate(cfg.seed, &cfg.synth)?;
    bundle.write(&cfg.paths.bundle)?;
    finished("synth", started);
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSummary {
    pub docs: usize,
    pub terms: usize,
    pub passages: usize,
    pub avg_len: f64,
}

pub fn cmd_index(cfg: &ExperimentConfig) -> Result<IndexSummary> {
    cfg.validate()?;
    require(&[cfg.paths.vocab(), cfg.paths.corpus()])?;
    let started = Instant::now();
    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let corpus = load_corpus(&cfg.paths.corpus())?;
    let index = build_index(&corpus, &vocab, cfg.bm25.clone())?;
    index.save(&cfg.paths.index())?;

    let (window, stride) = (cfg.model.passage_window(), cfg.model.passage_stride());
    let passages: Passages = corpus
        .iter()
        .map(|d| (d.doc_id.clone(), split_passages(&tokenize(&d.text, &vocab), window, stride)))
        .collect();
    write_text(&cfg.paths.passages(), &data::passages_to_jsonl(&passages))?;

    let summary = IndexSummary {
        docs: index.n_docs(),
        terms: index.num_terms(),
        passages: passages.values().map(Vec::len).sum(),
        avg_len: index.avg_len(),
    };
    log_event("index", &summary);
    finished("index", started);
    Ok(summary)
}

/// BM25 top-`k_first` for every query; defaults to the teacher-language queries.
pub fn cmd_search(cfg: &ExperimentConfig, queries: Option<&Path>, output: Option<&Path>) -> Result<Run> {
    cfg.validate()?;
    let queries_path = queries.map_or_else(|| cfg.paths.queries(), Path::to_path_buf);
    require(&[cfg.paths.vocab(), cfg.paths.index(), queries_path.clone()])?;
    let started = Instant::now();
    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let index = InvertedIndex::load(&cfg.paths.index())?;
    let queries = load_queries(&queries_path)?;
    let run: Run = queries
        .par_iter()
        .map(|q| (q.id.clone(), index.search(&tokenize(&q.text, &vocab), cfg.model.k_first)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect();
    let out = output.map_or_else(|| cfg.paths.run_file(BM25_RUN), Path::to_path_buf);
    write_text(&out, &eval::run_to_trec_string(&run, BM25_RUN))?;
    finished("search", started);
    Ok(run)
}

fn load_doc_texts(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<BTreeMap<String, Vec<TokenId>>> {
    Ok(load_corpus(&cfg.paths.corpus())?
        .into_iter()
        .map(|d| {
            let ids = tokenize(&d.text, vocab);
            (d.doc_id, ids)
        })
        .collect())
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<LateInteractionModel> {
    let query = EncoderParams::load(&cfg.paths.teacher())?;
    let doc_path = cfg.paths.teacher_document();
    let document = if doc_path.exists() {
        Some(EncoderParams::load(&doc_path)?)
    } else {
        None
    };
    Ok(LateInteractionModel { query, document })
}

pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<Vec<crate::distill::EpochRecord>> {
    cfg.validate()?;
    require(&[cfg.paths.vocab(), cfg.paths.corpus(), cfg.paths.triples()])?;
    let started = Instant::now();
    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let specials = vocab.specials();
    let docs = load_doc_texts(cfg, &vocab)?;
    let lines = load_triples(&cfg.paths.triples())?;
    let doc = |id: &str| {
        docs.get(id)
            .map(|ids| prepare_document(ids, cfg.model.d_max, specials))
            .ok_or_else(|| Error::InvalidInput(format!("triple refers to unknown document `{id}`")))
    };
    let triples = lines
        .iter()
        .map(|t| {
            let q = prepare_query(&tokenize(&t.query, &vocab), cfg.model.l_max, specials);
            Triple::new(q, doc(&t.pos)?, doc(&t.neg)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let tcfg = cfg.teacher_config();
    let dims = cfg.dims(&vocab);
    let query = init_params(dims, derive_seed(cfg.seed, 3))?;
    let document = if tcfg.separate_encoders {
        Some(init_params(dims, derive_seed(cfg.seed, 4))?)
    } else {
        None
    };
    let (model, records) = train_teacher(&triples, LateInteractionModel { query, document }, &tcfg)?;
    model.query.save(&cfg.paths.teacher())?;
    let doc_path = cfg.paths.teacher_document();
    match &model.document {
        Some(d) => d.save(&doc_path)?,
        None if doc_path.exists() => fs::remove_file(&doc_path).map_err(|e| Error::io(&doc_path, e))?,
        None => {}
    }
    finished("train-teacher", started);
    Ok(records)
}

/// Student initialised from the teacher query encoder, trained on the bitext.
pub fn cmd_distill(cfg: &ExperimentConfig) -> Result<Vec<crate::distill::EpochRecord>> {
    cfg.validate()?;
    require(&[cfg.paths.vocab(), cfg.paths.bitext(), cfg.paths.teacher()])?;
    let started = Instant::now();
    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let specials = vocab.specials();
    let teacher = load_teacher(cfg)?;
    let mut lines = load_bitext(&cfg.paths.bitext())?;
    if let Some(limit) = cfg.bitext_limit {
        if limit > lines.len() {
            return Err(Error::Config(format!(
                "bitext_limit {limit} exceeds the {} available pairs",
                lines.len()
            )));
        }
        lines.truncate(limit);
    }
    let l_max = cfg.model.l_max;
    let pairs = lines
        .iter()
        .map(|p| {
            BitextPair::new(
                prepare_query(&tokenize(&p.source, &vocab), l_max, specials),
                prepare_query(&tokenize(&p.target, &vocab), l_max, specials),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_distill(&pairs, teacher.query.clone(), &teacher.query, &cfg.distill_config())?;
    outcome.params.save(&cfg.paths.student())?;
    finished("distill", started);
    Ok(outcome.epochs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RerankMode {
    /// Teacher query encoder on teacher-language queries.
    Monolingual,
    /// Teacher query encoder on student-language queries, no adaptation.
    ZeroShot,
    /// Distilled student query encoder on student-language queries.
    Optical,
}

impl RerankMode {
    pub const ALL: [RerankMode; 3] = [RerankMode::Monolingual, RerankMode::ZeroShot, RerankMode::Optical];

    pub fn name(self) -> &'static str {
        match self {
            RerankMode::Monolingual => "teacher-mono",
            RerankMode::ZeroShot => "zero-shot",
            RerankMode::Optical => "optical",
        }
    }
}

fn load_passage_store(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<PassageStore> {
    let specials = vocab.specials();
    Ok(load_passages(&cfg.paths.passages())?
        .into_iter()
        .map(|(id, ps)| {
            let seqs = ps.iter().map(|p| prepare_document(p, cfg.model.d_max, specials)).collect();
            (id, seqs)
        })
        .collect())
}

/// Reranks the teacher-language BM25 candidates of each query.
///
/// All three modes rerank the same first-stage list, so differences between
/// their runs come from the query encoder and the query language alone.
pub fn cmd_rerank(cfg: &ExperimentConfig, mode: RerankMode, output: Option<&Path>) -> Result<Run> {
    cfg.validate()?;
    let first_stage = cfg.paths.run_file(BM25_RUN);
    let queries_path = match mode {
        RerankMode::Monolingual => cfg.paths.queries(),
        RerankMode::ZeroShot | RerankMode::Optical => cfg.paths.student_queries(),
    };
    let mut needed = vec![cfg.paths.vocab(), cfg.paths.passages(), cfg.paths.teacher(), first_stage.clone(), queries_path.clone()];
    if mode == RerankMode::Optical {
        needed.push(cfg.paths.student());
    }
    require(&needed)?;
    let started = Instant::now();

    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let teacher = load_teacher(cfg)?;
    let student = match mode {
        RerankMode::Optical => Some(EncoderParams::load(&cfg.paths.student())?),
        _ => None,
    };
    let query_encoder = student.as_ref().unwrap_or(&teacher.query);
    let corpus = EncodedCorpus::encode(&load_passage_store(cfg, &vocab)?, teacher.document_encoder())?;
    let candidates = eval::load_run(&first_stage, Provenance::FirstStage)?;
    let queries = load_queries(&queries_path)?;
    let specials = vocab.specials();

    let ranked = queries
        .par_iter()
        .filter_map(|q| candidates.get(&q.id).filter(|c| !c.is_empty()).map(|c| (q, c)))
        .map(|(q, cands)| {
            let seq = prepare_query(&tokenize(&q.text, &vocab), cfg.model.l_max, specials);
            let out = rerank(&query_encoder.encode(&seq.ids)?, cands, &corpus, cfg.model.k_rerank)?;
            Ok((q.id.clone(), out.ranked))
        })
        .collect::<Result<Vec<_>>>()?;
    let run: Run = ranked.into_iter().collect();
    for q in queries.iter().filter(|q| !run.contains_key(&q.id)) {
        log::warn!(target: "rerank", "query `{}` has no first-stage candidates", q.id);
    }
    let out = output.map_or_else(|| cfg.paths.run_file(mode.name()), Path::to_path_buf);
    write_text(&out, &eval::run_to_trec_string(&run, mode.name()))?;
    finished("rerank", started);
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub baseline: String,
    pub systems: Vec<SystemSummary>,
}

impl EvalReport {
    pub fn system(&self, name: &str) -> Option<&SystemSummary> {
        self.systems.iter().find(|s| s.system == name)
    }

    pub fn map(&self, name: &str) -> Option<f64> {
        self.system(name).map(|s| s.map)
    }
}

/// The standard run files that exist, baseline first.
pub fn default_eval_systems(cfg: &ExperimentConfig) -> Vec<(String, PathBuf)> {
    std::iter::once(BM25_RUN)
        .chain(RerankMode::ALL.iter().map(|m| m.name()))
        .map(|name| (name.to_string(), cfg.paths.run_file(name)))
        .filter(|(_, p)| p.exists())
        .collect()
}

/// Metrics for each run plus a paired t-test of per-query AP against `baseline`.
/// Writes `report.txt` and `report.json` next to the runs.
pub fn cmd_eval(cfg: &ExperimentConfig, systems: &[(String, PathBuf)], baseline: &str) -> Result<EvalReport> {
    cfg.validate()?;
    if systems.is_empty() {
        return Err(Error::Empty("no run files to evaluate".into()));
    }
    let mut needed: Vec<PathBuf> = systems.iter().map(|(_, p)| p.clone()).collect();
    needed.push(cfg.paths.qrels());
    require(&needed)?;
    let started = Instant::now();
    let names: BTreeSet<&str> = systems.iter().map(|(n, _)| n.as_str()).collect();
    if names.len() != systems.len() {
        return Err(Error::Config("duplicate system names".into()));
    }
    if !names.contains(baseline) {
        return Err(Error::Config(format!("baseline `{baseline}` is not among the evaluated runs")));
    }

    let qrels = Qrels::load(&cfg.paths.qrels())?;
    let mut summaries = systems
        .iter()
        .map(|(name, path)| {
            let run = eval::load_run(path, Provenance::Reranked)?;
            evaluate_run(name, &run, &qrels, cfg.model.map_cutoff)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = summaries.iter().find(|s| s.system == baseline).cloned().expect("baseline present");
    for s in summaries.iter_mut().filter(|s| s.system != baseline) {
        compare_to_baseline(s, &base)?;
    }

    let report = EvalReport {
        baseline: baseline.to_string(),
        systems: summaries,
    };
    let mut text = report_table(&report.systems);
    writeln!(text, "baseline: {baseline}; paired two-tailed t-test on per-query AP").unwrap();
    write_text(&cfg.paths.runs().join("report.txt"), &text)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&cfg.paths.runs().join("report.json"), &json)?;
    finished("eval", started);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenAlignment {
    pub student_term: String,
    pub nearest: String,
    pub expected: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignStage {
    pub stage: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub tokens: Vec<TokenAlignment>,
}

/// Nearest teacher-encoded candidate (cosine) for each student-encoded token.
///
/// `pairs` holds (student token, expected teacher token). Ties go to the
/// candidate listed first.
pub fn align_tokens(
    stage: &str,
    student: &EncoderParams,
    teacher: &EncoderParams,
    pairs: &[(TokenId, TokenId)],
    candidates: &[TokenId],
    vocab: &Vocabulary,
) -> Result<AlignStage> {
    if pairs.is_empty() || candidates.is_empty() {
        return Err(Error::Empty("alignment pairs or candidates".into()));
    }
    let cand = teacher.encode(candidates)?;
    let sources: Vec<TokenId> = pairs.iter().map(|p| p.0).collect();
    let src = student.encode(&sources)?;
    let sims = src.rows().dot(&cand.rows().t());
    let term = |id: TokenId| vocab.term(id).unwrap_or("?").to_string();
    let tokens: Vec<TokenAlignment> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, expected))| {
            let row = sims.row(i);
            let best = (0..candidates.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            TokenAlignment {
                student_term: term(s),
                nearest: term(candidates[best]),
                expected: term(expected),
                correct: candidates[best] == expected,
            }
        })
        .collect();
    let correct = tokens.iter().filter(|t| t.correct).count();
    Ok(AlignStage {
        stage: stage.to_string(),
        accuracy: correct as f64 / tokens.len() as f64,
        correct,
        total: tokens.len(),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignReport {
    pub before: AlignStage,
    pub after: AlignStage,
}

impl AlignReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<8} {:>9} {:>8} {:>6}", "stage", "accuracy", "correct", "total").unwrap();
        for s in [&self.before, &self.after] {
            writeln!(out, "{:<8} {:>9.4} {:>8} {:>6}", s.stage, s.accuracy, s.correct, s.total).unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "{:<14} {:<14} {:<14} {}", "student", "nearest", "expected", "ok").unwrap();
        for t in &self.after.tokens {
            writeln!(out, "{:<14} {:<14} {:<14} {}", t.student_term, t.nearest, t.expected, u8::from(t.correct)).unwrap();
        }
        out
    }
}

/// Alignment accuracy of the student before (teacher copy) and after distillation.
pub fn cmd_align_report(cfg: &ExperimentConfig) -> Result<AlignReport> {
    require(&[cfg.paths.vocab(), cfg.paths.bijection(), cfg.paths.teacher(), cfg.paths.student()])?;
    let started = Instant::now();
    let vocab = Vocabulary::load(&cfg.paths.vocab())?;
    let bijection = Bijection::load(&cfg.paths.bijection())?;
    let teacher = load_teacher(cfg)?;
    let student = EncoderParams::load(&cfg.paths.student())?;
    let id = |t: &str| {
        vocab
            .id(t)
            .ok_or_else(|| Error::InvalidInput(format!("bijection term `{t}` is not in the vocabulary")))
    };
    let mut pairs = Vec::with_capacity(bijection.len());
    let mut candidates = Vec::with_capacity(bijection.len());
    for (en, xx) in bijection.pairs() {
        let en = id(en)?;
        pairs.push((id(xx)?, en));
        candidates.push(en);
    }
    let before = align_tokens("before", &teacher.query, &teacher.query, &pairs, &candidates, &vocab)?;
    let after = align_tokens("after", &student, &teacher.query, &pairs, &candidates, &vocab)?;
    let report = AlignReport { before, after };
    write_text(&cfg.paths.work.join("align.txt"), &report.to_text())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&cfg.paths.work.join("align.json"), &json)?;
    log::info!(
        target: "align-report",
        "{{\"before\":{},\"after\":{}}}",
        report.before.accuracy,
        report.after.accuracy
    );
    finished("align-report", started);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub eval: EvalReport,
    pub align: AlignReport,
}

/// synth → index → search → train-teacher → distill → rerank (all modes) → eval → align-report.
pub fn run_all(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cmd_synth(cfg)?;
    cmd_index(cfg)?;
    cmd_search(cfg, None, None)?;
    cmd_train_teacher(cfg)?;
    cmd_distill(cfg)?;
    for mode in RerankMode::ALL {
        cmd_rerank(cfg, mode, None)?;
    }
    let eval = cmd_eval(cfg, &default_eval_systems(cfg), BM25_RUN)?;
    let align = cmd_align_report(cfg)?;
    Ok(ExperimentOutcome { eval, align })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub bitext: usize,
    pub map: f64,
}

/// Distils and reranks once per bitext size (first-N prefixes of the bitext),
/// reusing the teacher, index and first-stage run already in the work dir.
pub fn bitext_sweep(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<SweepPoint>> {
    let qrels = Qrels::load(&cfg.paths.qrels())?;
    sizes
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.bitext_limit = Some(n);
            c.paths.student = Some(cfg.paths.work.join(format!("student-{n}.enc")));
            let run_path = cfg.paths.runs().join(format!("optical-{n}.run"));
            cmd_distill(&c)?;
            let run = cmd_rerank(&c, RerankMode::Optical, Some(&run_path))?;
            let map = evaluate_run("optical", &run, &qrels, cfg.model.map_cutoff)?.map;
            Ok(SweepPoint { bitext: n, map })
        })
        .collect()
}
