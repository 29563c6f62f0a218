//! Late-interaction scoring and the teacher retrieval model.
//!
//! A query and a document are encoded independently; their score is the sum
//! over query tokens of the best dot product against any document token.
//! Long documents are scored passage by passage and keep their best passage.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::EpochRecord;
use crate::encoder::{EncoderParams, ParamGrad, TokenMatrix};
use crate::error::{Error, Result};
use crate::text::{SeqKind, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    FirstStage,
    Reranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
    pub provenance: Provenance,
}

/// Descending score, ties broken by ascending doc id.
pub fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

pub fn sort_ranked(docs: &mut [ScoredDoc]) {
    docs.sort_by(rank_order);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub query: TokenSequence,
    pub pos: TokenSequence,
    pub neg: TokenSequence,
}

impl Triple {
    pub fn new(query: TokenSequence, pos: TokenSequence, neg: TokenSequence) -> Result<Self> {
        if query.kind != SeqKind::Query || pos.kind != SeqKind::Document || neg.kind != SeqKind::Document {
            return Err(Error::InvalidInput("triple needs a query and two documents".into()));
        }
        Ok(Self { query, pos, neg })
    }
}

/// `Σ_i max_j q_i · d_j`.
pub fn maxsim(q: &TokenMatrix, d: &TokenMatrix) -> Result<f64> {
    Ok(maxsim_with_argmax(q, d)?.0)
}

/// Maxsim score plus, for each query row, the document row achieving the max.
pub fn maxsim_with_argmax(q: &TokenMatrix, d: &TokenMatrix) -> Result<(f64, Vec<usize>)> {
    if d.is_empty() {
        return Err(Error::Empty("document token matrix".into()));
    }
    if q.dim() != d.dim() {
        return Err(Error::Dimension(format!(
            "query dim {} vs document dim {}",
            q.dim(),
            d.dim()
        )));
    }
    let sims = q.rows().dot(&d.rows().t());
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(q.len());
    for row in sims.rows() {
        let (best_j, best) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc });
        total += best;
        argmax.push(best_j);
    }
    Ok((total, argmax))
}

/// maxP: the best passage score.
pub fn score_document(q: &TokenMatrix, passages: &[TokenMatrix]) -> Result<f64> {
    if passages.is_empty() {
        return Err(Error::Empty("passage list".into()));
    }
    passages
        .iter()
        .map(|p| maxsim(q, p))
        .try_fold(f64::NEG_INFINITY, |best, s| Ok(best.max(s?)))
}

/// Query and document encoders used together for scoring.
///
/// Monolingual scoring pairs the teacher with itself; cross-lingual scoring
/// pairs the distilled student query encoder with the teacher document
/// encoder. Both go through [`EncoderPair::score`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderPair<'a> {
    pub query: &'a EncoderParams,
    pub document: &'a EncoderParams,
}

impl EncoderPair<'_> {
    pub fn score(&self, query: &TokenSequence, passages: &[TokenSequence]) -> Result<f64> {
        let q = self.query.encode(&query.ids)?;
        let encoded = passages
            .iter()
            .map(|p| self.document.encode(&p.ids))
            .collect::<Result<Vec<_>>>()?;
        score_document(&q, &encoded)
    }
}

/// Prepared passages of every document, keyed by doc id.
pub type PassageStore = BTreeMap<String, Vec<TokenSequence>>;

/// Passages already pushed through a document encoder.
#[derive(Debug, Clone, Default)]
pub struct EncodedCorpus {
    docs: BTreeMap<String, Vec<TokenMatrix>>,
}

impl EncodedCorpus {
    pub fn encode(store: &PassageStore, document_encoder: &EncoderParams) -> Result<Self> {
        let entries: Vec<(&String, &Vec<TokenSequence>)> = store.iter().collect();
        let encoded = entries
            .par_iter()
            .map(|(id, passages)| {
                let mats = passages
                    .iter()
                    .map(|p| document_encoder.encode(&p.ids))
                    .collect::<Result<Vec<_>>>()?;
                Ok(((*id).clone(), mats))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            docs: encoded.into_iter().collect(),
        })
    }

    pub fn get(&self, doc_id: &str) -> Option<&[TokenMatrix]> {
        self.docs.get(doc_id).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutput {
    pub ranked: Vec<ScoredDoc>,
    /// Candidate ids absent from the corpus.
    pub skipped: Vec<String>,
}

/// Rescores first-stage candidates by maxP late interaction and keeps the top `k`.
pub fn rerank(query: &TokenMatrix, candidates: &[ScoredDoc], corpus: &EncodedCorpus, k: usize) -> Result<RerankOutput> {
    if candidates.is_empty() {
        return Err(Error::Empty("rerank candidates".into()));
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for cand in candidates {
        match corpus.get(&cand.doc_id) {
            Some(passages) => ranked.push(ScoredDoc {
                doc_id: cand.doc_id.clone(),
                score: score_document(query, passages)?,
                provenance: Provenance::Reranked,
            }),
            None => {
                log::warn!(target: "rerank", "candidate `{}` not in corpus, skipped", cand.doc_id);
                skipped.push(cand.doc_id.clone());
            }
        }
    }
    sort_ranked(&mut ranked);
    ranked.truncate(k);
    Ok(RerankOutput { ranked, skipped })
}

/// Teacher model: one encoder for both roles, or separate query and document encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct LateInteractionModel {
    pub query: EncoderParams,
    /// `None` means the query encoder also encodes documents.
    pub document: Option<EncoderParams>,
}

impl LateInteractionModel {
    pub fn shared(params: EncoderParams) -> Self {
        Self {
            query: params,
            document: None,
        }
    }

    pub fn document_encoder(&self) -> &EncoderParams {
        self.document.as_ref().unwrap_or(&self.query)
    }

    pub fn pair(&self) -> EncoderPair<'_> {
        EncoderPair {
            query: &self.query,
            document: self.document_encoder(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train separate query and document encoders instead of one shared set.
    pub separate_encoders: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            batch: 32,
            epochs: 60,
            seed: 0,
            separate_encoders: false,
        }
    }
}

/// `−log softmax` of the positive score over (pos, neg): `ln(1 + e^{neg − pos})`.
pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> f64 {
    let x = s_neg - s_pos;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct TripleGrad {
    loss: f64,
    query: ParamGrad,
    document: ParamGrad,
}

fn triple_grad(model: &LateInteractionModel, triple: &Triple) -> Result<TripleGrad> {
    let q_enc = &model.query;
    let d_enc = model.document_encoder();
    let (q, q_cache) = q_enc.encode_with_cache(&triple.query.ids)?;
    let (pos, pos_cache) = d_enc.encode_with_cache(&triple.pos.ids)?;
    let (neg, neg_cache) = d_enc.encode_with_cache(&triple.neg.ids)?;
    let (s_pos, arg_pos) = maxsim_with_argmax(&q, &pos)?;
    let (s_neg, arg_neg) = maxsim_with_argmax(&q, &neg)?;
    let loss = pairwise_loss(s_pos, s_neg);
    // dL/dS_neg = σ(S_neg − S_pos) = −dL/dS_pos
    let w = sigmoid(s_neg - s_pos);

    let mut up_q = Array2::zeros(q.rows().dim());
    let mut up_pos = Array2::zeros(pos.rows().dim());
    let mut up_neg = Array2::zeros(neg.rows().dim());
    for i in 0..q.len() {
        let mut row = up_q.row_mut(i);
        row.scaled_add(-w, &pos.row(arg_pos[i]));
        row.scaled_add(w, &neg.row(arg_neg[i]));
        up_pos.row_mut(arg_pos[i]).scaled_add(-w, &q.row(i));
        up_neg.row_mut(arg_neg[i]).scaled_add(w, &q.row(i));
    }
    let query = q_enc.backward(&q, &q_cache, &up_q);
    let mut document = d_enc.backward(&pos, &pos_cache, &up_pos);
    document.add_assign(&d_enc.backward(&neg, &neg_cache, &up_neg));
    Ok(TripleGrad { loss, query, document })
}

/// Pairwise softmax cross-entropy training on (query, positive, negative) triples.
pub fn train_teacher(
    triples: &[Triple],
    mut model: LateInteractionModel,
    cfg: &TeacherConfig,
) -> Result<(LateInteractionModel, Vec<EpochRecord>)> {
    if triples.is_empty() {
        return Err(Error::Empty("training triples".into()));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(Error::Config(format!("invalid teacher settings {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let parts = batch
                .par_iter()
                .map(|&i| triple_grad(&model, &triples[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut q_grad = ParamGrad::zeros(model.query.dims());
            let mut d_grad = ParamGrad::zeros(model.document_encoder().dims());
            for part in parts {
                loss_sum += part.loss;
                q_grad.add_assign(&part.query);
                d_grad.add_assign(&part.document);
            }
            if !loss_sum.is_finite() || !q_grad.is_finite() || !d_grad.is_finite() {
                return Err(Error::Diverged(format!("non-finite teacher loss in epoch {epoch}")));
            }
            if cfg.lr == 0.0 {
                continue;
            }
            let scale = 1.0 / batch.len() as f64;
            q_grad.scale(scale);
            d_grad.scale(scale);
            match model.document.as_mut() {
                Some(doc) => {
                    model.query.apply_gradient(&q_grad, cfg.lr);
                    doc.apply_gradient(&d_grad, cfg.lr);
                }
                None => {
                    q_grad.add_assign(&d_grad);
                    model.query.apply_gradient(&q_grad, cfg.lr);
                }
            }
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / triples.len() as f64,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(target: "train_teacher", "{}", serde_json::to_string(&record).unwrap_or_default());
        records.push(record);
    }
    Ok((model, records))
}
