//! Seeded pseudo-bilingual bundle generator.
//!
//! The teacher language is a set of invented CV-syllable words; the student
//! language renames every content word through a seeded bijection, so the
//! ground-truth word alignment is known exactly. Documents come from a topic
//! mixture (primary topic, shared background words, a little cross-topic
//! noise) and a document is relevant to a query when they share a topic.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    bitext_to_tsv, corpus_to_jsonl, queries_to_tsv, triples_to_tsv, write_text, Bijection, BitextLine, Query,
    TripleLine,
};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::lexical::CorpusDoc;
use crate::text::Vocabulary;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const QUERIES_TEACHER_FILE: &str = "queries.en.tsv";
pub const QUERIES_STUDENT_FILE: &str = "queries.xx.tsv";
pub const QRELS_FILE: &str = "qrels.txt";
pub const BITEXT_FILE: &str = "bitext.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const BIJECTION_FILE: &str = "bijection.tsv";

const TEACHER_CONSONANTS: &[u8] = b"bdfgklmnprst";
const STUDENT_CONSONANTS: &[u8] = b"chjqvwxyz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Content words per language; the vocabulary adds four specials.
    pub terms: usize,
    /// Content words shared by all topics.
    pub background_terms: usize,
    pub topics: usize,
    /// Interchangeable surface words per topical concept. A document sticks
    /// to one form per concept while queries pick forms freely, which creates
    /// vocabulary mismatch between queries and relevant documents.
    pub synonyms: usize,
    pub docs: usize,
    pub queries: usize,
    pub train_queries: usize,
    pub triples_per_query: usize,
    /// Share of training negatives drawn from off-topic documents that
    /// contain a query word, like negatives sampled from a lexical ranking.
    pub hard_negative_rate: f64,
    pub bitext: usize,
    /// Inclusive word-count range of ordinary documents.
    pub doc_len: [usize; 2],
    pub long_doc_rate: f64,
    pub long_doc_len: [usize; 2],
    /// Per-word probability of drawing from the document's topic.
    pub topic_rate: f64,
    /// Per-word probability of drawing from a random other topic.
    pub noise_rate: f64,
    pub query_topic_words: [usize; 2],
    pub query_background_words: [usize; 2],
    pub sentence_len: [usize; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            terms: 498,
            background_terms: 100,
            topics: 20,
            synonyms: 3,
            docs: 500,
            queries: 50,
            train_queries: 1000,
            triples_per_query: 4,
            hard_negative_rate: 0.5,
            bitext: 5000,
            doc_len: [12, 60],
            long_doc_rate: 0.05,
            long_doc_len: [180, 260],
            topic_rate: 0.55,
            noise_rate: 0.02,
            query_topic_words: [3, 5],
            query_background_words: [2, 3],
            sentence_len: [4, 10],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        let range_ok = |r: [usize; 2]| r[0] <= r[1];
        if self.topics == 0 || self.docs == 0 || self.queries == 0 || self.train_queries == 0 {
            return bad("topics, docs, queries and train_queries must be positive");
        }
        if self.triples_per_query == 0 || self.bitext == 0 {
            return bad("triples_per_query and bitext must be positive");
        }
        if self.synonyms == 0 {
            return bad("synonyms must be positive");
        }
        if self.terms < self.background_terms + self.topics * self.synonyms {
            return bad("need at least one full concept per topic");
        }
        if self.docs < self.topics || self.topics < 2 {
            return bad("need two or more topics and at least one document per topic");
        }
        if !(range_ok(self.doc_len)
            && range_ok(self.long_doc_len)
            && range_ok(self.query_topic_words)
            && range_ok(self.query_background_words)
            && range_ok(self.sentence_len))
        {
            return bad("ranges must be [min, max] with min <= max");
        }
        if self.doc_len[0] == 0 || self.sentence_len[0] == 0 || self.query_topic_words[0] == 0 {
            return bad("documents, sentences and queries need at least one word");
        }
        if self.background_terms == 0 && (self.query_background_words[1] > 0 || self.topic_rate + self.noise_rate < 1.0) {
            return bad("background words requested but background_terms = 0");
        }
        for p in [self.long_doc_rate, self.topic_rate, self.noise_rate, self.hard_negative_rate] {
            if !(0.0..=1.0).contains(&p) {
                return bad("rates must lie in [0, 1]");
            }
        }
        if self.topic_rate + self.noise_rate > 1.0 {
            return bad("topic_rate + noise_rate exceeds 1");
        }
        Ok(())
    }

    /// Upper bound on distinct teacher-language bitext sentences.
    pub fn bitext_capacity(&self) -> u128 {
        let n = self.terms as u128;
        (self.sentence_len[0]..=self.sentence_len[1]).fold(0u128, |acc, len| {
            let count = (0..len).fold(1u128, |c, _| c.saturating_mul(n));
            acc.saturating_add(count)
        })
    }
}

/// Everything `cmd_synth` writes, in memory.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub vocab: Vocabulary,
    pub bijection: Bijection,
    pub corpus: Vec<CorpusDoc>,
    /// Primary topic of each corpus document, aligned with `corpus`.
    pub doc_topics: Vec<usize>,
    pub queries_teacher: Vec<Query>,
    pub queries_student: Vec<Query>,
    pub qrels: Qrels,
    pub triples: Vec<TripleLine>,
    pub bitext: Vec<BitextLine>,
}

impl Bundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(VOCAB_FILE), &self.vocab.to_file_string())?;
        write_text(&dir.join(CORPUS_FILE), &corpus_to_jsonl(&self.corpus))?;
        write_text(&dir.join(QUERIES_TEACHER_FILE), &queries_to_tsv(&self.queries_teacher))?;
        write_text(&dir.join(QUERIES_STUDENT_FILE), &queries_to_tsv(&self.queries_student))?;
        write_text(&dir.join(QRELS_FILE), &self.qrels.to_trec_string())?;
        write_text(&dir.join(TRIPLES_FILE), &triples_to_tsv(&self.triples))?;
        write_text(&dir.join(BITEXT_FILE), &bitext_to_tsv(&self.bitext))?;
        write_text(&dir.join(BIJECTION_FILE), &self.bijection.to_tsv())
    }
}

/// Independent stream per artifact, so e.g. the bitext size does not perturb the corpus.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn syllable(consonants: &[u8], k: usize) -> [u8; 2] {
    [consonants[k / VOWELS.len()], VOWELS[k % VOWELS.len()]]
}

/// `n` distinct words of `min_syl..=max_syl` syllables, in random order.
fn invent_words(rng: &mut ChaCha8Rng, consonants: &[u8], min_syl: u32, max_syl: u32, n: usize) -> Result<Vec<String>> {
    let s = consonants.len() * VOWELS.len();
    let sizes: Vec<usize> = (min_syl..=max_syl).map(|k| s.pow(k)).collect();
    let total: usize = sizes.iter().sum();
    if n > total {
        return Err(Error::Config(format!("cannot invent {n} distinct words (at most {total})")));
    }
    let words = index::sample(rng, total, n)
        .into_iter()
        .map(|mut code| {
            let mut syl = min_syl;
            for &size in &sizes {
                if code < size {
                    break;
                }
                code -= size;
                syl += 1;
            }
            let mut word = Vec::with_capacity(2 * syl as usize);
            for _ in 0..syl {
                word.extend_from_slice(&syllable(consonants, code % s));
                code /= s;
            }
            String::from_utf8(word).expect("ascii letters")
        })
        .collect();
    Ok(words)
}

struct TopicModel {
    background: Vec<usize>,
    background_w: WeightedIndex<f64>,
    /// topic → concept → interchangeable surface words
    topics: Vec<Vec<Vec<usize>>>,
    concept_w: Vec<WeightedIndex<f64>>,
}

fn zipf(n: usize, exponent: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| (r as f64 + 1.0).powf(-exponent))).expect("non-empty positive weights")
}

impl TopicModel {
    fn new(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let mut order: Vec<usize> = (0..cfg.terms).collect();
        order.shuffle(rng);
        let background = order[..cfg.background_terms].to_vec();
        let mut words = vec![Vec::new(); cfg.topics];
        for (i, &w) in order[cfg.background_terms..].iter().enumerate() {
            words[i % cfg.topics].push(w);
        }
        let topics: Vec<Vec<Vec<usize>>> = words
            .iter()
            .map(|ws| {
                let n_concepts = (ws.len() / cfg.synonyms).max(1);
                let mut concepts = vec![Vec::new(); n_concepts];
                for (i, &w) in ws.iter().enumerate() {
                    concepts[i % n_concepts].push(w);
                }
                concepts
            })
            .collect();
        let background_w = zipf(background.len().max(1), 1.0);
        let concept_w = topics.iter().map(|t| zipf(t.len(), 0.5)).collect();
        Self {
            background,
            background_w,
            topics,
            concept_w,
        }
    }

    fn concept(&self, rng: &mut ChaCha8Rng, topic: usize) -> usize {
        self.concept_w[topic].sample(rng)
    }

    fn random_surface(&self, rng: &mut ChaCha8Rng, topic: usize, concept: usize) -> usize {
        *self.topics[topic][concept].choose(rng).expect("concepts are non-empty")
    }

    fn background_word(&self, rng: &mut ChaCha8Rng) -> usize {
        self.background[self.background_w.sample(rng)]
    }

    /// One surface-form choice per concept of `topic`, fixed for a whole document.
    fn doc_style(&self, rng: &mut ChaCha8Rng, topic: usize) -> Vec<usize> {
        self.topics[topic].iter().map(|c| rng.gen_range(0..c.len())).collect()
    }

    /// With `style`, topical words use the document's surface forms; otherwise forms are drawn per word.
    fn doc_word(&self, rng: &mut ChaCha8Rng, topic: usize, style: Option<&[usize]>, cfg: &SynthConfig) -> usize {
        let u: f64 = rng.gen();
        if u < cfg.topic_rate {
            let c = self.concept(rng, topic);
            match style {
                Some(s) => self.topics[topic][c][s[c]],
                None => self.random_surface(rng, topic, c),
            }
        } else if u < cfg.topic_rate + cfg.noise_rate {
            let other = (topic + rng.gen_range(1..self.topics.len())) % self.topics.len();
            let c = self.concept(rng, other);
            self.random_surface(rng, other, c)
        } else {
            self.background_word(rng)
        }
    }

    /// Words for distinct concepts followed by background words.
    fn query_words(&self, rng: &mut ChaCha8Rng, topic: usize, cfg: &SynthConfig) -> Vec<usize> {
        let n_topic = rng.gen_range(cfg.query_topic_words[0]..=cfg.query_topic_words[1]);
        let n_bg = rng.gen_range(cfg.query_background_words[0]..=cfg.query_background_words[1]);
        let n_topic = n_topic.min(self.topics[topic].len());
        let mut seen = BTreeSet::new();
        let mut words = Vec::new();
        while words.len() < n_topic {
            let c = self.concept(rng, topic);
            if seen.insert(c) {
                words.push(self.random_surface(rng, topic, c));
            }
        }
        for _ in 0..n_bg {
            words.push(self.background_word(rng));
        }
        words
    }
}

fn join(words: &[usize], lexicon: &[String]) -> String {
    words.iter().map(|&w| lexicon[w].as_str()).collect::<Vec<_>>().join(" ")
}

pub fn generate(seed: u64, cfg: &SynthConfig) -> Result<Bundle> {
    cfg.validate()?;
    if (cfg.bitext as u128) > cfg.bitext_capacity() {
        return Err(Error::Config(format!(
            "bitext size {} exceeds the {} distinct sentences the generator can produce",
            cfg.bitext,
            cfg.bitext_capacity()
        )));
    }

    let mut rng = stream(seed, 0);
    let teacher_words = invent_words(&mut rng, TEACHER_CONSONANTS, 2, 3, cfg.terms)?;
    let student_words = invent_words(&mut rng, STUDENT_CONSONANTS, 3, 4, cfg.terms)?;
    let bijection = Bijection::new(teacher_words.iter().cloned().zip(student_words.iter().cloned()))?;
    let vocab = Vocabulary::with_specials(teacher_words.iter().chain(&student_words))?;

    let mut rng = stream(seed, 1);
    let model = TopicModel::new(&mut rng, cfg);

    let mut rng = stream(seed, 2);
    let mut corpus = Vec::with_capacity(cfg.docs);
    let mut doc_topics = Vec::with_capacity(cfg.docs);
    let mut by_topic = vec![Vec::new(); cfg.topics];
    // word → documents containing it, for lexical hard negatives
    let mut by_word: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); cfg.terms];
    for i in 0..cfg.docs {
        // round-robin primary topic keeps every topic populated
        let topic = i % cfg.topics;
        let range = if rng.gen_bool(cfg.long_doc_rate) {
            cfg.long_doc_len
        } else {
            cfg.doc_len
        };
        let len = rng.gen_range(range[0]..=range[1]);
        let style = model.doc_style(&mut rng, topic);
        let words: Vec<usize> = (0..len)
            .map(|_| model.doc_word(&mut rng, topic, Some(&style), cfg))
            .collect();
        for &w in &words {
            by_word[w].insert(i);
        }
        let doc_id = format!("d{i:04}");
        by_topic[topic].push(doc_id.clone());
        corpus.push(CorpusDoc {
            doc_id,
            text: join(&words, &teacher_words),
        });
        doc_topics.push(topic);
    }

    let mut rng = stream(seed, 3);
    let mut queries_teacher = Vec::with_capacity(cfg.queries);
    let mut queries_student = Vec::with_capacity(cfg.queries);
    let mut qrels = Qrels::default();
    for i in 0..cfg.queries {
        let topic = rng.gen_range(0..cfg.topics);
        let words = model.query_words(&mut rng, topic, cfg);
        let id = format!("q{i:03}");
        queries_teacher.push(Query {
            id: id.clone(),
            text: join(&words, &teacher_words),
        });
        queries_student.push(Query {
            id: id.clone(),
            text: join(&words, &student_words),
        });
        for doc_id in &by_topic[topic] {
            qrels.insert(&id, doc_id, 1);
        }
    }

    let mut rng = stream(seed, 4);
    let mut triples = Vec::with_capacity(cfg.train_queries * cfg.triples_per_query);
    for _ in 0..cfg.train_queries {
        let topic = rng.gen_range(0..cfg.topics);
        let words = model.query_words(&mut rng, topic, cfg);
        let hard: Vec<usize> = words
            .iter()
            .flat_map(|&w| by_word[w].iter().copied())
            .filter(|&d| doc_topics[d] != topic)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let query = join(&words, &teacher_words);
        for _ in 0..cfg.triples_per_query {
            let pos = by_topic[topic].choose(&mut rng).expect("topic has documents").clone();
            let neg = if !hard.is_empty() && rng.gen_bool(cfg.hard_negative_rate) {
                corpus[*hard.choose(&mut rng).expect("non-empty")].doc_id.clone()
            } else {
                let other = (topic + rng.gen_range(1..cfg.topics)) % cfg.topics;
                by_topic[other].choose(&mut rng).expect("topic has documents").clone()
            };
            triples.push(TripleLine {
                query: query.clone(),
                pos,
                neg,
            });
        }
    }

    let mut rng = stream(seed, 5);
    let mut seen = BTreeSet::new();
    let mut bitext = Vec::with_capacity(cfg.bitext);
    let max_attempts = cfg.bitext.saturating_mul(50).saturating_add(1000);
    let mut attempts = 0usize;
    while bitext.len() < cfg.bitext {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "could only generate {} distinct bitext pairs of the {} requested",
                bitext.len(),
                cfg.bitext
            )));
        }
        let topic = rng.gen_range(0..cfg.topics);
        let len = rng.gen_range(cfg.sentence_len[0]..=cfg.sentence_len[1]);
        let words: Vec<usize> = (0..len).map(|_| model.doc_word(&mut rng, topic, None, cfg)).collect();
        if seen.insert(words.clone()) {
            bitext.push(BitextLine {
                source: join(&words, &student_words),
                target: join(&words, &teacher_words),
            });
        }
    }

    Ok(Bundle {
        vocab,
        bijection,
        corpus,
        doc_topics,
        queries_teacher,
        queries_student,
        qrels,
        triples,
        bitext,
    })
}
