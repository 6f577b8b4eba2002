//! Seeded planted-relevance benchmarks.
//!
//! Each query owns a handful of documents: graded relevant ones that mention
//! the query's topic terms once each inside long passages, and grade-0
//! distractors that repeat a subset of the topic terms in short passages.
//! BM25 tends to prefer the distractors, which leaves room for a relevance-aware
//! reranker to improve on it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, Query};
use crate::error::{Error, Result};
use crate::trec::{format_qrels, Qrels};

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "be", "da", "fu", "ge", "ho", "ji", "pu", "ze",
];
const COMMON: [&str; 8] = [
    "system", "method", "result", "model", "process", "study", "value", "report",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub queries: usize,
    pub docs: usize,
    /// Relevant documents per query (capped below the per-query allotment).
    pub relevant_per_query: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            queries: 20,
            docs: 200,
            relevant_per_query: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| *SYLLABLES.choose(rng).unwrap())
        .collect()
}

/// Distinct four-syllable topic terms (filler words use two or three).
fn topic_terms(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng, 4);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SyntheticBenchmark {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.queries == 0 || cfg.docs < 2 * cfg.queries {
            return Err(Error::Config(format!(
                "need at least two documents per query ({} docs for {} queries)",
                cfg.docs, cfg.queries
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let filler: Vec<String> = (0..400)
            .map(|i| word(&mut rng, 2 + i % 2))
            .collect();
        let topics = topic_terms(cfg.queries * 3, &mut rng);
        let per_query = cfg.docs / cfg.queries;
        let relevant = cfg.relevant_per_query.clamp(1, per_query - 1);

        let filler_text = |rng: &mut ChaCha8Rng, len: std::ops::Range<usize>| -> Vec<String> {
            let len = rng.random_range(len);
            (0..len).map(|_| filler.choose(rng).unwrap().clone()).collect()
        };
        let insert = |rng: &mut ChaCha8Rng, words: &mut Vec<String>, term: &str| {
            let at = rng.random_range(0..=words.len());
            words.insert(at, term.to_string());
        };

        let mut queries = Vec::with_capacity(cfg.queries);
        let mut qrels = Qrels::new();
        let mut documents = Vec::with_capacity(cfg.docs);
        for q in 0..cfg.queries {
            let qid = format!("q{q}");
            let terms = &topics[3 * q..3 * q + 3];
            let common = COMMON[q % COMMON.len()];
            queries.push(Query::new(&qid, format!("{} {} {} {common}", terms[0], terms[1], terms[2])));
            for slot in 0..per_query {
                let doc_id = format!("d{}", documents.len());
                let mut words;
                if slot < relevant {
                    let grade = match slot {
                        0 => 3,
                        1 => 2,
                        _ => 1,
                    };
                    words = filler_text(&mut rng, 28..40);
                    let mut chosen: Vec<&String> = terms.iter().collect();
                    chosen.truncate(grade as usize);
                    for t in chosen {
                        insert(&mut rng, &mut words, t);
                    }
                    if rng.random_bool(0.5) {
                        insert(&mut rng, &mut words, common);
                    }
                    qrels.insert(&qid, &doc_id, grade);
                } else {
                    words = filler_text(&mut rng, 8..14);
                    let picks = rng.random_range(1..=2);
                    for t in terms.choose_multiple(&mut rng, picks) {
                        for _ in 0..rng.random_range(2..=3) {
                            insert(&mut rng, &mut words, t);
                        }
                    }
                    insert(&mut rng, &mut words, common);
                    qrels.insert(&qid, &doc_id, 0);
                }
                documents.push(Document::new(doc_id, words.join(" ")));
            }
        }
        while documents.len() < cfg.docs {
            let mut words = filler_text(&mut rng, 15..35);
            let c = COMMON.choose(&mut rng).unwrap();
            insert(&mut rng, &mut words, c);
            documents.push(Document::new(format!("d{}", documents.len()), words.join(" ")));
        }
        Ok(SyntheticBenchmark {
            documents,
            queries,
            qrels,
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::from_documents(self.documents.clone())
    }

    /// Writes `corpus.jsonl`, `queries.jsonl` and `qrels.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let corpus = dir.join("corpus.jsonl");
        let queries = dir.join("queries.jsonl");
        let qrels = dir.join("qrels.txt");
        let jsonl = |items: Vec<String>| items.into_iter().map(|l| l + "\n").collect::<String>();
        fs::write(
            &corpus,
            jsonl(self.documents.iter().map(|d| serde_json::to_string(d).unwrap()).collect()),
        )
        .map_err(|e| Error::io(&corpus, e))?;
        fs::write(
            &queries,
            jsonl(self.queries.iter().map(|q| serde_json::to_string(q).unwrap()).collect()),
        )
        .map_err(|e| Error::io(&queries, e))?;
        fs::write(&qrels, format_qrels(&self.qrels)).map_err(|e| Error::io(&qrels, e))?;
        Ok([corpus, queries, qrels])
    }
}
