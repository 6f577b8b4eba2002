//! Pointwise query-document scorers.
//!
//! A scorer maps each `(query, document)` pair of a request to one real score.
//! The trainable student is a linear model over a fixed five-feature vector;
//! the planted teacher reads known relevance grades; the remote scorer talks to
//! an HTTP service that serializes each pair with a text template.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, unique_terms, Corpus, CorpusIndex, Document, Query};
use crate::error::{Error, Result};
use crate::http::{HttpConfig, JsonClient};
use crate::trec::{Qrels, RunList};

pub const FEATURE_DIM: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] =
    ["bm25_score", "term_overlap", "length_ratio", "exact_match", "bias"];
const BIAS: usize = 4;

/// `[bm25, term_overlap, length_ratio, exact_match, 1.0]`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn bm25_score(&self) -> f64 {
        self.0[0]
    }
    pub fn term_overlap(&self) -> f64 {
        self.0[1]
    }
    pub fn length_ratio(&self) -> f64 {
        self.0[2]
    }
    pub fn exact_match(&self) -> f64 {
        self.0[3]
    }
}

/// Computes the feature vector for one pair using `index` statistics.
///
/// `length_ratio` is `(1 + doc tokens) / (1 + average doc tokens)` so that it
/// stays positive for documents with no alphanumeric tokens. `exact_match` is 1
/// when the full query token sequence appears contiguously in the document.
pub fn extract_features(index: &CorpusIndex, query: &Query, doc: &Document) -> Result<FeatureVector> {
    let q = tokenize(&query.text);
    if q.is_empty() {
        return Err(Error::invalid(format!(
            "query {} has no terms after tokenization",
            query.query_id
        )));
    }
    let d = tokenize(&doc.text);
    let bm25 = index.score_tokens(&q, &d);
    let doc_terms: HashSet<&str> = d.iter().map(String::as_str).collect();
    let uq = unique_terms(&q);
    let overlap = uq.iter().filter(|t| doc_terms.contains(*t)).count() as f64 / uq.len() as f64;
    let length_ratio = (1.0 + d.len() as f64) / (1.0 + index.avg_doc_length());
    let exact = d.windows(q.len()).any(|w| w == q.as_slice());
    Ok(FeatureVector([
        bm25,
        overlap,
        length_ratio,
        if exact { 1.0 } else { 0.0 },
        1.0,
    ]))
}

/// One query with the documents to score, in output order.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    pub query: &'a Query,
    pub documents: Vec<&'a Document>,
}

impl<'a> ScoreRequest<'a> {
    pub fn new(query: &'a Query, documents: Vec<&'a Document>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::invalid("score request has no documents"));
        }
        Ok(ScoreRequest { query, documents })
    }
}

pub trait PointwiseScorer: Send + Sync {
    fn name(&self) -> String;

    /// One finite score per document, aligned with `request.documents`.
    fn score_batch(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>>;
}

fn ensure_finite(name: &str, scores: Vec<f64>, expected: usize) -> Result<Vec<f64>> {
    if scores.len() != expected {
        return Err(Error::Backend {
            status: None,
            message: format!("{name} returned {} scores for {expected} documents", scores.len()),
            retryable: false,
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Backend {
            status: None,
            message: format!("{name} returned a non-finite score"),
            retryable: false,
        });
    }
    Ok(scores)
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub means: [f64; FEATURE_DIM],
    pub stds: [f64; FEATURE_DIM],
}

impl Default for FeatureStats {
    fn default() -> Self {
        FeatureStats {
            means: [0.0; FEATURE_DIM],
            stds: [1.0; FEATURE_DIM],
        }
    }
}

impl FeatureStats {
    /// Fits zero-mean/unit-variance statistics. The bias column keeps mean 0
    /// and std 1; constant columns are centered with std 1.
    pub fn fit<'a, I>(features: I) -> Self
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut n = 0usize;
        let mut sum = [0.0; FEATURE_DIM];
        let mut sumsq = [0.0; FEATURE_DIM];
        for f in features {
            n += 1;
            for k in 0..FEATURE_DIM {
                sum[k] += f.0[k];
                sumsq[k] += f.0[k] * f.0[k];
            }
        }
        let mut stats = FeatureStats::default();
        if n == 0 {
            return stats;
        }
        for k in 0..FEATURE_DIM {
            if k == BIAS {
                continue;
            }
            let mean = sum[k] / n as f64;
            let var = (sumsq[k] / n as f64 - mean * mean).max(0.0);
            stats.means[k] = mean;
            stats.stds[k] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        stats
    }

    pub fn apply(&self, f: &FeatureVector) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|k| (f.0[k] - self.means[k]) / self.stds[k])
    }
}

/// Persisted linear student: weights over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: [f64; FEATURE_DIM],
    pub feature_means: [f64; FEATURE_DIM],
    pub feature_stds: [f64; FEATURE_DIM],
}

impl LinearModel {
    pub fn new(weights: [f64; FEATURE_DIM]) -> Self {
        Self::with_stats(weights, FeatureStats::default())
    }

    pub fn with_stats(weights: [f64; FEATURE_DIM], stats: FeatureStats) -> Self {
        LinearModel {
            weights,
            feature_means: stats.means,
            feature_stds: stats.stds,
        }
    }

    pub fn stats(&self) -> FeatureStats {
        FeatureStats {
            means: self.feature_means,
            stds: self.feature_stds,
        }
    }

    pub fn score(&self, f: &FeatureVector) -> f64 {
        let x = self.stats().apply(f);
        self.weights.iter().zip(&x).map(|(w, x)| w * x).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !finite(&self.weights) || !finite(&self.feature_means) || !finite(&self.feature_stds) {
            return Err(Error::Data("linear model has non-finite parameters".into()));
        }
        if self.feature_stds.iter().any(|s| *s <= 0.0) {
            return Err(Error::Data("linear model has non-positive feature std".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: LinearModel = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

pub struct LinearScorer<'a> {
    pub model: LinearModel,
    index: &'a CorpusIndex,
}

impl<'a> LinearScorer<'a> {
    pub fn new(model: LinearModel, index: &'a CorpusIndex) -> Result<Self> {
        model.validate()?;
        Ok(LinearScorer { model, index })
    }
}

impl PointwiseScorer for LinearScorer<'_> {
    fn name(&self) -> String {
        "linear".into()
    }

    fn score_batch(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        request
            .documents
            .iter()
            .map(|d| Ok(self.model.score(&extract_features(self.index, request.query, d)?)))
            .collect()
    }
}

/// First-stage BM25 score of each document.
pub struct Bm25Scorer<'a> {
    index: &'a CorpusIndex,
}

impl<'a> Bm25Scorer<'a> {
    pub fn new(index: &'a CorpusIndex) -> Self {
        Bm25Scorer { index }
    }
}

impl PointwiseScorer for Bm25Scorer<'_> {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn score_batch(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        let q = tokenize(&request.query.text);
        Ok(request
            .documents
            .iter()
            .map(|d| self.index.score_tokens(&q, &tokenize(&d.text)))
            .collect())
    }
}

/// Frozen teacher that scores `scale * grade + N(0, noise_sigma)` from a known
/// relevance map. The noise draw depends only on `(seed, query_id, doc_id)`.
#[derive(Debug, Clone)]
pub struct PlantedTeacher {
    pub relevance: Qrels,
    pub noise_sigma: f64,
    pub scale: f64,
    pub seed: u64,
}

impl PlantedTeacher {
    pub fn new(relevance: Qrels, noise_sigma: f64, scale: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {noise_sigma} must be >= 0")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale {scale} must be > 0")));
        }
        Ok(PlantedTeacher {
            relevance,
            noise_sigma,
            scale,
            seed,
        })
    }

    pub fn score_pair(&self, query_id: &str, doc_id: &str) -> f64 {
        let grade = f64::from(self.relevance.grade(query_id, doc_id));
        let noise = if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(self.seed, query_id, doc_id));
            let z: f64 = StandardNormal.sample(&mut rng);
            self.noise_sigma * z
        } else {
            0.0
        };
        self.scale * grade + noise
    }
}

impl PointwiseScorer for PlantedTeacher {
    fn name(&self) -> String {
        format!("planted(sigma={},scale={})", self.noise_sigma, self.scale)
    }

    fn score_batch(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        Ok(request
            .documents
            .iter()
            .map(|d| self.score_pair(&request.query.query_id, &d.doc_id))
            .collect())
    }
}

/// FNV-1a over the seed and both ids; stable across platforms and releases.
pub(crate) fn pair_seed(seed: u64, a: &str, b: &str) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let bytes = seed
        .to_le_bytes()
        .into_iter()
        .chain(a.bytes())
        .chain([0xff])
        .chain(b.bytes());
    for byte in bytes {
        h ^= u64::from(byte);
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub const DEFAULT_PAIR_TEMPLATE: &str = "query: {q} document: {d}";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteScorerConfig {
    #[serde(flatten)]
    pub http: HttpConfig,
    /// Pair serialization sent to the service; `{q}` and `{d}` are placeholders.
    pub template: String,
}

impl Default for RemoteScorerConfig {
    fn default() -> Self {
        RemoteScorerConfig {
            http: HttpConfig::default(),
            template: DEFAULT_PAIR_TEMPLATE.into(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RemoteScoreRequest {
    pub query: String,
    pub documents: Vec<String>,
    pub template: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RemoteScoreResponse {
    pub scores: Vec<f64>,
}

/// Scores pairs via `POST {"query","documents","template"} -> {"scores"}`.
pub struct RemoteScorer {
    client: JsonClient,
    template: String,
}

impl RemoteScorer {
    pub fn new(cfg: RemoteScorerConfig) -> Result<Self> {
        if !cfg.template.contains("{q}") || !cfg.template.contains("{d}") {
            return Err(Error::Config(format!(
                "pair template {:?} must contain {{q}} and {{d}}",
                cfg.template
            )));
        }
        Ok(RemoteScorer {
            client: JsonClient::new(cfg.http)?,
            template: cfg.template,
        })
    }

    pub fn client(&self) -> &JsonClient {
        &self.client
    }
}

impl PointwiseScorer for RemoteScorer {
    fn name(&self) -> String {
        format!("remote({})", self.client.url())
    }

    fn score_batch(&self, request: &ScoreRequest<'_>) -> Result<Vec<f64>> {
        let body = RemoteScoreRequest {
            query: request.query.text.clone(),
            documents: request.documents.iter().map(|d| d.text.clone()).collect(),
            template: self.template.clone(),
        };
        let resp: RemoteScoreResponse = self.client.post(&body)?;
        ensure_finite(&self.name(), resp.scores, request.documents.len())
    }
}

/// Re-scores every document of `run` and sorts by score descending, breaking
/// ties by the original rank. Ranks are renumbered and scores replaced.
pub fn rerank_pointwise(
    scorer: &dyn PointwiseScorer,
    run: &RunList,
    corpus: &Corpus,
    query: &Query,
) -> Result<RunList> {
    if run.is_empty() {
        return Ok(RunList::empty(run.query_id.clone()));
    }
    let docs = corpus.resolve(run.doc_ids())?;
    let request = ScoreRequest::new(query, docs)?;
    let scores = scorer.score_batch(&request)?;
    let scores = ensure_finite(&scorer.name(), scores, run.len())?;
    let mut order: Vec<usize> = (0..run.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    RunList::from_scored(
        run.query_id.clone(),
        order
            .into_iter()
            .map(|i| (run.entries[i].doc_id.clone(), scores[i])),
    )
}
