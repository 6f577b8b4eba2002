//! Stage-one distillation: fit a linear student against a frozen teacher.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LabelVector, LossConfig, ScoreMatrix};
use crate::metrics::{ndcg_from_grades, Gain};
use crate::parallel::{map_ordered, Execution};
use crate::scorers::{
    extract_features, pair_seed, FeatureStats, FeatureVector, LinearModel, PointwiseScorer,
    ScoreRequest, FEATURE_DIM,
};
use crate::trec::Qrels;

/// One query's training candidates: a single positive plus sampled negatives,
/// in a seeded random order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGroup {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub features: Vec<FeatureVector>,
    pub labels: LabelVector,
    pub teacher: Vec<f64>,
    /// Known relevance grade of each candidate, used for held-out nDCG.
    pub grades: Vec<u32>,
}

impl QueryGroup {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub negatives_per_query: usize,
    /// BM25 depth the negatives are drawn from.
    pub candidate_depth: usize,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            negatives_per_query: 7,
            candidate_depth: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub queries: usize,
    pub built: usize,
    pub skipped_no_positive: usize,
    pub skipped_few_negatives: usize,
}

/// Builds one group per query. The positive is the query's highest-graded
/// document in `relevance` (ties by doc id); negatives are sampled uniformly
/// without replacement from the BM25 top `candidate_depth` documents that have
/// no positive grade.
pub fn build_training_set(
    corpus: &Corpus,
    queries: &[Query],
    relevance: &Qrels,
    teacher: &dyn PointwiseScorer,
    opts: &BuildOptions,
    exec: Execution,
) -> Result<(Vec<QueryGroup>, BuildReport)> {
    enum Outcome {
        Built(Box<QueryGroup>),
        NoPositive,
        FewNegatives,
    }
    let outcomes = map_ordered(exec, queries, |q| -> Result<Outcome> {
        let positive = relevance.for_query(&q.query_id).and_then(|m| {
            m.iter()
                .filter(|(d, g)| **g > 0 && corpus.get(d).is_some())
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(d, _)| d.clone())
        });
        let Some(positive) = positive else {
            return Ok(Outcome::NoPositive);
        };
        let run = corpus.bm25_search(q, opts.candidate_depth.max(1))?;
        let pool: Vec<&str> = run
            .doc_ids()
            .filter(|d| *d != positive && relevance.grade(&q.query_id, d) == 0)
            .collect();
        if pool.len() < opts.negatives_per_query {
            return Ok(Outcome::FewNegatives);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(opts.seed, &q.query_id, "negatives"));
        let mut ids: Vec<String> = vec![positive.clone()];
        ids.extend(
            index::sample(&mut rng, pool.len(), opts.negatives_per_query)
                .into_iter()
                .map(|i| pool[i].to_string()),
        );
        ids.shuffle(&mut rng);
        let docs = corpus.resolve(ids.iter().map(String::as_str))?;
        let features = docs
            .iter()
            .map(|d| extract_features(corpus.index(), q, d))
            .collect::<Result<Vec<_>>>()?;
        let teacher_scores = teacher.score_batch(&ScoreRequest::new(q, docs)?)?;
        if teacher_scores.len() != ids.len() || teacher_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "teacher produced invalid scores for query {}",
                q.query_id
            )));
        }
        let pos_index = ids.iter().position(|d| *d == positive).unwrap();
        let grades = ids.iter().map(|d| relevance.grade(&q.query_id, d)).collect();
        Ok(Outcome::Built(Box::new(QueryGroup {
            query_id: q.query_id.clone(),
            labels: LabelVector::positive_at(ids.len(), pos_index)?,
            doc_ids: ids,
            features,
            teacher: teacher_scores,
            grades,
        })))
    });
    let mut groups = Vec::new();
    let mut report = BuildReport {
        queries: queries.len(),
        ..Default::default()
    };
    for o in outcomes {
        match o? {
            Outcome::Built(g) => groups.push(*g),
            Outcome::NoPositive => report.skipped_no_positive += 1,
            Outcome::FewNegatives => report.skipped_few_negatives += 1,
        }
    }
    report.built = groups.len();
    if report.skipped_no_positive > 0 || report.skipped_few_negatives > 0 {
        log::warn!(
            "training set: skipped {} queries without a positive and {} with too few negatives",
            report.skipped_no_positive,
            report.skipped_few_negatives
        );
    }
    Ok((groups, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Decays linearly to zero over the total number of steps.
    LinearDecay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    /// Fraction of groups held out for Kendall-tau and nDCG reporting.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 8,
            weight_decay: 0.1,
            seed: 0,
            lr_schedule: LrSchedule::Constant,
            holdout_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction {} must be in [0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full training-split loss before the first update.
    pub initial_loss: f64,
    /// Full training-split loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-query Kendall tau-b between student and teacher scores on the held-out split.
    pub heldout_kendall: Vec<Option<f64>>,
    /// Mean held-out nDCG@10 of the final student over each group's candidates.
    pub heldout_ndcg10: Option<f64>,
    pub train_queries: Vec<String>,
    pub heldout_queries: Vec<String>,
    pub model: LinearModel,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Kendall tau-b between two score vectors; `None` when either side is constant.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_a, mut ties_b) = (0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + ties_a) as f64;
    let n2 = (concordant + discordant + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / (n1 * n2).sqrt())
}

struct Prepared {
    x: Vec<Vec<[f64; FEATURE_DIM]>>,
}

fn scores(w: &[f64; FEATURE_DIM], rows: &[[f64; FEATURE_DIM]]) -> Vec<f64> {
    rows.iter()
        .map(|x| w.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn batch_loss(
    w: &[f64; FEATURE_DIM],
    idx: &[usize],
    data: &[QueryGroup],
    prep: &Prepared,
    loss: &LossConfig,
) -> Result<(f64, [f64; FEATURE_DIM])> {
    let student: Vec<Vec<f64>> = idx.iter().map(|&i| scores(w, &prep.x[i])).collect();
    let teacher: Vec<Vec<f64>> = idx.iter().map(|&i| data[i].teacher.clone()).collect();
    let labels: Vec<LabelVector> = idx.iter().map(|&i| data[i].labels.clone()).collect();
    let out = total_loss(&ScoreMatrix::new(student, Some(teacher))?, &labels, loss)?;
    let mut grad_w = [0.0; FEATURE_DIM];
    for (row, &i) in out.grad.iter().zip(idx) {
        for (g, x) in row.iter().zip(&prep.x[i]) {
            for k in 0..FEATURE_DIM {
                grad_w[k] += g * x[k];
            }
        }
    }
    Ok((out.loss, grad_w))
}

/// Deterministic split of `n` groups into (train, held-out) indices.
fn split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(seed, "split", "")));
    let held = ((n as f64) * fraction).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let heldout = idx.split_off(n - held);
    idx.sort_unstable();
    let mut heldout = heldout;
    heldout.sort_unstable();
    (idx, heldout)
}

fn mean_defined<I: IntoIterator<Item = Option<f64>>>(xs: I) -> Option<f64> {
    let (sum, n) = xs
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Minibatch gradient descent on the alpha-weighted loss with decoupled
/// weight decay, starting from zero weights on standardized features.
pub fn train_student(data: &[QueryGroup], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let m = data[0].len();
    if let Some(g) = data.iter().find(|g| g.len() != m || g.teacher.len() != m || g.features.len() != m || g.labels.len() != m) {
        return Err(Error::invalid(format!(
            "query {} has inconsistent candidate count (expected {m})",
            g.query_id
        )));
    }
    let (train_idx, held_idx) = split(data.len(), cfg.holdout_fraction, cfg.seed);
    let stats = FeatureStats::fit(train_idx.iter().flat_map(|&i| data[i].features.iter()));
    let prep = Prepared {
        x: data
            .iter()
            .map(|g| g.features.iter().map(|f| stats.apply(f)).collect())
            .collect(),
    };

    let mut w = [0.0; FEATURE_DIM];
    let initial_loss = batch_loss(&w, &train_idx, data, &prep, &cfg.loss)?.0;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, step: 0, last_finite_loss: f64::NAN });
    }
    let mut last_finite = initial_loss;
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut heldout_kendall = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(cfg.seed, "epoch", &epoch.to_string())));
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_loss(&w, batch, data, &prep, &cfg.loss)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, last_finite_loss: last_finite });
            }
            last_finite = loss;
            let lr = match cfg.lr_schedule {
                LrSchedule::Constant => cfg.learning_rate,
                LrSchedule::LinearDecay => cfg.learning_rate * (1.0 - step as f64 / total_steps),
            };
            for k in 0..FEATURE_DIM {
                w[k] -= lr * (grad[k] + cfg.weight_decay * w[k]);
            }
            step += 1;
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged { epoch, step, last_finite_loss: last_finite });
            }
        }
        let epoch_loss = batch_loss(&w, &train_idx, data, &prep, &cfg.loss)?.0;
        if !epoch_loss.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { epoch, step, last_finite_loss: last_finite });
        }
        last_finite = epoch_loss;
        epoch_losses.push(epoch_loss);
        heldout_kendall.push(mean_defined(
            held_idx
                .iter()
                .map(|&i| kendall_tau_b(&scores(&w, &prep.x[i]), &data[i].teacher)),
        ));
    }

    let heldout_ndcg10 = (!held_idx.is_empty()).then(|| {
        held_idx
            .iter()
            .map(|&i| group_ndcg(&scores(&w, &prep.x[i]), &data[i].grades, 10))
            .sum::<f64>()
            / held_idx.len() as f64
    });
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        heldout_kendall,
        heldout_ndcg10,
        train_queries: train_idx.iter().map(|&i| data[i].query_id.clone()).collect(),
        heldout_queries: held_idx.iter().map(|&i| data[i].query_id.clone()).collect(),
        model: LinearModel::with_stats(w, stats),
    })
}

/// nDCG@k of a group ranked by `scores` (ties keep candidate order).
pub fn group_ndcg(scores: &[f64], grades: &[u32], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let ranked: Vec<u32> = order.iter().map(|&i| grades[i]).collect();
    ndcg_from_grades(&ranked, grades, k, Gain::Exponential)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub ndcg10: std::result::Result<f64, String>,
}

/// Trains one student per alpha on identical data and seed.
pub fn alpha_sweep(data: &[QueryGroup], alphas: &[f64], cfg: &TrainConfig, exec: Execution) -> Result<Vec<SweepRow>> {
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
    }
    Ok(map_ordered(exec, alphas, |&alpha| {
        let mut c = *cfg;
        c.loss.alpha = alpha;
        let ndcg10 = train_student(data, &c)
            .and_then(|r| {
                r.heldout_ndcg10
                    .ok_or_else(|| Error::invalid("no held-out queries to evaluate"))
            })
            .map_err(|e| {
                log::error!("alpha {alpha}: {e}");
                e.to_string()
            });
        SweepRow { alpha, ndcg10 }
    }))
}

/// `alpha,ndcg10` CSV; failed rows leave the value empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,ndcg10\n");
    for r in rows {
        match &r.ndcg10 {
            Ok(v) => {
                let _ = writeln!(out, "{},{v:.6}", r.alpha);
            }
            Err(_) => {
                let _ = writeln!(out, "{},", r.alpha);
            }
        }
    }
    out
}
