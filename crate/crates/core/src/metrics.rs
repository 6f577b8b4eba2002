//! Retrieval evaluation: nDCG@k against graded qrels and Top-k answer accuracy.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::parallel::{map_ordered, Execution};
use crate::trec::{Qrels, RunList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// 2^rel - 1, the trec_eval convention.
    #[default]
    Exponential,
    Linear,
}

impl Gain {
    pub fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
            Gain::Linear => f64::from(grade),
        }
    }
}

/// DCG of the first `k` grades, with a log2(i + 1) discount for 1-based position i.
pub fn dcg(grades: &[u32], k: usize, gain: Gain) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.of(g) / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k of `ranked` grades, normalized by the best ordering of `judged`.
/// Zero when no judged document has positive gain.
pub fn ndcg_from_grades(ranked: &[u32], judged: &[u32], k: usize, gain: Gain) -> f64 {
    let mut ideal = judged.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&ideal, k, gain);
    if idcg <= 0.0 {
        return 0.0;
    }
    (dcg(ranked, k, gain) / idcg).min(1.0)
}

pub fn ndcg_at_k(run: &RunList, qrels: &Qrels, k: usize) -> f64 {
    ndcg_at_k_with(run, qrels, k, Gain::Exponential)
}

pub fn ndcg_at_k_with(run: &RunList, qrels: &Qrels, k: usize, gain: Gain) -> f64 {
    let ranked: Vec<u32> = run
        .doc_ids()
        .take(k)
        .map(|d| qrels.grade(&run.query_id, d))
        .collect();
    let judged: Vec<u32> = qrels
        .for_query(&run.query_id)
        .map(|m| m.values().copied().collect())
        .unwrap_or_default();
    ndcg_from_grades(&ranked, &judged, k, gain)
}

/// Lowercases, removes punctuation and collapses whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{00a1}' | '\u{00bf}' | '\u{00ab}' | '\u{00bb}')
}

/// True when normalized `answer` occurs in normalized `text` on token boundaries.
pub fn contains_answer(text: &str, answer: &str) -> bool {
    let a = normalize_answer(answer);
    if a.is_empty() {
        return false;
    }
    format!(" {} ", normalize_answer(text)).contains(&format!(" {a} "))
}

/// Whether any of the first `k` retrieved documents contains any answer.
pub fn top_k_accuracy(run: &RunList, query: &Query, corpus: &Corpus, k: usize) -> Result<bool> {
    let answers = match &query.answers {
        Some(a) if !a.is_empty() => a,
        _ => {
            return Err(Error::invalid(format!(
                "query {} has no answers",
                query.query_id
            )))
        }
    };
    let docs = corpus.resolve(run.doc_ids().take(k))?;
    Ok(docs
        .iter()
        .any(|d| answers.iter().any(|a| contains_answer(&d.text, a))))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cutoffs {
    pub ndcg: Vec<usize>,
    pub accuracy: Vec<usize>,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Cutoffs {
            ndcg: vec![1, 5, 10],
            accuracy: vec![1, 10, 20, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    /// Aligned with `EvalReport::cutoffs.ndcg`.
    pub ndcg: Vec<f64>,
    /// Aligned with `EvalReport::cutoffs.accuracy`; present when the query has answers.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: Cutoffs,
    pub query_count: usize,
    pub mean_ndcg: Vec<f64>,
    /// Means over queries that carry answers; absent when none do.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<Vec<f64>>,
    pub per_query: Vec<QueryEval>,
}

impl EvalReport {
    pub fn mean_ndcg_at(&self, k: usize) -> Option<f64> {
        let i = self.cutoffs.ndcg.iter().position(|&c| c == k)?;
        Some(self.mean_ndcg[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    fn headers(&self) -> Vec<String> {
        let mut h: Vec<String> = self.cutoffs.ndcg.iter().map(|k| format!("ndcg@{k}")).collect();
        if self.mean_accuracy.is_some() {
            h.extend(self.cutoffs.accuracy.iter().map(|k| format!("top@{k}")));
        }
        h
    }

    fn row_values(&self, q: &QueryEval) -> Vec<Option<f64>> {
        let mut v: Vec<Option<f64>> = q.ndcg.iter().copied().map(Some).collect();
        if self.mean_accuracy.is_some() {
            match &q.accuracy {
                Some(a) => v.extend(a.iter().copied().map(Some)),
                None => v.extend(self.cutoffs.accuracy.iter().map(|_| None)),
            }
        }
        v
    }

    /// Aligned-column text table with one row per query plus a mean row.
    pub fn to_table(&self) -> String {
        let headers = self.headers();
        let label_w = self
            .per_query
            .iter()
            .map(|q| q.query_id.len())
            .chain(["query".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let col_w = headers.iter().map(String::len).max().unwrap_or(6).max(7);
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "query");
        for h in &headers {
            let _ = write!(out, "  {h:>col_w$}");
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for q in &self.per_query {
            let _ = write!(out, "{:<label_w$}", q.query_id);
            for v in self.row_values(q) {
                let _ = write!(out, "  {:>col_w$}", fmt(v));
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<label_w$}", "mean");
        let means = self
            .mean_ndcg
            .iter()
            .copied()
            .chain(self.mean_accuracy.iter().flatten().copied());
        for v in means {
            let _ = write!(out, "  {:>col_w$}", fmt(Some(v)));
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("query_id,{}\n", self.headers().join(","));
        for q in &self.per_query {
            let vals: Vec<String> = self
                .row_values(q)
                .into_iter()
                .map(|v| v.map_or(String::new(), |x| format!("{x:.6}")))
                .collect();
            let _ = writeln!(out, "{},{}", q.query_id, vals.join(","));
        }
        out
    }
}

fn mean_columns<'a, I>(rows: I, width: usize) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a Vec<f64>>,
{
    let mut sums = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        n += 1;
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    (n > 0).then(|| sums.into_iter().map(|s| s / n as f64).collect())
}

/// Evaluates every run. `queries`, when given, must cover every run's
/// query id; accuracy is computed for queries with answers when `corpus` is given.
pub fn evaluate(
    runs: &[RunList],
    qrels: &Qrels,
    queries: Option<&[Query]>,
    corpus: Option<&Corpus>,
    cutoffs: &Cutoffs,
    exec: Execution,
) -> Result<EvalReport> {
    if cutoffs.ndcg.iter().chain(&cutoffs.accuracy).any(|&k| k == 0) {
        return Err(Error::Config("metric cutoffs must be >= 1".into()));
    }
    let by_id: Option<HashMap<&str, &Query>> =
        queries.map(|qs| qs.iter().map(|q| (q.query_id.as_str(), q)).collect());
    if let Some(map) = &by_id {
        if let Some(r) = runs.iter().find(|r| !map.contains_key(r.query_id.as_str())) {
            return Err(Error::Data(format!("run for unknown query {}", r.query_id)));
        }
    }
    let per_query: Vec<Result<QueryEval>> = map_ordered(exec, runs, |run| {
        let ndcg = cutoffs.ndcg.iter().map(|&k| ndcg_at_k(run, qrels, k)).collect();
        let query = by_id.as_ref().and_then(|m| m.get(run.query_id.as_str()));
        let accuracy = match (query, corpus) {
            (Some(q), Some(c)) if q.answers.as_ref().is_some_and(|a| !a.is_empty()) => Some(
                cutoffs
                    .accuracy
                    .iter()
                    .map(|&k| top_k_accuracy(run, q, c, k).map(|hit| if hit { 1.0 } else { 0.0 }))
                    .collect::<Result<Vec<f64>>>()?,
            ),
            _ => None,
        };
        Ok(QueryEval {
            query_id: run.query_id.clone(),
            ndcg,
            accuracy,
        })
    });
    let per_query = per_query.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_ndcg = mean_columns(per_query.iter().map(|q| &q.ndcg), cutoffs.ndcg.len())
        .unwrap_or_else(|| vec![0.0; cutoffs.ndcg.len()]);
    let mean_accuracy = mean_columns(
        per_query.iter().filter_map(|q| q.accuracy.as_ref()),
        cutoffs.accuracy.len(),
    );
    Ok(EvalReport {
        cutoffs: cutoffs.clone(),
        query_count: per_query.len(),
        mean_ndcg,
        mean_accuracy,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn run_of(qid: &str, ids: &[&str]) -> RunList {
        let n = ids.len() as f64;
        RunList::from_scored(qid, ids.iter().enumerate().map(|(i, d)| (d.to_string(), n - i as f64))).unwrap()
    }

    fn qrels_of(qid: &str, grades: &[(&str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (d, g) in grades {
            q.insert(qid, d, *g);
        }
        q
    }

    #[test]
    fn ideal_ranking_is_one() {
        let qrels = qrels_of("q", &[("a", 3), ("b", 1), ("c", 0)]);
        assert_eq!(ndcg_at_k(&run_of("q", &["a", "b", "c"]), &qrels, 10), 1.0);
    }

    #[test]
    fn worked_value_201() {
        let qrels = qrels_of("q", &[("a", 2), ("b", 0), ("c", 1)]);
        let v = ndcg_at_k(&run_of("q", &["a", "b", "c"]), &qrels, 3);
        let idcg = 3.0 + 1.0 / 3f64.log2();
        assert!((v - 3.5 / idcg).abs() < 1e-12);
        assert!((v - 0.96394).abs() < 1e-5);
    }

    #[test]
    fn all_zero_grades_give_zero() {
        let qrels = qrels_of("q", &[("a", 0), ("b", 0)]);
        assert_eq!(ndcg_at_k(&run_of("q", &["a", "b"]), &qrels, 10), 0.0);
        assert_eq!(ndcg_at_k(&run_of("zz", &["a"]), &qrels, 10), 0.0);
    }

    #[test]
    fn linear_gain_variant() {
        let qrels = qrels_of("q", &[("a", 1), ("b", 2)]);
        let v = ndcg_at_k_with(&run_of("q", &["a", "b"]), &qrels, 2, Gain::Linear);
        let expected = (1.0 + 2.0 / 3f64.log2()) / (2.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
    }

    fn qa_corpus() -> Corpus {
        Corpus::from_documents(
            (1..=6)
                .map(|i| {
                    let text = if i == 5 { "The capital is Paris, France.".to_string() } else { format!("filler text {i}") };
                    Document::new(format!("d{i}"), text)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn accuracy_cutoffs() {
        let c = qa_corpus();
        let run = run_of("q", &["d1", "d2", "d3", "d4", "d5", "d6"]);
        let q = Query::new("q", "capital of france").with_answers(vec!["paris".into()]);
        assert!(!top_k_accuracy(&run, &q, &c, 1).unwrap());
        assert!(top_k_accuracy(&run, &q, &c, 10).unwrap());
        let first = run_of("q", &["d5", "d1"]);
        assert!(top_k_accuracy(&first, &q, &c, 1).unwrap());
        assert!(top_k_accuracy(&run, &Query::new("q", "x"), &c, 1).is_err());
    }

    #[test]
    fn normalization_handles_case_and_punctuation() {
        assert_eq!(normalize_answer("  U.S.  Open!! "), "us open");
        assert!(contains_answer("Winner of the U.S. Open, 1999", "us open"));
        assert!(contains_answer("PARIS!", "Paris"));
        assert!(!contains_answer("comparison", "paris"));
        assert!(!contains_answer("anything", "..."));
    }

    #[test]
    fn evaluate_means_and_unknown_query() {
        let qrels = {
            let mut q = qrels_of("q1", &[("a", 1)]);
            q.insert("q2", "b", 1);
            q
        };
        let runs = vec![run_of("q1", &["a"]), run_of("q2", &["a"])];
        let qs = vec![Query::new("q1", "x"), Query::new("q2", "y")];
        let rep = evaluate(&runs, &qrels, Some(&qs), None, &Cutoffs::default(), Execution::Sequential).unwrap();
        assert_eq!(rep.mean_ndcg_at(10), Some(0.5));
        assert_eq!(rep.query_count, 2);
        assert!(rep.mean_accuracy.is_none());
        assert!(rep.to_table().contains("mean"));
        assert!(rep.to_csv().starts_with("query_id,ndcg@1,ndcg@5,ndcg@10\n"));

        let err = evaluate(&runs, &qrels, Some(&qs[..1]), None, &Cutoffs::default(), Execution::Sequential);
        assert!(err.unwrap_err().to_string().contains("unknown query q2"));
    }

    #[test]
    fn evaluate_with_answers() {
        let c = qa_corpus();
        let run = run_of("q", &["d1", "d2", "d3", "d4", "d5", "d6"]);
        let qs = vec![Query::new("q", "capital").with_answers(vec!["Paris".into()])];
        let rep = evaluate(&[run], &Qrels::new(), Some(&qs), Some(&c), &Cutoffs::default(), Execution::Parallel).unwrap();
        assert_eq!(rep.mean_accuracy, Some(vec![0.0, 1.0, 1.0, 1.0]));
        assert!(rep.to_table().contains("top@50"));
    }
}
