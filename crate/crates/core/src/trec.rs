//! TREC run and qrels files.
//!
//! Run lines are `query_id Q0 doc_id rank score tag` with single spaces and the
//! score printed to six decimals. Qrels lines are `query_id 0 doc_id grade`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Ranked results for one query. Ranks run 1..=len, scores never increase
/// with rank, and doc ids are distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunList {
    pub query_id: String,
    pub entries: Vec<RunEntry>,
}

impl RunList {
    pub fn empty(query_id: impl Into<String>) -> Self {
        RunList {
            query_id: query_id.into(),
            entries: Vec::new(),
        }
    }

    /// Builds a run from `(doc_id, score)` pairs already in rank order.
    pub fn from_scored<I>(query_id: impl Into<String>, scored: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, f64)>,
    {
        let run = RunList {
            query_id: query_id.into(),
            entries: scored
                .into_iter()
                .enumerate()
                .map(|(i, (doc_id, score))| RunEntry {
                    doc_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
        };
        run.validate()?;
        Ok(run)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Data(format!(
                    "query {}: expected rank {} but found {}",
                    self.query_id,
                    i + 1,
                    e.rank
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::Data(format!(
                    "query {}: non-finite score for {}",
                    self.query_id, e.doc_id
                )));
            }
            if i > 0 && e.score > self.entries[i - 1].score {
                return Err(Error::Data(format!(
                    "query {}: score increases at rank {}",
                    self.query_id, e.rank
                )));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(Error::Data(format!(
                    "query {}: duplicate doc_id {}",
                    self.query_id, e.doc_id
                )));
            }
        }
        Ok(())
    }
}

pub fn format_run(runs: &[RunList], tag: &str) -> String {
    let mut out = String::new();
    for run in runs {
        for e in &run.entries {
            let _ = writeln!(
                out,
                "{} Q0 {} {} {:.6} {}",
                run.query_id, e.doc_id, e.rank, e.score, tag
            );
        }
    }
    out
}

pub fn write_run(runs: &[RunList], tag: &str, path: &Path) -> Result<()> {
    if tag.is_empty() || tag.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("run tag {tag:?} must be a single nonempty token")));
    }
    for run in runs {
        run.validate()?;
    }
    fs::write(path, format_run(runs, tag)).map_err(|e| Error::io(path, e))
}

/// Reads a run file. Queries come back in order of first appearance and
/// entries sorted by rank; gaps or repeats in a query's ranks are errors.
pub fn read_run(path: &Path) -> Result<Vec<RunList>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(usize, RunEntry)>> = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score {:?}", fields[4])))?;
        let qid = fields[0].to_string();
        let group = groups.entry(qid.clone()).or_insert_with(|| {
            order.push(qid);
            Vec::new()
        });
        group.push((
            lineno,
            RunEntry {
                doc_id: fields[2].to_string(),
                score,
                rank,
            },
        ));
    }
    let mut runs = Vec::with_capacity(order.len());
    for qid in order {
        let mut entries = groups.remove(&qid).unwrap_or_default();
        entries.sort_by_key(|(_, e)| e.rank);
        for (i, (lineno, e)) in entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::parse(
                    path,
                    *lineno,
                    format!("query {qid}: rank {} breaks the sequence 1..n (expected {})", e.rank, i + 1),
                ));
            }
        }
        let run = RunList {
            query_id: qid,
            entries: entries.into_iter().map(|(_, e)| e).collect(),
        };
        run.validate()?;
        runs.push(run);
    }
    Ok(runs)
}

/// Graded judgments keyed by query then document. Deterministically ordered.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
    /// Number of `(query, doc)` pairs that were overwritten by a later line on read.
    #[serde(skip)]
    pub duplicates: usize,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a grade, returning the previous one if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> Option<u32> {
        self.judgments
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade)
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments.iter().flat_map(|(q, docs)| {
            docs.iter().map(move |(d, g)| (q.as_str(), d.as_str(), *g))
        })
    }
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: i64 = fields[3].parse().map_err(|_| {
            Error::parse(path, lineno, format!("grade {:?} is not an integer", fields[3]))
        })?;
        if grade < 0 || grade > i64::from(u32::MAX) {
            return Err(Error::parse(path, lineno, format!("grade {grade} out of range")));
        }
        if qrels.insert(fields[0], fields[2], grade as u32).is_some() {
            qrels.duplicates += 1;
        }
    }
    if qrels.duplicates > 0 {
        log::warn!(
            "{}: {} duplicate judgments overwritten",
            path.display(),
            qrels.duplicates
        );
    }
    Ok(qrels)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, d, g) in qrels.iter() {
        let _ = writeln!(out, "{q} 0 {d} {g}");
    }
    out
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    fs::write(path, format_qrels(qrels)).map_err(|e| Error::io(path, e))
}
