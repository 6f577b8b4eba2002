//! Synthetic reasoning-and-ranking examples elicited from a teacher chat model.
//!
//! Responses whose ranking needed any repair are rejected rather than fixed,
//! so every emitted example carries the teacher's own permutation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Query};
use crate::error::{Error, Result};
use crate::listwise::{
    build_prompt, parse_permutation, split_reasoning, ChatBackend, Permutation, PromptMode,
    PromptOptions,
};
use crate::parallel::{map_ordered, Execution};
use crate::scorers::pair_seed;
use crate::trec::RunList;

pub const MAX_PASSAGES: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub query_id: String,
    pub query: String,
    pub passages: Vec<String>,
    pub reasoning: String,
    pub ranking: Permutation,
    pub teacher_model: String,
    pub created_at: String,
}

impl SyntheticExample {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.query_id.is_empty() {
            return Err("empty query_id".into());
        }
        if self.passages.is_empty() || self.passages.len() > MAX_PASSAGES {
            return Err(format!(
                "expected 1..={MAX_PASSAGES} passages, found {}",
                self.passages.len()
            ));
        }
        if self.ranking.len() != self.passages.len() {
            return Err(format!(
                "ranking has {} ids for {} passages",
                self.ranking.len(),
                self.passages.len()
            ));
        }
        if self.reasoning.trim().is_empty() {
            return Err("empty reasoning".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub per_query_candidates: usize,
    pub target_count: usize,
    pub seed: u64,
    pub max_rejection_rate: f64,
    /// Responses to observe before the rejection-rate gate may abort.
    pub min_responses: usize,
    /// Queries requested concurrently per round.
    pub batch: usize,
    pub prompt: PromptOptions,
    /// Fixed timestamp for every example; current UTC time when unset.
    pub created_at: Option<String>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            per_query_candidates: 20,
            target_count: 200,
            seed: 0,
            max_rejection_rate: 0.5,
            min_responses: 10,
            batch: 8,
            prompt: PromptOptions {
                mode: PromptMode::Cot,
                ..PromptOptions::default()
            },
            created_at: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub sampled: usize,
    pub accepted: usize,
    pub rejected_repaired: usize,
    pub rejected_empty_reasoning: usize,
    pub backend_failures: usize,
    pub no_candidates: usize,
}

impl RejectionReport {
    pub fn rejected(&self) -> usize {
        self.rejected_repaired + self.rejected_empty_reasoning
    }

    /// Responses that reached the quality gate.
    pub fn responses(&self) -> usize {
        self.accepted + self.rejected()
    }

    pub fn rejection_rate(&self) -> f64 {
        match self.responses() {
            0 => 0.0,
            n => self.rejected() as f64 / n as f64,
        }
    }
}

enum Attempt {
    Accepted(Box<SyntheticExample>),
    Repaired,
    EmptyReasoning,
    BackendFailure,
    NoCandidates,
}

/// Samples queries in seeded order and collects up to `target_count` clean
/// examples. Fails with [`Error::RejectionRateExceeded`] once the rejection
/// rate passes the threshold after `min_responses` responses.
pub fn generate_examples(
    queries: &[Query],
    corpus: &Corpus,
    runs: Option<&[RunList]>,
    backend: &dyn ChatBackend,
    opts: &GenerateOptions,
    exec: Execution,
) -> Result<(Vec<SyntheticExample>, RejectionReport)> {
    if opts.per_query_candidates == 0 || opts.per_query_candidates > MAX_PASSAGES {
        return Err(Error::Config(format!(
            "per_query_candidates must be in 1..={MAX_PASSAGES}"
        )));
    }
    let mut report = RejectionReport::default();
    if opts.target_count == 0 {
        return Ok((Vec::new(), report));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to sample"));
    }
    let runs: Option<HashMap<&str, &RunList>> =
        runs.map(|rs| rs.iter().map(|r| (r.query_id.as_str(), r)).collect());
    let created_at = opts
        .created_at
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));
    let teacher_model = backend.model_name();

    let mut sampled: Vec<&Query> = queries.iter().collect();
    sampled.shuffle(&mut ChaCha8Rng::seed_from_u64(pair_seed(opts.seed, "synthgen", "")));

    let attempt = |q: &&Query| -> Result<Attempt> {
        let run = match &runs {
            Some(map) => match map.get(q.query_id.as_str()) {
                Some(r) => (*r).clone(),
                None => return Ok(Attempt::NoCandidates),
            },
            None => corpus.bm25_search(q, opts.per_query_candidates)?,
        };
        let docs = corpus.resolve(run.doc_ids().take(opts.per_query_candidates))?;
        if docs.is_empty() {
            return Ok(Attempt::NoCandidates);
        }
        let passages: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let prompt = build_prompt(q, &passages, &opts.prompt)?;
        let text = match backend.generate(&prompt) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("query {}: teacher request failed: {e}", q.query_id);
                return Ok(Attempt::BackendFailure);
            }
        };
        let parsed = parse_permutation(&text, docs.len());
        if !parsed.repairs.is_clean() {
            return Ok(Attempt::Repaired);
        }
        let reasoning = split_reasoning(&text).0.to_string();
        if opts.prompt.mode == PromptMode::Cot && reasoning.is_empty() {
            return Ok(Attempt::EmptyReasoning);
        }
        Ok(Attempt::Accepted(Box::new(SyntheticExample {
            query_id: q.query_id.clone(),
            query: q.text.clone(),
            passages: docs.iter().map(|d| d.text.clone()).collect(),
            reasoning,
            ranking: parsed.permutation,
            teacher_model: teacher_model.clone(),
            created_at: created_at.clone(),
        })))
    };

    let mut out = Vec::new();
    for chunk in sampled.chunks(opts.batch.max(1)) {
        for result in map_ordered(exec, chunk, attempt) {
            report.sampled += 1;
            match result? {
                Attempt::Accepted(ex) => {
                    report.accepted += 1;
                    out.push(*ex);
                }
                Attempt::Repaired => report.rejected_repaired += 1,
                Attempt::EmptyReasoning => report.rejected_empty_reasoning += 1,
                Attempt::BackendFailure => report.backend_failures += 1,
                Attempt::NoCandidates => report.no_candidates += 1,
            }
            if report.responses() >= opts.min_responses
                && report.rejection_rate() > opts.max_rejection_rate
            {
                return Err(Error::RejectionRateExceeded {
                    report: Box::new(report),
                    threshold: opts.max_rejection_rate,
                });
            }
            if out.len() == opts.target_count {
                return Ok((out, report));
            }
        }
    }
    Ok((out, report))
}

pub fn format_examples(examples: &[SyntheticExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("example serializes"));
        out.push('\n');
    }
    out
}

pub fn write_examples(examples: &[SyntheticExample], path: &Path) -> Result<()> {
    for ex in examples {
        ex.validate().map_err(Error::invalid)?;
    }
    fs::write(path, format_examples(examples)).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExample {
    query_id: String,
    query: String,
    passages: Vec<String>,
    reasoning: String,
    ranking: Vec<usize>,
    teacher_model: String,
    created_at: String,
}

pub fn read_examples(path: &Path) -> Result<Vec<SyntheticExample>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, lineno, format!("malformed example: {e}")))?;
        let ranking = Permutation::new(raw.ranking).map_err(|e| match e {
            Error::InvalidInput(m) => Error::parse(path, lineno, m),
            other => other,
        })?;
        let ex = SyntheticExample {
            query_id: raw.query_id,
            query: raw.query,
            passages: raw.passages,
            reasoning: raw.reasoning,
            ranking,
            teacher_model: raw.teacher_model,
            created_at: raw.created_at,
        };
        ex.validate().map_err(|m| Error::parse(path, lineno, m))?;
        out.push(ex);
    }
    Ok(out)
}
