//! Stage-two listwise reranking with a chat model.
//!
//! Windows of candidate passages are rendered into a ranking prompt, the
//! model's answer is parsed from its `### Final Reranking:` line, and the
//! resulting permutation reorders that window in place. Windows slide from the
//! back of the list to the front so strong documents bubble upward.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Query};
use crate::error::{Error, Result};
use crate::http::{HttpConfig, JsonClient};
use crate::trec::RunList;

pub const SYSTEM_PROMPT: &str = "You are RankLLM, an intelligent assistant that can rank passages based on their relevancy to the query.";
pub const SCAFFOLD: &str = "### Final Reranking:";
const MARKER: &str = "final reranking";

/// A rearrangement of the 1-based identifiers `1..=k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let k = order.len();
        let mut seen = vec![false; k];
        for &id in &order {
            if id == 0 || id > k {
                return Err(Error::invalid(format!("id {id} outside 1..={k}")));
            }
            if std::mem::replace(&mut seen[id - 1], true) {
                return Err(Error::invalid(format!("duplicate id {id}")));
            }
        }
        Ok(Permutation(order))
    }

    pub fn identity(k: usize) -> Self {
        Permutation((1..=k).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &id)| id == i + 1)
    }

    /// Reorders `items` so that position i holds `items[self[i] - 1]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        assert_eq!(items.len(), self.0.len(), "permutation length mismatch");
        self.0.iter().map(|&id| items[id - 1].clone()).collect()
    }

    /// Renders as `[a] > [b] > ...`.
    pub fn to_chain(&self) -> String {
        self.0
            .iter()
            .map(|id| format!("[{id}]"))
            .collect::<Vec<_>>()
            .join(" > ")
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    RankOnly,
    /// Three-step reasoning instructions before the final ranking.
    #[default]
    Cot,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cot" => Ok(PromptMode::Cot),
            "rank_only" => Ok(PromptMode::RankOnly),
            other => Err(Error::Config(format!("unknown prompt mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    pub mode: PromptMode,
    pub max_passages: usize,
    /// Whitespace tokens kept per passage before truncation.
    pub token_budget: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions {
            mode: PromptMode::Cot,
            max_passages: 100,
            token_budget: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListwisePrompt {
    pub system: String,
    pub user: String,
    pub num_passages: usize,
}

/// Collapses whitespace to single spaces and cuts to `budget` tokens, marking
/// a cut with a trailing `...`.
pub fn prepare_passage(text: &str, budget: usize) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() > budget {
        format!("{}...", tokens[..budget].join(" "))
    } else {
        tokens.join(" ")
    }
}

pub fn build_prompt(query: &Query, passages: &[&str], opts: &PromptOptions) -> Result<ListwisePrompt> {
    let k = passages.len();
    if k == 0 {
        return Err(Error::invalid("cannot build a ranking prompt without passages"));
    }
    if k > opts.max_passages {
        return Err(Error::invalid(format!(
            "{k} passages exceed the configured maximum of {}",
            opts.max_passages
        )));
    }
    let q = query.text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut user = format!(
        "I will provide you with {k} passages, each indicated by a numerical identifier []. \
         Rank the passages based on their relevance to the search query: {q}.\n\n"
    );
    for (i, p) in passages.iter().enumerate() {
        let body = prepare_passage(p, opts.token_budget);
        if body.is_empty() {
            user.push_str(&format!("[{}]\n", i + 1));
        } else {
            user.push_str(&format!("[{}] {body}\n", i + 1));
        }
    }
    user.push_str(&format!("\nSearch Query: {q}\n\n"));
    match opts.mode {
        PromptMode::Cot => user.push_str(
            "Steps to follow:\n\
             1. List the information requirements to answer the query.\n\
             2. For each requirement, find the passages that include the relevant information.\n\
             3. Rank the passages in descending order of relevance using only the identifiers (e.g., [2] > [1]).\n",
        ),
        PromptMode::RankOnly => user.push_str(&format!(
            "Rank the {k} passages above in descending order of relevance using only the identifiers. \
             Include every passage exactly once and do not explain.\n"
        )),
    }
    user.push_str(&format!(
        "The format of the final output should be '{SCAFFOLD} [] > []', e.g., {SCAFFOLD} [2] > [1].\n"
    ));
    Ok(ListwisePrompt {
        system: SYSTEM_PROMPT.to_string(),
        user,
        num_passages: k,
    })
}

/// Recovers the passage bodies from a prompt built by [`build_prompt`].
pub fn extract_passages(prompt: &ListwisePrompt) -> Vec<String> {
    let mut out = Vec::with_capacity(prompt.num_passages);
    for line in prompt.user.lines() {
        if out.len() == prompt.num_passages {
            break;
        }
        let header = format!("[{}]", out.len() + 1);
        if line == header {
            out.push(String::new());
        } else if let Some(rest) = line.strip_prefix(&format!("{header} ")) {
            out.push(rest.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RepairReport {
    pub duplicates: usize,
    pub out_of_range: usize,
    pub missing: usize,
    /// No ranking could be read at all; the identity was returned.
    pub fallback: bool,
}

impl RepairReport {
    pub fn total(&self) -> usize {
        self.duplicates + self.out_of_range + self.missing
    }

    pub fn is_clean(&self) -> bool {
        self.total() == 0 && !self.fallback
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome {
    pub permutation: Permutation,
    pub repairs: RepairReport,
}

/// Byte offset of the last `final reranking` marker (ASCII case-insensitive).
fn last_marker(text: &str) -> Option<usize> {
    text.to_ascii_lowercase().rfind(MARKER)
}

/// Splits a response into the reasoning before the scaffold line and the text after the marker.
pub fn split_reasoning(text: &str) -> (&str, Option<&str>) {
    match last_marker(text) {
        Some(pos) => {
            let before = text[..pos].trim_end().trim_end_matches('#').trim_end_matches('*');
            (before.trim(), Some(&text[pos + MARKER.len()..]))
        }
        None => (text.trim(), None),
    }
}

enum Item {
    Id(usize),
    /// Digits too large for usize.
    Overflow,
}

/// Reads a `[a] > [b] > c ...` chain from the start of `s`, stopping at the
/// first token that does not continue it.
fn read_chain(s: &str) -> Vec<Item> {
    let b = s.as_bytes();
    let mut i = 0;
    let skip_ws = |i: &mut usize| {
        while *i < b.len() && b[*i].is_ascii_whitespace() {
            *i += 1;
        }
    };
    let read_digits = |i: &mut usize| -> Option<Item> {
        let start = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        if *i == start {
            return None;
        }
        Some(match s[start..*i].parse::<usize>() {
            Ok(n) => Item::Id(n),
            Err(_) => Item::Overflow,
        })
    };
    let mut items = Vec::new();
    loop {
        skip_ws(&mut i);
        let item = if i < b.len() && b[i] == b'[' {
            i += 1;
            skip_ws(&mut i);
            let item = read_digits(&mut i);
            skip_ws(&mut i);
            if item.is_some() && i < b.len() && b[i] == b']' {
                i += 1;
                item
            } else {
                None
            }
        } else {
            read_digits(&mut i)
        };
        match item {
            Some(it) => items.push(it),
            None => break,
        }
        skip_ws(&mut i);
        if i < b.len() && b[i] == b'>' {
            i += 1;
        } else {
            break;
        }
    }
    items
}

/// Parses a ranking over `k` passages from free-form model output.
///
/// Only the text after the last `Final Reranking` marker is considered.
/// Out-of-range ids are dropped, repeated ids keep their first position, and
/// ids never mentioned are appended in ascending order. Never fails: without a
/// readable chain the identity is returned with the fallback flag set.
pub fn parse_permutation(text: &str, k: usize) -> ParseOutcome {
    let items = match split_reasoning(text).1 {
        Some(rest) => {
            let rest = rest.trim_start_matches(|c: char| c == ':' || c == '*' || c == '#' || c.is_whitespace());
            read_chain(rest)
        }
        None => Vec::new(),
    };
    if items.is_empty() {
        return ParseOutcome {
            permutation: Permutation::identity(k),
            repairs: RepairReport {
                missing: k,
                fallback: true,
                ..Default::default()
            },
        };
    }
    let mut repairs = RepairReport::default();
    let mut seen = vec![false; k];
    let mut order = Vec::with_capacity(k);
    for item in items {
        match item {
            Item::Id(id) if (1..=k).contains(&id) => {
                if seen[id - 1] {
                    repairs.duplicates += 1;
                } else {
                    seen[id - 1] = true;
                    order.push(id);
                }
            }
            _ => repairs.out_of_range += 1,
        }
    }
    for (i, was_seen) in seen.iter().enumerate() {
        if !was_seen {
            order.push(i + 1);
            repairs.missing += 1;
        }
    }
    ParseOutcome {
        permutation: Permutation(order),
        repairs,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

pub trait ChatBackend: Send + Sync {
    fn model_name(&self) -> String;

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String>;
}

#[derive(Debug, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
pub struct ChatChoice {
    pub message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
pub struct ChatChoiceMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatBackendConfig {
    #[serde(flatten)]
    pub http: HttpConfig,
    pub model: String,
}

impl Default for ChatBackendConfig {
    fn default() -> Self {
        ChatBackendConfig {
            http: HttpConfig::default(),
            model: "gpt-4o".into(),
        }
    }
}

/// OpenAI-compatible `chat/completions` client, temperature 0.
pub struct OpenAiChatBackend {
    client: JsonClient,
    model: String,
}

impl OpenAiChatBackend {
    pub fn new(cfg: ChatBackendConfig) -> Result<Self> {
        if cfg.model.is_empty() {
            return Err(Error::Config("chat model name is empty".into()));
        }
        Ok(OpenAiChatBackend {
            client: JsonClient::new(cfg.http)?,
            model: cfg.model,
        })
    }

    pub fn request_for(&self, prompt: &ListwisePrompt) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user.clone(),
                },
            ],
            temperature: 0.0,
        }
    }
}

impl ChatBackend for OpenAiChatBackend {
    fn model_name(&self) -> String {
        self.model.clone()
    }

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String> {
        let resp: ChatResponse = self.client.post(&self.request_for(prompt))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Backend {
                status: None,
                message: "response has no choices[0].message.content".into(),
                retryable: false,
            })
    }
}

/// Mock that always answers with the input order.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityBackend;

impl ChatBackend for IdentityBackend {
    fn model_name(&self) -> String {
        "mock-identity".into()
    }

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String> {
        Ok(format!(
            "The passages are already in a sensible order.\n{SCAFFOLD} {}",
            Permutation::identity(prompt.num_passages).to_chain()
        ))
    }
}

/// Mock that sorts the window by known passage relevance (stable for ties).
/// Passages are matched by their prepared text, so construct it with the same
/// token budget the prompts use.
#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    grades: HashMap<String, f64>,
    token_budget: usize,
}

impl OracleBackend {
    pub fn new<I, S>(passages: I, token_budget: usize) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        OracleBackend {
            grades: passages
                .into_iter()
                .map(|(t, g)| (prepare_passage(t.as_ref(), token_budget), g))
                .collect(),
            token_budget,
        }
    }

    pub fn grade_of(&self, passage: &str) -> f64 {
        self.grades
            .get(&prepare_passage(passage, self.token_budget))
            .copied()
            .unwrap_or(0.0)
    }
}

impl ChatBackend for OracleBackend {
    fn model_name(&self) -> String {
        "mock-oracle".into()
    }

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String> {
        let passages = extract_passages(prompt);
        let grades: Vec<f64> = passages
            .iter()
            .map(|p| self.grades.get(p).copied().unwrap_or(0.0))
            .collect();
        let mut ids: Vec<usize> = (1..=passages.len()).collect();
        ids.sort_by(|&a, &b| grades[b - 1].total_cmp(&grades[a - 1]).then(a.cmp(&b)));
        let best = ids.first().copied().unwrap_or(1);
        Ok(format!(
            "Requirement: passages that answer the query directly.\n\
             Passage [{best}] covers it best; the rest follow by decreasing coverage.\n\
             {SCAFFOLD} {}",
            Permutation(ids).to_chain()
        ))
    }
}

/// Backend built from a closure, handy for scripted tests.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ListwisePrompt) -> Result<String> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnBackend { name: name.into(), f }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ListwisePrompt) -> Result<String> + Send + Sync,
{
    fn model_name(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String> {
        (self.f)(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window: usize,
    pub stride: usize,
    pub passes: usize,
    pub prompt: PromptOptions,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window: 20,
            stride: 10,
            passes: 1,
            prompt: PromptOptions::default(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window {} must be >= 2", self.window)));
        }
        if self.stride == 0 || self.stride >= self.window {
            return Err(Error::Config(format!(
                "stride {} must satisfy 1 <= stride < window ({})",
                self.stride, self.window
            )));
        }
        if self.passes == 0 {
            return Err(Error::Config("passes must be >= 1".into()));
        }
        if self.window > self.prompt.max_passages {
            return Err(Error::Config(format!(
                "window {} exceeds prompt max_passages {}",
                self.window, self.prompt.max_passages
            )));
        }
        Ok(())
    }

    /// Half-open `[start, end)` ranges visited in one pass over `n` items, back to front.
    pub fn windows(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if n == 0 {
            return out;
        }
        let mut end = n;
        loop {
            let start = end.saturating_sub(self.window);
            out.push((start, end));
            if start == 0 {
                break;
            }
            end -= self.stride;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowLog {
    pub pass: usize,
    pub start: usize,
    pub end: usize,
    /// Raw model output including any reasoning.
    pub response: Option<String>,
    pub error: Option<String>,
    pub repairs: Option<RepairReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowOutcome {
    /// Indices into the input slice, best first.
    pub order: Vec<usize>,
    pub windows: Vec<WindowLog>,
}

impl WindowOutcome {
    pub fn failures(&self) -> usize {
        self.windows.iter().filter(|w| w.error.is_some()).count()
    }
}

/// Reorders `docs` with sliding windows. A window whose backend call fails is
/// left as it was; the outcome is always a permutation of the input.
pub fn rerank_window(
    backend: &dyn ChatBackend,
    query: &Query,
    docs: &[&Document],
    cfg: &WindowConfig,
) -> Result<WindowOutcome> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::invalid("rerank_window needs at least one document"));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut logs = Vec::new();
    for pass in 0..cfg.passes {
        for (start, end) in cfg.windows(docs.len()) {
            if end - start < 2 {
                continue;
            }
            let slice = &order[start..end];
            let passages: Vec<&str> = slice.iter().map(|&i| docs[i].text.as_str()).collect();
            let mut log = WindowLog {
                pass,
                start,
                end,
                response: None,
                error: None,
                repairs: None,
            };
            let result = build_prompt(query, &passages, &cfg.prompt).and_then(|p| backend.generate(&p));
            match result {
                Ok(text) => {
                    let parsed = parse_permutation(&text, end - start);
                    log::debug!(
                        "query {} window [{start},{end}): {}",
                        query.query_id,
                        text.replace('\n', " | ")
                    );
                    let reordered = parsed.permutation.apply(slice);
                    order[start..end].copy_from_slice(&reordered);
                    log.repairs = Some(parsed.repairs);
                    log.response = Some(text);
                }
                Err(e) => {
                    log::warn!(
                        "query {} window [{start},{end}) left unchanged: {e}",
                        query.query_id
                    );
                    log.error = Some(e.to_string());
                }
            }
            logs.push(log);
        }
    }
    Ok(WindowOutcome {
        order,
        windows: logs,
    })
}

/// Replaces the first `k` entries of `pointwise` with `listwise_order` and
/// keeps the tail. Scores become `m, m-1, ..., 1` for an `m`-entry run.
pub fn merge_stages(pointwise: &RunList, listwise_order: &[String], k: usize) -> Result<RunList> {
    let k = k.min(pointwise.len());
    let head: Vec<&str> = pointwise.doc_ids().take(k).collect();
    let mut a = head.clone();
    let mut b: Vec<&str> = listwise_order.iter().map(String::as_str).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::invalid(format!(
            "listwise order for query {} is not a permutation of the top {k} pointwise documents",
            pointwise.query_id
        )));
    }
    let m = pointwise.len();
    let ids = listwise_order
        .iter()
        .cloned()
        .chain(pointwise.entries[k..].iter().map(|e| e.doc_id.clone()));
    RunList::from_scored(
        pointwise.query_id.clone(),
        ids.enumerate().map(|(i, d)| (d, (m - i) as f64)),
    )
}
