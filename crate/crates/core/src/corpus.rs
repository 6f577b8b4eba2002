//! Corpus ingestion and in-memory BM25 retrieval.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trec::RunList;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            doc_id: doc_id.into(),
            text: text.into(),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        validate_id("doc_id", &self.doc_id)?;
        if self.text.is_empty() {
            return Err(format!("document {} has empty text", self.doc_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            query_id: query_id.into(),
            text: text.into(),
            answers: None,
        }
    }

    pub fn with_answers(mut self, answers: Vec<String>) -> Self {
        self.answers = Some(answers);
        self
    }
}

fn validate_id(field: &str, id: &str) -> std::result::Result<(), String> {
    if id.is_empty() {
        return Err(format!("{field} is empty"));
    }
    if id.chars().any(char::is_whitespace) {
        return Err(format!("{field} {id:?} contains whitespace"));
    }
    Ok(())
}

/// Lowercases, splits on every non-alphanumeric character and drops empty tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl CorpusFormat {
    /// Guesses the format from a file extension; anything other than `.tsv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => CorpusFormat::Tsv,
            _ => CorpusFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Inverted index with the collection statistics BM25 needs. Immutable after build.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    params: Bm25Params,
}

impl CorpusIndex {
    fn build(documents: &[Document], params: Bm25Params) -> Self {
        let mut postings: HashMap<String, Vec<Posting>> = HashMap::new();
        let mut doc_lengths = Vec::with_capacity(documents.len());
        for (ord, doc) in documents.iter().enumerate() {
            let tokens = tokenize(&doc.text);
            doc_lengths.push(tokens.len() as u32);
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc: ord as u32,
                    tf: count,
                });
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable_by_key(|p| p.doc);
        }
        let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_length = total as f64 / doc_lengths.len() as f64;
        CorpusIndex {
            postings,
            doc_lengths,
            avg_doc_length,
            params,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_lengths(&self) -> &[u32] {
        &self.doc_lengths
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    /// Lucene-style IDF: ln(1 + (N - df + 0.5) / (df + 0.5)).
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// BM25 contribution of one term occurring `tf` times in a document of `doc_len` tokens.
    pub fn term_weight(&self, term: &str, tf: u32, doc_len: u32) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let norm = 1.0 - b + b * f64::from(doc_len) / self.avg_doc_length;
        self.idf(term) * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Scores an arbitrary token sequence against `query_terms` using this
    /// index's collection statistics. The tokens need not belong to an indexed document.
    pub fn score_tokens(&self, query_terms: &[String], doc_tokens: &[String]) -> f64 {
        let mut tf: HashMap<&str, u32> = HashMap::new();
        for t in doc_tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        let doc_len = doc_tokens.len() as u32;
        unique_terms(query_terms)
            .into_iter()
            .map(|t| self.term_weight(t, tf.get(t).copied().unwrap_or(0), doc_len))
            .sum()
    }
}

/// Query terms in first-occurrence order with repeats removed.
pub(crate) fn unique_terms(terms: &[String]) -> Vec<&str> {
    let mut seen = HashSet::new();
    terms
        .iter()
        .map(String::as_str)
        .filter(|t| seen.insert(*t))
        .collect()
}

/// Documents plus their index, addressable by id or ordinal.
#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
    index: CorpusIndex,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        Self::with_params(documents, Bm25Params::default())
    }

    pub fn with_params(documents: Vec<Document>, params: Bm25Params) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(Error::Config(format!(
                "BM25 parameters out of range: k1={} b={}",
                params.k1, params.b
            )));
        }
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            doc.validate().map_err(Error::Data)?;
            if by_id.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate doc_id {}", doc.doc_id)));
            }
        }
        let index = CorpusIndex::build(&documents, params);
        Ok(Corpus {
            documents,
            by_id,
            index,
        })
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    /// Resolves every id or reports all the missing ones at once.
    pub fn resolve<'a, I>(&self, ids: I) -> Result<Vec<&Document>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut found = Vec::new();
        let mut missing = Vec::new();
        for id in ids {
            match self.get(id) {
                Some(d) => found.push(d),
                None => missing.push(id.to_string()),
            }
        }
        if missing.is_empty() {
            Ok(found)
        } else {
            Err(Error::Data(format!(
                "doc ids not found in corpus: {}",
                missing.join(", ")
            )))
        }
    }

    /// BM25 top-k. Documents sharing no term with the query are never returned;
    /// ties are broken by doc_id ascending.
    pub fn bm25_search(&self, query: &Query, top_k: usize) -> Result<RunList> {
        if top_k == 0 {
            return Err(Error::invalid("top_k must be at least 1"));
        }
        let terms = tokenize(&query.text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in unique_terms(&terms) {
            for p in self.index.postings(term) {
                let len = self.index.doc_lengths[p.doc as usize];
                *acc.entry(p.doc).or_default() += self.index.term_weight(term, p.tf, len);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| {
                self.documents[a.0 as usize]
                    .doc_id
                    .cmp(&self.documents[b.0 as usize].doc_id)
            })
        });
        scored.truncate(top_k);
        RunList::from_scored(
            query.query_id.clone(),
            scored
                .into_iter()
                .map(|(d, s)| (self.documents[d as usize].doc_id.clone(), s)),
        )
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct DocRecord {
    doc_id: String,
    text: String,
}

/// Reads a JSONL (`{"doc_id":..,"text":..}`) or two-column TSV corpus and indexes it.
pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    ingest_corpus_with(path, format, Bm25Params::default())
}

pub fn ingest_corpus_with(path: &Path, format: CorpusFormat, params: Bm25Params) -> Result<Corpus> {
    let content = read_to_string(path)?;
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let doc = match format {
            CorpusFormat::Jsonl => {
                let rec: DocRecord = serde_json::from_str(line)
                    .map_err(|e| Error::parse(path, lineno, format!("malformed record: {e}")))?;
                Document::new(rec.doc_id, rec.text)
            }
            CorpusFormat::Tsv => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 2 {
                    return Err(Error::parse(
                        path,
                        lineno,
                        format!("expected 2 fields, found {}", fields.len()),
                    ));
                }
                Document::new(fields[0], fields[1])
            }
        };
        doc.validate().map_err(|m| Error::parse(path, lineno, m))?;
        if !seen.insert(doc.doc_id.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate doc_id {}", doc.doc_id),
            ));
        }
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::Data(format!("empty corpus: {}", path.display())));
    }
    Corpus::with_params(docs, params)
}

#[derive(Deserialize)]
struct QueryRecord {
    query_id: String,
    text: String,
    #[serde(default)]
    answers: Option<Vec<String>>,
}

/// Reads queries from JSONL (`{"query_id","text","answers"?}`) or TSV
/// (`query_id<TAB>text[<TAB>answer]...`), chosen by extension.
pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let content = read_to_string(path)?;
    let tsv = CorpusFormat::from_path(path) == CorpusFormat::Tsv;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q = if tsv {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default();
            let text = fields
                .next()
                .ok_or_else(|| Error::parse(path, lineno, "expected at least 2 fields"))?;
            let answers: Vec<String> = fields.map(str::to_string).collect();
            let q = Query::new(id, text);
            if answers.is_empty() {
                q
            } else {
                q.with_answers(answers)
            }
        } else {
            let rec: QueryRecord = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, lineno, format!("malformed query: {e}")))?;
            Query {
                query_id: rec.query_id,
                text: rec.text,
                answers: rec.answers,
            }
        };
        validate_id("query_id", &q.query_id).map_err(|m| Error::parse(path, lineno, m))?;
        if !ids.insert(q.query_id.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate query_id {}", q.query_id),
            ));
        }
        out.push(q);
    }
    Ok(out)
}
