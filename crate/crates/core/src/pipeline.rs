//! Three-stage inference: BM25 retrieval, pointwise rerank, listwise rerank
//! of the head, with one run file per stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{ingest_corpus_with, read_queries, Bm25Params, Corpus, CorpusFormat, Query};
use crate::error::{Error, Result};
use crate::listwise::{
    merge_stages, rerank_window, ChatBackend, ChatBackendConfig, IdentityBackend, ListwisePrompt,
    OpenAiChatBackend, OracleBackend, WindowConfig,
};
use crate::metrics::{evaluate, Cutoffs, EvalReport};
use crate::parallel::{map_ordered, Execution};
use crate::scorers::{
    rerank_pointwise, Bm25Scorer, LinearModel, LinearScorer, PlantedTeacher, PointwiseScorer, RemoteScorer,
    RemoteScorerConfig,
};
use crate::trec::{read_qrels, write_run, Qrels, RunList};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub qrels: Option<PathBuf>,
    /// Inferred from the corpus extension when unset.
    #[serde(default)]
    pub format: Option<CorpusFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub k1: f64,
    pub b: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        RetrievalConfig {
            top_k: 100,
            k1: p.k1,
            b: p.b,
        }
    }
}

impl RetrievalConfig {
    pub fn params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PointwiseSpec {
    #[default]
    Bm25,
    /// Trained student loaded from a model JSON file.
    Linear { model: PathBuf },
    /// Qrels-driven teacher; requires qrels. Seeded by the pipeline seed.
    Planted {
        #[serde(default = "default_sigma")]
        noise_sigma: f64,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    Remote(RemoteScorerConfig),
}

fn default_sigma() -> f64 {
    0.5
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ListwiseBackendSpec {
    Identity,
    /// Sorts each window by qrels grade; requires qrels.
    Oracle,
    Openai(ChatBackendConfig),
}

/// Which run the listwise stage reorders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainFrom {
    #[default]
    Pointwise,
    Bm25,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ListwiseConfig {
    pub backend: ListwiseBackendSpec,
    /// Head of the previous stage handed to the listwise reranker.
    #[serde(default = "default_listwise_k")]
    pub k: usize,
    #[serde(default)]
    pub chain_from: ChainFrom,
    #[serde(default, flatten)]
    pub window: WindowConfig,
}

fn default_listwise_k() -> usize {
    30
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Prefix of the run files: `<name>.bm25`, `<name>.dearp`, `<name>.dearl`.
    #[serde(default = "default_run_name")]
    pub run_name: String,
    pub data: DataConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub pointwise: PointwiseSpec,
    /// Absent means the listwise stage is skipped.
    #[serde(default)]
    pub listwise: Option<ListwiseConfig>,
    #[serde(default)]
    pub eval: Cutoffs,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_run_name() -> String {
    "run".into()
}

impl PipelineConfig {
    /// Resolves relative data and model paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.corpus);
        fix(&mut self.data.queries);
        if let Some(q) = &mut self.data.qrels {
            fix(q);
        }
        if let PointwiseSpec::Linear { model } = &mut self.pointwise {
            fix(model);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.top_k == 0 {
            return Err(Error::Config("retrieval.top_k must be >= 1".into()));
        }
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_name {:?}", self.run_name)));
        }
        let mut paths = vec![&self.data.corpus, &self.data.queries];
        paths.extend(self.data.qrels.as_ref());
        if let PointwiseSpec::Linear { model } = &self.pointwise {
            paths.push(model);
        }
        if let Some(missing) = paths.into_iter().find(|p| !p.exists()) {
            return Err(Error::Config(format!("{} does not exist", missing.display())));
        }
        let needs_qrels = matches!(self.pointwise, PointwiseSpec::Planted { .. })
            || matches!(
                self.listwise,
                Some(ListwiseConfig {
                    backend: ListwiseBackendSpec::Oracle,
                    ..
                })
            );
        if needs_qrels && self.data.qrels.is_none() {
            return Err(Error::Config(
                "planted scorer and oracle backend need data.qrels".into(),
            ));
        }
        if let Some(l) = &self.listwise {
            l.window.validate()?;
            if l.k == 0 || l.k > self.retrieval.top_k {
                return Err(Error::Config(format!(
                    "listwise.k {} must be in 1..={} (retrieval.top_k)",
                    l.k, self.retrieval.top_k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bm25,
    Dearp,
    Dearl,
}

impl Stage {
    pub fn suffix(self) -> &'static str {
        match self {
            Stage::Bm25 => "bm25",
            Stage::Dearp => "dearp",
            Stage::Dearl => "dearl",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub run_files: BTreeMap<Stage, PathBuf>,
    pub runs: BTreeMap<Stage, Vec<RunList>>,
    /// Present when qrels were configured.
    pub reports: BTreeMap<Stage, EvalReport>,
    pub window_failures: usize,
}

impl PipelineOutput {
    pub fn reports_json(&self) -> String {
        serde_json::to_string_pretty(&self.reports).expect("reports serialize")
    }
}

struct PipelineData {
    corpus: Corpus,
    queries: Vec<Query>,
    qrels: Option<Qrels>,
}

fn load(cfg: &PipelineConfig) -> Result<PipelineData> {
    let format = cfg
        .data
        .format
        .unwrap_or_else(|| CorpusFormat::from_path(&cfg.data.corpus));
    let corpus = ingest_corpus_with(&cfg.data.corpus, format, cfg.retrieval.params())?;
    let queries = read_queries(&cfg.data.queries)?;
    if queries.is_empty() {
        return Err(Error::Data(format!("{} holds no queries", cfg.data.queries.display())));
    }
    let qrels = cfg.data.qrels.as_deref().map(read_qrels).transpose()?;
    Ok(PipelineData {
        corpus,
        queries,
        qrels,
    })
}

/// Instantiates the configured pointwise scorer. `qrels` is required for the
/// planted teacher.
pub fn build_scorer<'a>(
    spec: &PointwiseSpec,
    corpus: &'a Corpus,
    qrels: Option<&Qrels>,
    seed: u64,
) -> Result<Box<dyn PointwiseScorer + 'a>> {
    Ok(match spec {
        PointwiseSpec::Bm25 => Box::new(Bm25Scorer::new(corpus.index())),
        PointwiseSpec::Linear { model } => Box::new(LinearScorer::new(LinearModel::load(model)?, corpus.index())?),
        PointwiseSpec::Planted { noise_sigma, scale } => {
            let qrels = qrels.ok_or_else(|| Error::Config("planted scorer needs qrels".into()))?;
            Box::new(PlantedTeacher::new(qrels.clone(), *noise_sigma, *scale, seed)?)
        }
        PointwiseSpec::Remote(r) => Box::new(RemoteScorer::new(r.clone())?),
    })
}

/// Listwise backend bound to a corpus. The oracle variant builds a
/// per-query backend from that query's judgments.
pub enum ListwiseRunner<'a> {
    Shared(Box<dyn ChatBackend>),
    Oracle {
        corpus: &'a Corpus,
        qrels: &'a Qrels,
        token_budget: usize,
    },
}

impl<'a> ListwiseRunner<'a> {
    pub fn new(
        spec: &ListwiseBackendSpec,
        corpus: &'a Corpus,
        qrels: Option<&'a Qrels>,
        token_budget: usize,
    ) -> Result<Self> {
        Ok(match spec {
            ListwiseBackendSpec::Identity => ListwiseRunner::Shared(Box::new(IdentityBackend)),
            ListwiseBackendSpec::Openai(c) => ListwiseRunner::Shared(Box::new(OpenAiChatBackend::new(c.clone())?)),
            ListwiseBackendSpec::Oracle => ListwiseRunner::Oracle {
                corpus,
                qrels: qrels.ok_or_else(|| Error::Config("oracle backend needs qrels".into()))?,
                token_budget,
            },
        })
    }

    pub fn backend_for(&self, query: &Query) -> Box<dyn ChatBackend + '_> {
        match self {
            ListwiseRunner::Shared(b) => Box::new(SharedRef(b.as_ref())),
            ListwiseRunner::Oracle {
                corpus,
                qrels,
                token_budget,
            } => {
                let judged = qrels
                    .for_query(&query.query_id)
                    .into_iter()
                    .flatten()
                    .filter_map(|(doc, g)| corpus.get(doc).map(|d| (d.text.as_str(), f64::from(*g))));
                Box::new(OracleBackend::new(judged, *token_budget))
            }
        }
    }
}

struct SharedRef<'a>(&'a dyn ChatBackend);

impl ChatBackend for SharedRef<'_> {
    fn model_name(&self) -> String {
        self.0.model_name()
    }

    fn generate(&self, prompt: &ListwisePrompt) -> Result<String> {
        self.0.generate(prompt)
    }
}

/// Runs the listwise stage over `prev` for one query.
pub fn rerank_listwise(
    runner: &ListwiseRunner<'_>,
    corpus: &Corpus,
    query: &Query,
    prev: &RunList,
    cfg: &ListwiseConfig,
) -> Result<(RunList, usize)> {
    let head: Vec<String> = prev.doc_ids().take(cfg.k).map(str::to_string).collect();
    if head.is_empty() {
        return Ok((prev.clone(), 0));
    }
    let docs = corpus.resolve(head.iter().map(String::as_str))?;
    let backend = runner.backend_for(query);
    let outcome = rerank_window(backend.as_ref(), query, &docs, &cfg.window)?;
    let order: Vec<String> = outcome.order.iter().map(|&i| head[i].clone()).collect();
    Ok((merge_stages(prev, &order, cfg.k)?, outcome.failures()))
}

#[derive(Default)]
struct QueryRuns {
    bm25: Option<RunList>,
    dearp: Option<RunList>,
    dearl: Option<RunList>,
    window_failures: usize,
    error: Option<Error>,
}

fn run_query(
    cfg: &PipelineConfig,
    data: &PipelineData,
    scorer: &dyn PointwiseScorer,
    listwise: Option<(&ListwiseConfig, &ListwiseRunner<'_>)>,
    query: &Query,
) -> QueryRuns {
    let mut out = QueryRuns::default();
    let result = (|| -> Result<()> {
        let bm25 = data.corpus.bm25_search(query, cfg.retrieval.top_k)?;
        out.bm25 = Some(bm25.clone());
        let dearp = rerank_pointwise(scorer, &bm25, &data.corpus, query)?;
        out.dearp = Some(dearp.clone());
        if let Some((lcfg, runner)) = listwise {
            let prev = match lcfg.chain_from {
                ChainFrom::Pointwise => &dearp,
                ChainFrom::Bm25 => &bm25,
            };
            let (merged, failures) = rerank_listwise(runner, &data.corpus, query, prev, lcfg)?;
            out.window_failures = failures;
            out.dearl = Some(merged);
        }
        Ok(())
    })();
    out.error = result.err();
    out
}

/// Runs every configured stage for all queries and writes one run file per
/// stage into `output_dir`. When a query fails, the runs of every query that
/// reached a stage are still written before the first error is returned.
pub fn run_pipeline(cfg: &PipelineConfig, exec: Execution) -> Result<PipelineOutput> {
    cfg.validate()?;
    let data = load(cfg)?;
    let scorer = build_scorer(&cfg.pointwise, &data.corpus, data.qrels.as_ref(), cfg.seed)?;
    let runtime = cfg
        .listwise
        .as_ref()
        .map(|l| ListwiseRunner::new(&l.backend, &data.corpus, data.qrels.as_ref(), l.window.prompt.token_budget))
        .transpose()?;
    let listwise = cfg.listwise.as_ref().zip(runtime.as_ref());
    let per_query = map_ordered(exec, &data.queries, |q| {
        run_query(cfg, &data, scorer.as_ref(), listwise, q)
    });

    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut stages = vec![Stage::Bm25, Stage::Dearp];
    if cfg.listwise.is_some() {
        stages.push(Stage::Dearl);
    }
    let mut output = PipelineOutput {
        run_files: BTreeMap::new(),
        runs: BTreeMap::new(),
        reports: BTreeMap::new(),
        window_failures: per_query.iter().map(|r| r.window_failures).sum(),
    };
    for stage in stages {
        let runs: Vec<RunList> = per_query
            .iter()
            .filter_map(|r| match stage {
                Stage::Bm25 => r.bm25.clone(),
                Stage::Dearp => r.dearp.clone(),
                Stage::Dearl => r.dearl.clone(),
            })
            .collect();
        let path = cfg.output_dir.join(format!("{}.{}", cfg.run_name, stage.suffix()));
        write_run(&runs, stage.suffix(), &path)?;
        output.run_files.insert(stage, path);
        output.runs.insert(stage, runs);
    }
    if let Some(err) = per_query.into_iter().find_map(|r| r.error) {
        return Err(err);
    }
    if output.window_failures > 0 {
        log::warn!("{} listwise windows failed and were left unchanged", output.window_failures);
    }
    if let Some(qrels) = &data.qrels {
        for (stage, runs) in &output.runs {
            let report = evaluate(runs, qrels, Some(&data.queries), Some(&data.corpus), &cfg.eval, exec)?;
            output.reports.insert(*stage, report);
        }
        let path = cfg.output_dir.join(format!("{}.report.json", cfg.run_name));
        fs::write(&path, output.reports_json() + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(output)
}
