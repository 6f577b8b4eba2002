mod config;

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use duorank_core::corpus::{ingest_corpus_with, read_queries, CorpusFormat};
use duorank_core::distiller::{alpha_sweep, build_training_set, sweep_csv, train_student, BuildOptions, QueryGroup, TrainConfig};
use duorank_core::listwise::{ChatBackend, IdentityBackend, OpenAiChatBackend, OracleBackend, PromptMode};
use duorank_core::losses::{LossConfig, RankLoss};
use duorank_core::metrics::evaluate;
use duorank_core::parallel::{map_ordered, with_workers};
use duorank_core::pipeline::{
    build_scorer, rerank_listwise, run_pipeline, ChainFrom, DataConfig, ListwiseBackendSpec, ListwiseConfig,
    ListwiseRunner, PipelineConfig, PointwiseSpec, RetrievalConfig,
};
use duorank_core::scorers::rerank_pointwise;
use duorank_core::synthgen::{generate_examples, write_examples, GenerateOptions};
use duorank_core::trec::{read_qrels, read_run, write_run};
use duorank_core::{Corpus, Error, Execution, Qrels, Query, RunList};

use config::FileConfig;

#[derive(Parser)]
#[command(name = "duorank", version, about = "BM25 retrieval, pointwise and listwise reranking, distillation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a corpus and print index statistics.
    Index(IndexArgs),
    /// BM25 first-stage retrieval into a TREC run file.
    Retrieve(RetrieveArgs),
    /// Distill a linear student from a teacher scorer.
    Train(TrainArgs),
    /// Train one student per alpha and write `alpha,ndcg10` CSV.
    SweepAlpha(SweepArgs),
    /// Rerank an existing run with the pointwise scorer or the listwise backend.
    Rerank(RerankArgs),
    /// Generate synthetic listwise ranking examples.
    Synthgen(SynthArgs),
    /// Evaluate a run against qrels.
    Eval(EvalArgs),
    /// Retrieval, pointwise and listwise stages end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially. Defaults to all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Corpus format: jsonl or tsv. Inferred from the extension by default.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Clone, Default)]
struct RetrievalArgs {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Write the statistics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// point_ce or ranknet.
    #[arg(long)]
    rank_loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    /// Noise of the planted teacher (only when the teacher is planted).
    #[arg(long)]
    teacher_noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Comma-separated alpha values.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Pointwise,
    Listwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Identity,
    Oracle,
}

#[derive(Args, Clone, Default)]
struct ListwiseFlags {
    /// Mock listwise backend, overriding the configured one.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    listwise_k: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args)]
struct RerankArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Input TREC run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "pointwise")]
    stage: StageArg,
    /// Linear model JSON used as the pointwise scorer.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    listwise: ListwiseFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Candidate run; BM25 top candidates are used when absent.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    max_rejection_rate: Option<f64>,
    /// Fixed RFC 3339 timestamp stamped on every example.
    #[arg(long)]
    created_at: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Json,
    Csv,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    run: PathBuf,
    /// Printed report format.
    #[arg(long, value_enum, default_value = "table")]
    report: ReportFormat,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_query_csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[command(flatten)]
    listwise: ListwiseFlags,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Skip the listwise stage even when configured.
    #[arg(long)]
    no_listwise: bool,
    /// Rerank the BM25 head instead of the pointwise head in the listwise stage.
    #[arg(long)]
    listwise_from_bm25: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
}

/// Config file merged with the flags shared by every subcommand.
struct Ctx {
    file: FileConfig,
    seed: u64,
    workers: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Ctx {
    fn new(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        Ok(Ctx {
            seed: common.seed.or(file.seed).unwrap_or(0),
            workers: common.workers.or(file.workers),
            file,
        })
    }

    fn exec<R: Send>(&self, f: impl FnOnce(Execution) -> R + Send) -> R {
        match self.workers {
            None => f(Execution::Parallel),
            Some(n) => with_workers(n, f),
        }
    }

    fn path(&self, flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        flag.clone()
            .or_else(|| file.clone())
            .ok_or_else(|| config_err(format!("missing --{name} (or data.{name} in the config)")).into())
    }

    fn corpus_path(&self, d: &DataArgs) -> Result<PathBuf> {
        self.path(&d.corpus, &self.file.data.corpus, "corpus")
    }

    fn queries_path(&self, d: &DataArgs) -> Result<PathBuf> {
        self.path(&d.queries, &self.file.data.queries, "queries")
    }

    fn qrels_path(&self, d: &DataArgs) -> Option<PathBuf> {
        d.qrels.clone().or_else(|| self.file.data.qrels.clone())
    }

    fn format(&self, d: &DataArgs) -> Result<Option<CorpusFormat>> {
        match &d.format {
            Some(f) => Ok(Some(f.parse::<CorpusFormat>()?)),
            None => Ok(self.file.data.format),
        }
    }

    fn retrieval(&self, r: &RetrievalArgs) -> RetrievalConfig {
        let base = self.file.retrieval;
        RetrievalConfig {
            top_k: r.top_k.unwrap_or(base.top_k),
            k1: r.k1.unwrap_or(base.k1),
            b: r.b.unwrap_or(base.b),
        }
    }

    fn corpus(&self, d: &DataArgs, r: &RetrievalConfig) -> Result<Corpus> {
        let path = self.corpus_path(d)?;
        let format = self.format(d)?.unwrap_or_else(|| CorpusFormat::from_path(&path));
        Ok(ingest_corpus_with(&path, format, r.params())?)
    }

    fn queries(&self, d: &DataArgs) -> Result<Vec<Query>> {
        Ok(read_queries(&self.queries_path(d)?)?)
    }

    fn qrels(&self, d: &DataArgs) -> Result<Option<Qrels>> {
        Ok(self.qrels_path(d).map(|p| read_qrels(&p)).transpose()?)
    }

    fn require_qrels(&self, d: &DataArgs) -> Result<Qrels> {
        self.qrels(d)?
            .ok_or_else(|| config_err("missing --qrels (or data.qrels in the config)").into())
    }

    fn output_dir(&self) -> PathBuf {
        self.file.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    fn run_name(&self) -> String {
        self.file.run_name.clone().unwrap_or_else(|| "run".into())
    }

    /// Explicit output path, or `<output_dir>/<default_name>`.
    fn out_path(&self, flag: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
        let path = flag.clone().unwrap_or_else(|| self.output_dir().join(default_name));
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(path)
    }

    fn listwise(&self, flags: &ListwiseFlags) -> Result<Option<ListwiseConfig>> {
        let mut cfg = self.file.listwise.clone();
        if let Some(b) = flags.backend {
            let backend = match b {
                BackendArg::Identity => ListwiseBackendSpec::Identity,
                BackendArg::Oracle => ListwiseBackendSpec::Oracle,
            };
            match &mut cfg {
                Some(c) => c.backend = backend,
                None => {
                    cfg = Some(ListwiseConfig {
                        backend,
                        k: 30,
                        chain_from: ChainFrom::Pointwise,
                        window: Default::default(),
                    })
                }
            }
        }
        if let Some(c) = &mut cfg {
            c.k = flags.listwise_k.unwrap_or(c.k);
            c.window.window = flags.window.unwrap_or(c.window.window);
            c.window.stride = flags.stride.unwrap_or(c.window.stride);
            c.window.passes = flags.passes.unwrap_or(c.window.passes);
            c.window.validate()?;
        }
        Ok(cfg)
    }

    fn pointwise(&self, model: &Option<PathBuf>) -> Option<PointwiseSpec> {
        match model {
            Some(m) => Some(PointwiseSpec::Linear { model: m.clone() }),
            None => self.file.pointwise.clone(),
        }
    }

    fn train_config(&self, t: &TrainFlags) -> Result<TrainConfig> {
        let f = &self.file.train;
        let d = TrainConfig::default();
        let rank_loss = match &t.rank_loss {
            Some(s) => s.parse::<RankLoss>()?,
            None => f.rank_loss.unwrap_or(d.loss.rank_loss),
        };
        let cfg = TrainConfig {
            loss: LossConfig {
                alpha: t.alpha.or(f.alpha).unwrap_or(d.loss.alpha),
                tau: t.tau.or(f.tau).unwrap_or(d.loss.tau),
                rank_loss,
                kd_direction: f.kd_direction.unwrap_or(d.loss.kd_direction),
            },
            learning_rate: t.learning_rate.or(f.learning_rate).unwrap_or(d.learning_rate),
            epochs: t.epochs.or(f.epochs).unwrap_or(d.epochs),
            batch_size: t.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
            weight_decay: t.weight_decay.or(f.weight_decay).unwrap_or(d.weight_decay),
            seed: self.seed,
            lr_schedule: f.lr_schedule.unwrap_or(d.lr_schedule),
            holdout_fraction: f.holdout_fraction.unwrap_or(d.holdout_fraction),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn training_data(&self, d: &DataArgs, r: &RetrievalArgs, t: &TrainFlags) -> Result<Vec<QueryGroup>> {
        let retrieval = self.retrieval(r);
        let corpus = self.corpus(d, &retrieval)?;
        let queries = self.queries(d)?;
        let qrels = self.require_qrels(d)?;
        let mut teacher_spec = self.file.train.teacher.clone().unwrap_or(PointwiseSpec::Planted {
            noise_sigma: 0.5,
            scale: 1.0,
        });
        if let (Some(n), PointwiseSpec::Planted { noise_sigma, .. }) = (t.teacher_noise, &mut teacher_spec) {
            *noise_sigma = n;
        }
        let teacher = build_scorer(&teacher_spec, &corpus, Some(&qrels), self.seed)?;
        let defaults = BuildOptions::default();
        let opts = BuildOptions {
            negatives_per_query: t
                .negatives
                .or(self.file.train.negatives_per_query)
                .unwrap_or(defaults.negatives_per_query),
            candidate_depth: self.file.train.candidate_depth.unwrap_or(retrieval.top_k),
            seed: self.seed,
        };
        let (data, report) =
            self.exec(|exec| build_training_set(&corpus, &queries, &qrels, teacher.as_ref(), &opts, exec))?;
        log::info!("training groups: {report:?}");
        if data.is_empty() {
            return Err(Error::Data(format!(
                "no usable training queries ({} without positives, {} with too few negatives)",
                report.skipped_no_positive, report.skipped_few_negatives
            ))
            .into());
        }
        Ok(data)
    }
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let retrieval = ctx.retrieval(&a.retrieval);
    let corpus = ctx.corpus(&a.data, &retrieval)?;
    let idx = corpus.index();
    let stats = serde_json::json!({
        "documents": idx.doc_count(),
        "avg_doc_length": idx.avg_doc_length(),
        "vocabulary": idx.vocabulary_size(),
        "k1": retrieval.k1,
        "b": retrieval.b,
    });
    let text = serde_json::to_string_pretty(&stats)? + "\n";
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let retrieval = ctx.retrieval(&a.retrieval);
    let corpus = ctx.corpus(&a.data, &retrieval)?;
    let queries = ctx.queries(&a.data)?;
    let runs = ctx.exec(|exec| {
        map_ordered(exec, &queries, |q| corpus.bm25_search(q, retrieval.top_k))
            .into_iter()
            .collect::<duorank_core::Result<Vec<_>>>()
    })?;
    let out = ctx.out_path(&a.out, &format!("{}.bm25", ctx.run_name()))?;
    write_run(&runs, "bm25", &out)?;
    eprintln!("wrote {} queries to {}", runs.len(), out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let cfg = ctx.train_config(&a.train)?;
    let data = ctx.training_data(&a.data, &a.retrieval, &a.train)?;
    let report = train_student(&data, &cfg)?;
    let model_out = ctx.out_path(&a.model_out, "model.json")?;
    report.model.save(&model_out)?;
    let report_out = ctx.out_path(&a.report_out, "train_report.json")?;
    fs::write(&report_out, report.to_json() + "\n").with_context(|| format!("writing {}", report_out.display()))?;
    eprintln!(
        "initial loss {:.6}, final loss {:.6}, held-out kendall {:?}",
        report.initial_loss,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.heldout_kendall.last().copied().flatten()
    );
    eprintln!("wrote {} and {}", model_out.display(), report_out.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let cfg = ctx.train_config(&a.train)?;
    let alphas = a
        .alphas
        .clone()
        .or_else(|| ctx.file.train.alphas.clone())
        .unwrap_or_else(|| vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    if alphas.is_empty() {
        return Err(config_err("--alphas is empty").into());
    }
    let data = ctx.training_data(&a.data, &a.retrieval, &a.train)?;
    let rows = ctx.exec(|exec| alpha_sweep(&data, &alphas, &cfg, exec))?;
    let csv = sweep_csv(&rows);
    let out = ctx.out_path(&a.out, "sweep.csv")?;
    fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    let values: Vec<f64> = rows.iter().filter_map(|r| r.ndcg10.as_ref().ok().copied()).collect();
    let decreasing = values.len() == rows.len() && values.windows(2).all(|w| w[1] <= w[0]);
    eprintln!(
        "nDCG@10 {} monotonically decreasing in alpha",
        if decreasing { "is" } else { "is not" }
    );
    if values.len() < rows.len() {
        eprintln!("{} of {} alphas failed", rows.len() - values.len(), rows.len());
    }
    Ok(())
}

fn queries_by_id(queries: &[Query]) -> HashMap<&str, &Query> {
    queries.iter().map(|q| (q.query_id.as_str(), q)).collect()
}

fn cmd_rerank(a: RerankArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let retrieval = ctx.retrieval(&RetrievalArgs::default());
    let corpus = ctx.corpus(&a.data, &retrieval)?;
    let queries = ctx.queries(&a.data)?;
    let by_id = queries_by_id(&queries);
    let input = read_run(&a.run)?;
    if let Some(r) = input.iter().find(|r| !by_id.contains_key(r.query_id.as_str())) {
        return Err(Error::Data(format!("run has unknown query {}", r.query_id)).into());
    }
    let qrels = ctx.qrels(&a.data)?;
    let (runs, tag) = match a.stage {
        StageArg::Pointwise => {
            let spec = ctx
                .pointwise(&a.model)
                .ok_or_else(|| config_err("no pointwise scorer: pass --model or set [pointwise]"))?;
            let scorer = build_scorer(&spec, &corpus, qrels.as_ref(), ctx.seed)?;
            let runs = ctx.exec(|exec| {
                map_ordered(exec, &input, |r| rerank_pointwise(scorer.as_ref(), r, &corpus, by_id[r.query_id.as_str()]))
                    .into_iter()
                    .collect::<duorank_core::Result<Vec<RunList>>>()
            })?;
            (runs, "dearp")
        }
        StageArg::Listwise => {
            let lcfg = ctx
                .listwise(&a.listwise)?
                .ok_or_else(|| config_err("no listwise backend: pass --backend or set [listwise]"))?;
            let runner = ListwiseRunner::new(&lcfg.backend, &corpus, qrels.as_ref(), lcfg.window.prompt.token_budget)?;
            let runs = ctx.exec(|exec| {
                map_ordered(exec, &input, |r| {
                    rerank_listwise(&runner, &corpus, by_id[r.query_id.as_str()], r, &lcfg).map(|(run, _)| run)
                })
                .into_iter()
                .collect::<duorank_core::Result<Vec<RunList>>>()
            })?;
            (runs, "dearl")
        }
    };
    let out = ctx.out_path(&a.out, &format!("{}.{tag}", ctx.run_name()))?;
    write_run(&runs, tag, &out)?;
    eprintln!("wrote {} queries to {}", runs.len(), out.display());
    Ok(())
}

/// Oracle over every judged document of every query, keeping the best grade
/// when a passage is judged for several queries.
fn global_oracle(corpus: &Corpus, qrels: &Qrels, token_budget: usize) -> OracleBackend {
    let mut best: HashMap<&str, f64> = HashMap::new();
    for (_, doc, grade) in qrels.iter() {
        if let Some(d) = corpus.get(doc) {
            let g = best.entry(d.text.as_str()).or_insert(0.0);
            *g = g.max(f64::from(grade));
        }
    }
    OracleBackend::new(best, token_budget)
}

fn cmd_synthgen(a: SynthArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let s = &ctx.file.synth;
    let retrieval = ctx.retrieval(&RetrievalArgs::default());
    let corpus = ctx.corpus(&a.data, &retrieval)?;
    let queries = ctx.queries(&a.data)?;
    let d = GenerateOptions::default();
    let mut opts = GenerateOptions {
        per_query_candidates: s.per_query_candidates.unwrap_or(d.per_query_candidates),
        target_count: a.count.or(s.count).unwrap_or(d.target_count),
        seed: ctx.seed,
        max_rejection_rate: a.max_rejection_rate.or(s.max_rejection_rate).unwrap_or(d.max_rejection_rate),
        min_responses: s.min_responses.unwrap_or(d.min_responses),
        batch: s.batch.unwrap_or(d.batch),
        prompt: d.prompt,
        created_at: a.created_at.clone().or_else(|| s.created_at.clone()),
    };
    opts.prompt.mode = s.mode.unwrap_or(PromptMode::Cot);
    opts.prompt.token_budget = s.token_budget.unwrap_or(opts.prompt.token_budget);
    let spec = match a.backend {
        Some(BackendArg::Identity) => ListwiseBackendSpec::Identity,
        Some(BackendArg::Oracle) => ListwiseBackendSpec::Oracle,
        None => s
            .backend
            .clone()
            .ok_or_else(|| config_err("no teacher backend: pass --backend or set synth.backend"))?,
    };
    let backend: Box<dyn ChatBackend> = match &spec {
        ListwiseBackendSpec::Identity => Box::new(IdentityBackend),
        ListwiseBackendSpec::Oracle => Box::new(global_oracle(&corpus, &ctx.require_qrels(&a.data)?, opts.prompt.token_budget)),
        ListwiseBackendSpec::Openai(c) => Box::new(OpenAiChatBackend::new(c.clone())?),
    };
    let runs = a.run.as_deref().map(read_run).transpose()?;
    let (examples, report) =
        ctx.exec(|exec| generate_examples(&queries, &corpus, runs.as_deref(), backend.as_ref(), &opts, exec))?;
    let out = ctx.out_path(&a.out, "synthetic.jsonl")?;
    write_examples(&examples, &out)?;
    eprintln!("{}", serde_json::to_string(&report)?);
    eprintln!("wrote {} examples to {}", examples.len(), out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let runs = read_run(&a.run)?;
    let qrels = ctx.require_qrels(&a.data)?;
    let queries = match ctx.queries_path(&a.data) {
        Ok(p) => Some(read_queries(&p)?),
        Err(_) => None,
    };
    let corpus = match (&queries, ctx.corpus_path(&a.data)) {
        (Some(_), Ok(_)) => Some(ctx.corpus(&a.data, &ctx.retrieval(&RetrievalArgs::default()))?),
        _ => None,
    };
    let cutoffs = ctx.file.eval.clone();
    let report = ctx.exec(|exec| evaluate(&runs, &qrels, queries.as_deref(), corpus.as_ref(), &cutoffs, exec))?;
    match a.report {
        ReportFormat::Table => print!("{}", report.to_table()),
        ReportFormat::Json => println!("{}", report.to_json()),
        ReportFormat::Csv => print!("{}", report.to_csv()),
    }
    if let Some(p) = &a.out {
        fs::write(p, report.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.per_query_csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let ctx = Ctx::new(&a.common)?;
    let mut listwise = ctx.listwise(&a.listwise)?;
    if a.no_listwise {
        listwise = None;
    }
    if let Some(l) = &mut listwise {
        if a.listwise_from_bm25 {
            l.chain_from = ChainFrom::Bm25;
        }
    }
    let cfg = PipelineConfig {
        seed: ctx.seed,
        output_dir: a.output_dir.clone().unwrap_or_else(|| ctx.output_dir()),
        run_name: a.run_name.clone().unwrap_or_else(|| ctx.run_name()),
        data: DataConfig {
            corpus: ctx.corpus_path(&a.data)?,
            queries: ctx.queries_path(&a.data)?,
            qrels: ctx.qrels_path(&a.data),
            format: ctx.format(&a.data)?,
        },
        retrieval: ctx.retrieval(&a.retrieval),
        pointwise: ctx.pointwise(&a.model).unwrap_or_default(),
        listwise,
        eval: ctx.file.eval.clone(),
    };
    let output = ctx.exec(|exec| run_pipeline(&cfg, exec))?;
    for path in output.run_files.values() {
        eprintln!("wrote {}", path.display());
    }
    if output.window_failures > 0 {
        eprintln!("{} listwise windows failed and kept their order", output.window_failures);
    }
    if !output.reports.is_empty() {
        let cutoffs = &cfg.eval.ndcg;
        print!("{:<6}", "stage");
        for k in cutoffs {
            print!("  {:>8}", format!("ndcg@{k}"));
        }
        println!();
        for (stage, report) in &output.reports {
            print!("{:<6}", stage.suffix());
            for v in &report.mean_ndcg {
                print!("  {v:>8.4}");
            }
            println!();
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or(4, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => cmd_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Train(a) => cmd_train(a),
        Command::SweepAlpha(a) => cmd_sweep(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::Synthgen(a) => cmd_synthgen(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
