//! TOML config file. Every key is optional; command-line flags win.

use std::path::{Path, PathBuf};

use duorank_core::corpus::CorpusFormat;
use duorank_core::distiller::LrSchedule;
use duorank_core::listwise::PromptMode;
use duorank_core::losses::{KdDirection, RankLoss};
use duorank_core::metrics::Cutoffs;
use duorank_core::pipeline::{ListwiseBackendSpec, ListwiseConfig, PointwiseSpec, RetrievalConfig};
use duorank_core::Error;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub run_name: Option<String>,
    pub data: DataSection,
    pub retrieval: RetrievalConfig,
    pub pointwise: Option<PointwiseSpec>,
    pub listwise: Option<ListwiseConfig>,
    pub eval: Cutoffs,
    pub train: TrainSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub format: Option<CorpusFormat>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub rank_loss: Option<RankLoss>,
    pub kd_direction: Option<KdDirection>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub weight_decay: Option<f64>,
    pub lr_schedule: Option<LrSchedule>,
    pub holdout_fraction: Option<f64>,
    pub negatives_per_query: Option<usize>,
    pub candidate_depth: Option<usize>,
    /// Scorer whose outputs the student distills; planted with noise 0.5 when unset.
    pub teacher: Option<PointwiseSpec>,
    pub alphas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub count: Option<usize>,
    pub per_query_candidates: Option<usize>,
    pub max_rejection_rate: Option<f64>,
    pub min_responses: Option<usize>,
    pub batch: Option<usize>,
    pub mode: Option<PromptMode>,
    pub token_budget: Option<usize>,
    pub created_at: Option<String>,
    pub backend: Option<ListwiseBackendSpec>,
}

impl FileConfig {
    /// Reads `path` and resolves relative paths inside it against the file's directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.data.corpus, &mut self.data.queries, &mut self.data.qrels, &mut self.output_dir]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for spec in [&mut self.pointwise, &mut self.train.teacher].into_iter().flatten() {
            if let PointwiseSpec::Linear { model } = spec {
                fix(model);
            }
        }
    }
}
