use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use csl_core::model::ModelConfig;
use csl_core::synthdata::{CorpusConfig, TeacherNoise};
use csl_core::trainer::{FinetuneConfig, Scenario, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// A command with every default resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Gen {
        corpus: CorpusConfig,
        split: u64,
        teacher: Option<TeacherNoise>,
        config_path: Option<PathBuf>,
    },
    Pretrain {
        corpus_path: PathBuf,
        init_path: Option<PathBuf>,
        spec: PretrainSpec,
        config_path: Option<PathBuf>,
    },
    Finetune {
        checkpoint_path: PathBuf,
        labeled_path: PathBuf,
        finetune: FinetuneConfig,
        config_path: Option<PathBuf>,
    },
    Eval {
        checkpoint_path: PathBuf,
        corpus_path: PathBuf,
    },
    Sweep {
        scenario: Scenario,
        noise_levels: Vec<f64>,
        generations: usize,
        mixing: Vec<f64>,
        seeds: Vec<u64>,
        jobs: usize,
        config_path: Option<PathBuf>,
    },
}

impl Job {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::Gen { corpus, .. } => Some(corpus.seed),
            Job::Pretrain { spec, .. } => Some(spec.train.seed),
            Job::Finetune { finetune, .. } => Some(finetune.seed),
            Job::Eval { .. } => None,
            Job::Sweep { seeds, .. } => seeds.first().copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub job: Job,
}

impl RunManifest {
    pub fn new(job: Job, out_dir: &Path) -> Self {
        Self {
            tool: "csl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: job.seed(),
            out_dir: out_dir.to_path_buf(),
            job,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}
