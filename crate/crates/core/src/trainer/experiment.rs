use serde::{Deserialize, Serialize};

use super::report::{ExperimentReport, ReportRow};
use super::{evaluate, finetune, pretrain, FinetuneConfig, LossKind, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::losses::{CslConfig, NegativePolicy};
use crate::model::{ModelConfig, ModelParams, TriStageSchedule};
use crate::numerics::Rng;
use crate::synthdata::{apply_teacher, generate_corpus, generate_split, relabel, CorpusConfig, TeacherNoise, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Truth corrupted by [`TeacherNoise`].
    Simulated,
    /// The toy model fine-tuned on the labeled subset from scratch.
    Trained,
}

/// Everything needed to run one pipeline for a given seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub corpus: CorpusConfig,
    pub test_size: usize,
    pub teacher: TeacherNoise,
    pub teacher_mode: TeacherMode,
    /// Share of corpus utterances whose true labels are used for fine-tuning.
    pub finetune_fraction: f64,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig {
                class_mean_separation: 3.0,
                ..CorpusConfig::default()
            },
            test_size: 100,
            teacher: TeacherNoise::default(),
            teacher_mode: TeacherMode::Simulated,
            finetune_fraction: 0.02,
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                schedule: TriStageSchedule {
                    total_steps: 3000,
                    base_lr: 5e-3,
                    ..TriStageSchedule::default()
                },
                csl: CslConfig {
                    temperature: 0.2,
                    negative_policy: NegativePolicy::RandomCrossUtterance,
                    ..CslConfig::default()
                },
                ..TrainConfig::default()
            },
            // linear probe on the pre-trained encoder
            finetune: FinetuneConfig {
                epochs: 100,
                batch_utterances: 1,
                lr: 2e-2,
                decay_start_epoch: 70,
                freeze_encoder: true,
                ..FinetuneConfig::default()
            },
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.teacher.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.model.n_classes != self.corpus.n_classes {
            return Err(Error::config("model.n_classes", "must equal corpus.n_classes"));
        }
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(Error::config("model.feature_dim", "must equal corpus.feature_dim"));
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return Err(Error::config("finetune_fraction", "must lie in (0, 1]"));
        }
        if self.test_size == 0 {
            return Err(Error::config("test_size", "must be at least 1"));
        }
        if self.corpus.corpus_size == 0 {
            return Err(Error::config("corpus.corpus_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn labeled_count(&self) -> usize {
        ((self.finetune_fraction * self.corpus.corpus_size as f64).round() as usize).clamp(1, self.corpus.corpus_size)
    }
}

const STREAM_TEACHER: u64 = 100;
const STREAM_SUBSET: u64 = 101;
const STREAM_INIT: u64 = 200;

/// Data and initial weights shared by every method run under one seed.
#[derive(Clone, Debug)]
pub struct World {
    pub seed: u64,
    pub teacher_noise: f64,
    /// Unlabeled pool with teacher pseudo-labels.
    pub train: Vec<Utterance>,
    pub labeled: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub init: ModelParams,
}

pub fn prepare_world(scenario: &Scenario, seed: u64, teacher_noise: f64) -> Result<World> {
    scenario.validate()?;
    let cfg = CorpusConfig {
        seed,
        ..scenario.corpus.clone()
    };
    let mut corpus = generate_corpus(&cfg)?;
    let test = generate_split(&cfg, 1, scenario.test_size)?.utterances;
    let mut picked = Rng::stream(seed, STREAM_SUBSET).sample_indices(cfg.corpus_size, scenario.labeled_count());
    picked.sort_unstable();
    let labeled: Vec<Utterance> = picked.iter().map(|&i| corpus.utterances[i].clone()).collect();
    let init = ModelParams::init(&scenario.model, &mut Rng::stream(seed, STREAM_INIT))?;

    match scenario.teacher_mode {
        TeacherMode::Simulated => {
            let noise = TeacherNoise {
                segment_substitution_rate: teacher_noise,
                ..scenario.teacher.clone()
            };
            apply_teacher(&mut corpus, &noise, &mut Rng::stream(seed, STREAM_TEACHER))?;
        }
        TeacherMode::Trained => {
            // the teacher always trains the whole model
            let ft = FinetuneConfig {
                seed: seed ^ STREAM_TEACHER,
                freeze_encoder: false,
                ..scenario.finetune.clone()
            };
            let teacher = finetune(&init, &labeled, &ft)?;
            relabel(&teacher.checkpoint.params, &mut corpus.utterances)?;
        }
    }
    Ok(World {
        seed,
        teacher_noise,
        train: corpus.utterances,
        labeled,
        test,
        init,
    })
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub frame_error_rate: f64,
    pub pretrain: TrainOutcome,
    pub finetuned: ModelParams,
    pub finetune_frames: usize,
}

/// Pre-trains from the world's initial weights on `pool`, fine-tunes on the
/// labeled subset and evaluates on the test split.
pub fn run_pipeline(world: &World, pool: &[Utterance], scenario: &Scenario, train: &TrainConfig) -> Result<PipelineResult> {
    let train = TrainConfig {
        seed: world.seed,
        ..train.clone()
    };
    let ft = FinetuneConfig {
        seed: world.seed,
        ..scenario.finetune.clone()
    };
    let pre = pretrain(&world.init, pool, &train)?;
    let tuned = finetune(&pre.checkpoint.params, &world.labeled, &ft)?;
    let finetuned = tuned.checkpoint.params;
    Ok(PipelineResult {
        frame_error_rate: evaluate(&finetuned, &world.test)?,
        pretrain: pre,
        finetuned,
        finetune_frames: world.labeled.iter().map(Utterance::len).sum(),
    })
}

const LOSS_WINDOW: usize = 50;

fn row(world: &World, generation: usize, train: &TrainConfig, result: &PipelineResult) -> ReportRow {
    let (start, end) = result.pretrain.loss_summary(LOSS_WINDOW);
    ReportRow {
        seed: world.seed,
        generation,
        teacher_noise: world.teacher_noise,
        loss_kind: train.loss_kind,
        csl_fraction: train.effective_csl_fraction(),
        pretrain_steps: train.steps(),
        finetune_frames: result.finetune_frames,
        frame_error_rate: result.frame_error_rate,
        pretrain_loss_start: start,
        pretrain_loss_end: end,
        werr_pct: None,
    }
}

fn method(scenario: &Scenario, kind: LossKind) -> TrainConfig {
    TrainConfig {
        loss_kind: kind,
        csl_fraction: if kind == LossKind::Csl { 1.0 } else { 0.0 },
        ..scenario.pretrain.clone()
    }
}

/// Maps `f` over seeds on up to `jobs` threads; output order follows `seeds`.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, seeds.len().max(1));
    if jobs == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let chunk = seeds.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(|&s| f(s)).collect::<Result<Vec<T>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(seeds.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Diverged("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

/// CSL and CE-PL pipelines per teacher noise level, on identical corpora.
pub fn run_noise_sweep(scenario: &Scenario, noise_levels: &[f64], seeds: &[u64], jobs: usize) -> Result<ExperimentReport> {
    scenario.validate()?;
    if let Some(bad) = noise_levels.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::config("noise_levels", format!("{bad} is outside [0, 1]")));
    }
    let rows = per_seed(seeds, jobs, |seed| {
        let mut rows = Vec::new();
        for &eps in noise_levels {
            let world = prepare_world(scenario, seed, eps)?;
            for kind in [LossKind::Csl, LossKind::CePl] {
                let train = method(scenario, kind);
                let result = run_pipeline(&world, &world.train, scenario, &train)?;
                rows.push(row(&world, 1, &train, &result));
            }
        }
        Ok(rows)
    })?;
    Ok(ExperimentReport::new(rows.concat()))
}

/// Iterative re-labeling: generation 1 learns from the teacher, every later
/// generation from pseudo-labels produced by that method's previous
/// fine-tuned model. Each generation restarts from the same initial weights.
pub fn run_generations(scenario: &Scenario, generations: usize, seeds: &[u64], jobs: usize) -> Result<ExperimentReport> {
    scenario.validate()?;
    if generations == 0 {
        return Err(Error::config("generations", "must be at least 1"));
    }
    let eps = scenario.teacher.segment_substitution_rate;
    let rows = per_seed(seeds, jobs, |seed| {
        let world = prepare_world(scenario, seed, eps)?;
        let mut rows = Vec::new();
        for kind in [LossKind::Csl, LossKind::CePl] {
            let train = method(scenario, kind);
            let mut pool = world.train.clone();
            for g in 1..=generations {
                let result = run_pipeline(&world, &pool, scenario, &train)?;
                rows.push(row(&world, g, &train, &result));
                if g < generations {
                    relabel(&result.finetuned, &mut pool)?;
                }
            }
        }
        Ok(rows)
    })?;
    Ok(ExperimentReport::new(rows.concat()))
}

/// Per-batch loss mixing at each CSL fraction, plus a CE-PL reference.
pub fn run_mixing(scenario: &Scenario, fractions: &[f64], seeds: &[u64], jobs: usize) -> Result<ExperimentReport> {
    scenario.validate()?;
    let eps = scenario.teacher.segment_substitution_rate;
    let rows = per_seed(seeds, jobs, |seed| {
        let world = prepare_world(scenario, seed, eps)?;
        let mut rows = Vec::new();
        for &f in fractions {
            let train = TrainConfig {
                csl_fraction: f,
                ..method(scenario, LossKind::Csl)
            };
            let result = run_pipeline(&world, &world.train, scenario, &train)?;
            rows.push(row(&world, 1, &train, &result));
        }
        let train = method(scenario, LossKind::CePl);
        let result = run_pipeline(&world, &world.train, scenario, &train)?;
        rows.push(row(&world, 1, &train, &result));
        Ok(rows)
    })?;
    Ok(ExperimentReport::new(rows.concat()))
}
