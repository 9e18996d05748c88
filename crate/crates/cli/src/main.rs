//! `csl`: generate corpora, pre-train, fine-tune, evaluate and sweep.
//!
//! Every command writes `manifest.json` into its output directory. The
//! manifest holds the fully resolved job, so `csl rerun` reproduces the
//! outputs byte for byte.
//!
//! Exit codes: 0 ok, 1 I/O or malformed input file, 2 invalid
//! configuration, 3 divergence.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use csl_core::model::{MaskPolicy, ModelParams};
use csl_core::numerics::Rng;
use csl_core::synthdata::{apply_teacher, generate_split, Corpus, CorpusConfig, TeacherNoise};
use csl_core::trainer::{
    evaluate, finetune, pretrain, run_generations, run_mixing, write_metrics_csv, BatcherKind, ExperimentReport,
    FinetuneConfig, LossKind, Scenario, TrainConfig,
};
use csl_core::{Checkpoint, Error};

use manifest::{Job, PretrainSpec, RunManifest};

pub const OUT_DIR_ENV: &str = "CSL_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "csl-out";

#[derive(Parser)]
#[command(name = "csl", version, about = "Contrastive semi-supervised learning lab")]
struct Cli {
    /// Output directory [env: CSL_OUT_DIR, default: csl-out]
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSON lines).
    Gen(GenArgs),
    /// Pre-train on pseudo-labels with CSL, CE-PL or a mix.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint on true labels.
    Finetune(FinetuneArgs),
    /// Frame error rate of a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Noise sweep, re-labeling generations and loss mixing.
    Sweep(SweepArgs),
    /// Re-execute the job recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Corpus config (JSON); missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    size: Option<usize>,
    /// 0 is the training corpus; other splits share its class means.
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Replace pseudo-labels with simulated teacher output at this rate.
    #[arg(long)]
    teacher_noise: Option<f64>,
    #[arg(long, default_value_t = 1)]
    jitter: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Csl,
    CePl,
}

#[derive(Clone, Copy, ValueEnum)]
enum BatcherArg {
    Random,
    Lab,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Off,
    Ld,
    Stm,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    batcher: Option<BatcherArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    accum: Option<usize>,
    #[arg(long, value_enum)]
    mask: Option<MaskArg>,
    #[arg(long)]
    csl_fraction: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig, feature_dim: usize) {
        if let Some(l) = self.loss {
            t.loss_kind = match l {
                LossArg::Csl => LossKind::Csl,
                LossArg::CePl => LossKind::CePl,
            };
        }
        if let Some(b) = self.batcher {
            t.batcher = match b {
                BatcherArg::Random => BatcherKind::Random,
                BatcherArg::Lab => BatcherKind::Lab,
            };
        }
        if let Some(v) = self.tau {
            t.csl.temperature = v;
        }
        if let Some(v) = self.alpha {
            t.lab_alpha = v;
        }
        if let Some(v) = self.accum {
            t.accumulation_steps = v;
        }
        if let Some(m) = self.mask {
            t.mask = match m {
                MaskArg::Off => None,
                MaskArg::Ld => Some(MaskPolicy::ld(feature_dim)),
                MaskArg::Stm => Some(MaskPolicy::stm(feature_dim)),
            };
        }
        if let Some(v) = self.csl_fraction {
            t.csl_fraction = v;
        }
        if let Some(v) = self.steps {
            t.schedule.total_steps = v;
        }
        if let Some(v) = self.lr {
            t.schedule.base_lr = v;
        }
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from this checkpoint's parameters instead of a fresh init.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus whose true labels are used.
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    freeze_encoder: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Teacher substitution rates, comma separated.
    #[arg(long, value_delimiter = ',')]
    noise_levels: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    generations: usize,
    /// CSL fractions for a mixing run at the scenario's teacher noise.
    #[arg(long, value_delimiter = ',')]
    mixing: Vec<f64>,
    /// Master seed; run i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    n_seeds: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Error with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::LabelOutOfRange { .. } | Error::Shape(_) | Error::StepOutOfRange { .. } => 2,
            Error::Diverged(_) | Error::NonFinite => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn config_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 2,
        message: format!("config {}: {e}", path.display()),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })?;
    serde_json::from_str(&text).map_err(|e| config_failure(path, e))
}

fn load_corpus(path: &Path) -> Result<Corpus, Failure> {
    Corpus::load(path).map_err(|e| Failure {
        code: if matches!(e, Error::Diverged(_)) { 3 } else { 1 },
        message: format!("{}: {e}", path.display()),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn resolve(cli: &Cli) -> Result<Job, Failure> {
    Ok(match &cli.command {
        Command::Gen(a) => {
            let mut corpus: CorpusConfig = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                corpus.seed = s;
            }
            if let Some(n) = a.size {
                corpus.corpus_size = n;
            }
            corpus.validate()?;
            let teacher = a.teacher_noise.map(|eps| TeacherNoise {
                segment_substitution_rate: eps,
                boundary_jitter_max: a.jitter,
                ..TeacherNoise::default()
            });
            if let Some(t) = &teacher {
                t.validate()?;
            }
            Job::Gen {
                corpus,
                split: a.split,
                teacher,
                config_path: a.config.clone(),
            }
        }
        Command::Pretrain(a) => {
            let mut spec: PretrainSpec = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                spec.train.seed = s;
            }
            a.train.apply(&mut spec.train, spec.model.feature_dim);
            spec.model.validate()?;
            spec.train.validate()?;
            Job::Pretrain {
                corpus_path: a.corpus.clone(),
                init_path: a.init.clone(),
                spec,
                config_path: a.config.clone(),
            }
        }
        Command::Finetune(a) => {
            let mut ft: FinetuneConfig = read_config(a.config.as_deref())?;
            if let Some(v) = a.epochs {
                ft.epochs = v;
            }
            if let Some(v) = a.lr {
                ft.lr = v;
            }
            if let Some(v) = a.seed {
                ft.seed = v;
            }
            ft.freeze_encoder |= a.freeze_encoder;
            ft.validate()?;
            Job::Finetune {
                checkpoint_path: a.checkpoint.clone(),
                labeled_path: a.labeled.clone(),
                finetune: ft,
                config_path: a.config.clone(),
            }
        }
        Command::Eval(a) => Job::Eval {
            checkpoint_path: a.checkpoint.clone(),
            corpus_path: a.corpus.clone(),
        },
        Command::Sweep(a) => {
            let mut scenario: Scenario = read_config(a.config.as_deref())?;
            let fd = scenario.model.feature_dim;
            a.train.apply(&mut scenario.pretrain, fd);
            scenario.validate()?;
            if a.noise_levels.is_empty() && a.mixing.is_empty() {
                return Err(Error::Config {
                    field: "noise_levels",
                    reason: "give --noise-levels and/or --mixing".into(),
                }
                .into());
            }
            if a.n_seeds == 0 {
                return Err(Error::Config {
                    field: "n_seeds",
                    reason: "must be at least 1".into(),
                }
                .into());
            }
            Job::Sweep {
                scenario,
                noise_levels: a.noise_levels.clone(),
                generations: a.generations,
                mixing: a.mixing.clone(),
                seeds: (0..a.n_seeds as u64).map(|i| a.seed + i).collect(),
                jobs: a.jobs,
                config_path: a.config.clone(),
            }
        }
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.manifest).map_err(|e| Failure {
                code: 1,
                message: format!("{}: {e}", a.manifest.display()),
            })?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| config_failure(&a.manifest, e))?;
            m.job
        }
    })
}

fn execute(job: &Job, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    match job {
        Job::Gen {
            corpus, split, teacher, ..
        } => {
            let mut c = generate_split(corpus, *split, corpus.corpus_size)?;
            if let Some(t) = teacher {
                apply_teacher(&mut c, t, &mut Rng::stream(corpus.seed, 1000 + split))?;
            }
            c.save(&out.join("corpus.jsonl"))?;
            println!("wrote {} utterances to {}", c.utterances.len(), out.join("corpus.jsonl").display());
        }
        Job::Pretrain {
            corpus_path,
            init_path,
            spec,
            ..
        } => {
            let corpus = load_corpus(corpus_path)?;
            let init = match init_path {
                Some(p) => load_checkpoint(p)?.params,
                None => ModelParams::init(&spec.model, &mut Rng::stream(spec.train.seed, 200))?,
            };
            let result = pretrain(&init, &corpus.utterances, &spec.train)?;
            result.checkpoint.save(&out.join("checkpoint.json"))?;
            write_metrics_csv(&result.log, std::fs::File::create(out.join("metrics.csv"))?)?;
            let (a, b) = result.loss_summary(50);
            println!("pretrained {} steps; loss {a:.4} -> {b:.4}", result.checkpoint.step);
        }
        Job::Finetune {
            checkpoint_path,
            labeled_path,
            finetune: ft,
            ..
        } => {
            let ck = load_checkpoint(checkpoint_path)?;
            let labeled = load_corpus(labeled_path)?;
            let result = finetune(&ck.params, &labeled.utterances, ft)?;
            result.checkpoint.save(&out.join("checkpoint.json"))?;
            write_metrics_csv(&result.log, std::fs::File::create(out.join("metrics.csv"))?)?;
            println!("fine-tuned {} steps", result.checkpoint.step);
        }
        Job::Eval {
            checkpoint_path,
            corpus_path,
        } => {
            let ck = load_checkpoint(checkpoint_path)?;
            let corpus = load_corpus(corpus_path)?;
            let fer = evaluate(&ck.params, &corpus.utterances)?;
            std::fs::write(out.join("eval.json"), serde_json::json!({ "frame_error_rate": fer }).to_string())?;
            println!("frame_error_rate {fer:?}");
        }
        Job::Sweep {
            scenario,
            noise_levels,
            generations,
            mixing,
            seeds,
            jobs,
            ..
        } => {
            let mut rows = Vec::new();
            for &eps in noise_levels {
                let mut s = scenario.clone();
                s.teacher.segment_substitution_rate = eps;
                rows.extend(run_generations(&s, *generations, seeds, *jobs)?.rows);
            }
            if !mixing.is_empty() {
                rows.extend(run_mixing(scenario, mixing, seeds, *jobs)?.rows);
            }
            let report = ExperimentReport::new(rows);
            report.write_csv(std::fs::File::create(out.join("report.csv"))?)?;
            let table = report.summary_table();
            std::fs::write(out.join("summary.txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli
        .out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let job = resolve(&cli)?;
    std::fs::create_dir_all(&out)?;
    let manifest = RunManifest::new(job, &out);
    // written first so a failed run still records what was attempted
    manifest.save(&out.join("manifest.json"))?;
    execute(&manifest.job, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
