//! Pre-training (CSL, CE-PL or a per-batch mix of the two), fine-tuning
//! with the prediction head swapped in, and frame-error evaluation.

mod experiment;
mod report;

pub use experiment::{
    prepare_world, run_generations, run_mixing, run_noise_sweep, run_pipeline, PipelineResult, Scenario,
    TeacherMode, World,
};
pub use report::{relative_improvement, ExperimentReport, ReportRow, SummaryRow, REPORT_COLUMNS};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::batching::{build_random_batch, lab_select, CorpusIndex, GradientAccumulator, LabConfig, MiniBatch};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, csl_loss, ContrastiveBatch, CslConfig};
use crate::model::{
    apply_masking, clip_grad_norm, config_hash, context_window, lr_at, optimizer_step, Checkpoint, MaskPolicy,
    ModelParams, OptimizerKind, OptimizerState, TriStageSchedule,
};
use crate::numerics::{Matrix, Rng};
use crate::segmentation::{extract_segments, sample_representatives, Label, Segment};
use crate::synthdata::Utterance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Csl,
    CePl,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Csl => "csl",
            LossKind::CePl => "ce_pl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatcherKind {
    Random,
    Lab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    /// Probability that a mini-batch uses the contrastive loss. Only read
    /// when `loss_kind` is `csl`; `ce_pl` always means 0.
    pub csl_fraction: f64,
    pub batcher: BatcherKind,
    pub max_utterances: usize,
    pub lab_alpha: f64,
    pub accumulation_steps: usize,
    /// `total_steps` is the number of optimizer updates.
    pub schedule: TriStageSchedule,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub csl: CslConfig,
    pub mask: Option<MaskPolicy>,
    /// Draw segment representatives once per utterance instead of per batch.
    pub freeze_representatives: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Csl,
            csl_fraction: 1.0,
            batcher: BatcherKind::Lab,
            max_utterances: 16,
            lab_alpha: 2.0,
            accumulation_steps: 1,
            schedule: TriStageSchedule {
                total_steps: 300,
                base_lr: 2e-3,
                ..TriStageSchedule::default()
            },
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(10.0),
            csl: CslConfig::default(),
            mask: None,
            freeze_representatives: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_csl_fraction(&self) -> f64 {
        match self.loss_kind {
            LossKind::Csl => self.csl_fraction,
            LossKind::CePl => 0.0,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.csl_fraction) {
            return Err(Error::config("csl_fraction", "must lie in [0, 1]"));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::config("accumulation_steps", "must be at least 1"));
        }
        if self.max_utterances == 0 {
            return Err(Error::config("max_utterances", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        self.schedule.validate()?;
        self.csl.validate()?;
        LabConfig {
            alpha: self.lab_alpha,
            max_utterances: self.max_utterances,
        }
        .validate()?;
        if let Some(m) = &self.mask {
            m.validate()?;
        }
        Ok(())
    }
}

/// One logged mini-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_kind: LossKind,
}

/// Writes `step,lr,loss,loss_kind` rows.
pub fn write_metrics_csv(log: &[StepMetrics], w: impl Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["step", "lr", "loss", "loss_kind"])?;
    for m in log {
        csv.write_record([
            m.step.to_string(),
            m.lr.to_string(),
            m.loss.to_string(),
            m.loss_kind.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Mean loss of the first and last `window` logged batches.
    pub fn loss_summary(&self, window: usize) -> (f64, f64) {
        let losses: Vec<f64> = self.log.iter().map(|m| m.loss).filter(|l| l.is_finite()).collect();
        if losses.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let w = window.min(losses.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&losses[..w]), mean(&losses[losses.len() - w..]))
    }
}

const STREAM_BATCH: u64 = 10;
const STREAM_MIX: u64 = 11;
const STREAM_MASK: u64 = 12;
const STREAM_LOSS: u64 = 13;
const STREAM_FROZEN_REPS: u64 = 14;
const STREAM_FINETUNE: u64 = 20;
const STREAM_HEAD: u64 = 21;

/// Checkpoint at step 0 of pre-training, with fresh generator streams.
pub fn pretrain_checkpoint(init: &ModelParams, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let opt = OptimizerState::new(config.optimizer, init);
    let mut ck = Checkpoint::new("pretrain", init.clone(), opt, config_hash(config)?);
    ck.total_steps = config.steps();
    for (name, stream) in [
        ("batch", STREAM_BATCH),
        ("mix", STREAM_MIX),
        ("mask", STREAM_MASK),
        ("loss", STREAM_LOSS),
    ] {
        ck.rng.insert(name.into(), Rng::stream(config.seed, stream).state());
    }
    Ok(ck)
}

fn take_rng(ck: &Checkpoint, name: &str) -> Result<Rng> {
    let st = ck
        .rng
        .get(name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks rng stream `{name}`")))?;
    Rng::from_state(st)
}

/// Pre-trains from scratch on the corpus pseudo-labels.
pub fn pretrain(init: &ModelParams, corpus: &[Utterance], config: &TrainConfig) -> Result<TrainOutcome> {
    let ck = pretrain_checkpoint(init, config)?;
    pretrain_resume(ck, corpus, config, None)
}

/// Continues pre-training from `checkpoint` up to `stop_at` updates (or the
/// end of the schedule). Resuming a checkpoint written mid-run reproduces
/// the uninterrupted run exactly.
pub fn pretrain_resume(
    checkpoint: Checkpoint,
    corpus: &[Utterance],
    config: &TrainConfig,
    stop_at: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if checkpoint.config_hash != config_hash(config)? {
        return Err(Error::config("config", "does not match the checkpoint's config hash"));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("pre-training corpus"));
    }
    let k = checkpoint.params.config.n_classes;
    if let Some(&bad) = corpus.iter().flat_map(|u| &u.pseudo_labels).find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    let mut batch_rng = take_rng(&checkpoint, "batch")?;
    let mut mix_rng = take_rng(&checkpoint, "mix")?;
    let mut mask_rng = take_rng(&checkpoint, "mask")?;
    let mut loss_rng = take_rng(&checkpoint, "loss")?;
    let Checkpoint {
        mut params,
        optimizer: mut opt,
        step: start,
        ..
    } = checkpoint;

    let index = CorpusIndex::build(corpus);
    let lab = LabConfig {
        alpha: config.lab_alpha,
        max_utterances: config.max_utterances,
    };
    let frozen: Option<Vec<Vec<Segment>>> = config.freeze_representatives.then(|| {
        let mut rng = Rng::stream(config.seed, STREAM_FROZEN_REPS);
        corpus
            .iter()
            .enumerate()
            .map(|(u, utt)| sample_representatives(&extract_segments(u, &utt.pseudo_labels), &mut rng))
            .collect()
    });
    let fraction = config.effective_csl_fraction();
    let stop = stop_at.unwrap_or(config.steps()).min(config.steps());
    let mut log = Vec::new();

    for step in start..stop {
        let mut acc = GradientAccumulator::new(config.accumulation_steps)?;
        let lr = acc.scaled_lr(lr_at(&config.schedule, step)?);
        let mut update = None;
        for _ in 0..config.accumulation_steps {
            let mut batch = match config.batcher {
                BatcherKind::Random => build_random_batch(corpus, config.max_utterances, &mut batch_rng),
                BatcherKind::Lab => {
                    let ids = lab_select(&index, &lab, &mut batch_rng)?;
                    MiniBatch::from_utterances(corpus, ids, &mut batch_rng)
                }
            };
            if let Some(f) = &frozen {
                batch.segments = batch.utterances.iter().flat_map(|&u| f[u].iter().copied()).collect();
            }
            let use_csl = mix_rng.uniform() < fraction;
            let frames = batch_frames(corpus, &batch, config.mask.as_ref(), &mut mask_rng)?;
            let mut grad = params.zeros_like();
            let (kind, loss) = if use_csl {
                (
                    LossKind::Csl,
                    csl_batch_gradient(&params, &batch, &frames, &config.csl, &mut loss_rng, &mut grad)?,
                )
            } else {
                (LossKind::CePl, ce_batch_gradient(&params, corpus, &batch, &frames, &mut grad)?)
            };
            if let Some(l) = loss {
                if !l.is_finite() {
                    return Err(Error::Diverged(format!("non-finite {kind} loss at step {step}")));
                }
            }
            log.push(StepMetrics {
                step,
                lr,
                loss: loss.unwrap_or(f64::NAN),
                loss_kind: kind,
            });
            update = acc.push(grad);
        }
        let mut grad = update.ok_or_else(|| Error::Diverged("accumulator did not flush".into()))?;
        if let Some(c) = config.clip_norm {
            clip_grad_norm(&mut grad, c);
        }
        optimizer_step(&mut params, &grad, &mut opt, lr)
            .map_err(|e| Error::Diverged(format!("step {step}: {e}")))?;
    }

    let mut ck = Checkpoint::new("pretrain", params, opt, config_hash(config)?);
    ck.step = stop;
    ck.total_steps = config.steps();
    for (name, rng) in [
        ("batch", &batch_rng),
        ("mix", &mix_rng),
        ("mask", &mask_rng),
        ("loss", &loss_rng),
    ] {
        ck.rng.insert(name.into(), rng.state());
    }
    Ok(TrainOutcome { checkpoint: ck, log })
}

fn batch_frames(
    corpus: &[Utterance],
    batch: &MiniBatch,
    mask: Option<&MaskPolicy>,
    rng: &mut Rng,
) -> Result<Vec<Matrix>> {
    batch
        .utterances
        .iter()
        .map(|&u| match mask {
            Some(m) if !m.is_identity() => apply_masking(&corpus[u].frames, m, rng),
            _ => Ok(corpus[u].frames.clone()),
        })
        .collect()
}

fn stacked_windows(params: &ModelParams, frames: &[Matrix], rows: &[Vec<usize>]) -> Matrix {
    let c = params.config.context;
    let total: usize = rows.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(total * params.config.input_dim());
    for (f, r) in frames.iter().zip(rows) {
        data.extend(context_window(f, c, r).into_data());
    }
    Matrix::from_vec(total, params.config.input_dim(), data).unwrap_or_default()
}

/// Contrastive loss on the segment representatives of one batch. Returns
/// `None` (and no gradient) when the batch has no positive pair.
fn csl_batch_gradient(
    params: &ModelParams,
    batch: &MiniBatch,
    frames: &[Matrix],
    csl: &CslConfig,
    rng: &mut Rng,
    grad: &mut ModelParams,
) -> Result<Option<f64>> {
    let position: BTreeMap<usize, usize> = batch.utterances.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut rows = vec![Vec::new(); batch.utterances.len()];
    let mut labels: Vec<Vec<Label>> = vec![Vec::new(); batch.utterances.len()];
    for s in &batch.segments {
        let slot = position[&s.utterance_id];
        rows[slot].push(s.representative.unwrap_or(s.start));
        labels[slot].push(s.label);
    }
    let utterance_of: Vec<usize> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, r)| std::iter::repeat_n(batch.utterances[i], r.len()))
        .collect();
    let labels: Vec<Label> = labels.concat();
    if labels.len() < 2 {
        return Ok(None);
    }
    let trace = params.encode_windows(stacked_windows(params, frames, &rows))?;
    let z = trace.output();
    let proj = params.project_trace(z)?;
    // fully masked windows project to zero rows; they sit out the loss
    let zero = proj.normalized.zero_rows();
    let keep: Vec<usize> = (0..labels.len()).filter(|r| !zero.contains(r)).collect();
    let h = proj.output();
    let cb = ContrastiveBatch::new(
        Matrix::from_fn(keep.len(), h.cols(), |r, c| h.get(keep[r], c)),
        keep.iter().map(|&r| labels[r]).collect(),
        keep.iter().map(|&r| utterance_of[r]).collect(),
    )?;
    let result = match csl_loss(&cb, csl, rng) {
        Ok(r) => r,
        Err(Error::NoPositivePairs) => {
            log::warn!("contrastive batch without positive pairs skipped");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mut d_h = Matrix::zeros(h.rows(), h.cols());
    for (i, &r) in keep.iter().enumerate() {
        d_h.row_mut(r).copy_from_slice(result.gradient.row(i));
    }
    let dz = params.backward_projection(z, &proj, &d_h, grad)?;
    params.backward_encoder(&trace, &dz, grad)?;
    Ok(Some(result.value))
}

fn ce_batch_gradient(
    params: &ModelParams,
    corpus: &[Utterance],
    batch: &MiniBatch,
    frames: &[Matrix],
    grad: &mut ModelParams,
) -> Result<Option<f64>> {
    let targets: Vec<&[Label]> = batch.utterances.iter().map(|&u| corpus[u].pseudo_labels.as_slice()).collect();
    Ok(Some(ce_gradient(params, frames, &targets, grad)?))
}

/// Frame-level cross-entropy over whole utterances; accumulates the full
/// gradient (prediction head and encoder) into `grad`.
fn ce_gradient(params: &ModelParams, frames: &[Matrix], targets: &[&[Label]], grad: &mut ModelParams) -> Result<f64> {
    let rows: Vec<Vec<usize>> = frames.iter().map(|f| (0..f.rows()).collect()).collect();
    let trace = params.encode_windows(stacked_windows(params, frames, &rows))?;
    let z = trace.output();
    let logits = params.predict(z)?;
    let result = ce_loss(&logits, &targets.concat())?;
    let dz = params.backward_prediction(z, &result.gradient, grad)?;
    params.backward_encoder(&trace, &dz, grad)?;
    Ok(result.value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_utterances: usize,
    pub lr: f64,
    /// Epoch index from which the learning rate is multiplied by
    /// `decay_factor` once per epoch.
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: Option<f64>,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_utterances: 4,
            lr: 2e-3,
            decay_start_epoch: 40,
            decay_factor: 0.8,
            optimizer: OptimizerKind::adam(),
            clip_norm: Some(10.0),
            freeze_encoder: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_utterances == 0 {
            return Err(Error::config("batch_utterances", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config("decay_factor", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start_epoch {
            self.lr
        } else {
            self.lr * self.decay_factor.powi((epoch - self.decay_start_epoch + 1) as i32)
        }
    }
}

/// Supervised fine-tuning on true labels. The prediction head is
/// re-initialised (it replaces the projection head) and the whole network
/// is trained unless `freeze_encoder` is set.
pub fn finetune(params: &ModelParams, labeled: &[Utterance], config: &FinetuneConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::Empty("fine-tuning subset"));
    }
    let mut targets = Vec::with_capacity(labeled.len());
    for u in labeled {
        let t = u
            .true_labels
            .as_deref()
            .ok_or(Error::Empty("fine-tuning needs true labels"))?;
        if let Some(&bad) = t.iter().find(|&&y| y >= params.config.n_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: params.config.n_classes,
            });
        }
        targets.push(t);
    }
    let mut params = params.clone();
    params.reinit_prediction(&mut Rng::stream(config.seed, STREAM_HEAD));
    let mut opt = OptimizerState::new(config.optimizer, &params);
    let mut rng = Rng::stream(config.seed, STREAM_FINETUNE);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = config.lr_for_epoch(epoch);
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_utterances) {
            let frames: Vec<Matrix> = chunk.iter().map(|&i| labeled[i].frames.clone()).collect();
            let t: Vec<&[Label]> = chunk.iter().map(|&i| targets[i]).collect();
            let mut grad = params.zeros_like();
            let loss = ce_gradient(&params, &frames, &t, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite fine-tuning loss at step {step}")));
            }
            if config.freeze_encoder {
                for layer in &mut grad.encoder {
                    layer.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    layer.bias.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            if let Some(c) = config.clip_norm {
                clip_grad_norm(&mut grad, c);
            }
            if config.freeze_encoder {
                // only the head moves; the optimizer never touches the rest
                let mut head_only = params.clone();
                optimizer_step(&mut head_only, &grad, &mut opt, lr)?;
                params.prediction = head_only.prediction;
            } else {
                optimizer_step(&mut params, &grad, &mut opt, lr)?;
            }
            log.push(StepMetrics {
                step,
                lr,
                loss,
                loss_kind: LossKind::CePl,
            });
            step += 1;
        }
    }
    let mut ck = Checkpoint::new("finetune", params, opt, config_hash(config)?);
    ck.step = step;
    ck.total_steps = step;
    Ok(TrainOutcome { checkpoint: ck, log })
}

/// Fraction of frames whose argmax prediction differs from the true label.
pub fn evaluate(params: &ModelParams, test: &[Utterance]) -> Result<f64> {
    let (mut wrong, mut total) = (0usize, 0usize);
    for u in test {
        let truth = u
            .true_labels
            .as_ref()
            .ok_or(Error::Empty("evaluation needs true labels"))?;
        let pred = params.predict_labels(&u.frames)?;
        wrong += pred.iter().zip(truth).filter(|(a, b)| a != b).count();
        total += truth.len();
    }
    if total == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(wrong as f64 / total as f64)
}
