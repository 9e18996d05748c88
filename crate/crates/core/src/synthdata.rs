//! Synthetic "speech-like" corpora with ground-truth frame labels, a
//! simulated noisy teacher, and model-based re-labeling.
//!
//! Labels follow a first-order chain: stay with probability `p_stay`,
//! otherwise jump uniformly to one of the other classes, so segment lengths
//! are geometric with mean `1/(1 − p_stay)`. Each frame is its class mean
//! plus isotropic Gaussian noise.
//!
//! Corpus files are JSON lines. The first line is a header record, every
//! following line one utterance:
//!
//! ```text
//! {"record":"header","format":"csl-corpus","version":1,"config":{...},"class_means":[[...],...],"teacher":{...}|null}
//! {"record":"utterance","id":0,"frames":[[...],...],"true_labels":[...],"pseudo_labels":[...]}
//! ```
//!
//! `true_labels` is omitted when unknown.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{norm, Matrix, Rng};
use crate::segmentation::{extract_segments, Label};

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    pub frames: Matrix,
    pub true_labels: Option<Vec<Label>>,
    pub pseudo_labels: Vec<Label>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub class_mean_separation: f64,
    pub noise_sigma: f64,
    pub p_stay: f64,
    pub min_length: usize,
    pub max_length: usize,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            feature_dim: 8,
            class_mean_separation: 2.0,
            noise_sigma: 1.0,
            p_stay: 0.8,
            min_length: 30,
            max_length: 60,
            corpus_size: 500,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "needs at least 2 classes"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if !(self.p_stay > 0.0 && self.p_stay < 1.0) {
            return Err(Error::config("p_stay", "must lie strictly between 0 and 1"));
        }
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::config("min_length", "need 1 <= min_length <= max_length"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if !(self.class_mean_separation >= 0.0 && self.class_mean_separation.is_finite()) {
            return Err(Error::config("class_mean_separation", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherNoise {
    /// Probability that a whole true segment gets a wrong label.
    pub segment_substitution_rate: f64,
    pub boundary_jitter_max: usize,
    /// Independent per-frame flips, applied last. Stress-test option.
    pub frame_flip_rate: f64,
}

impl Default for TeacherNoise {
    fn default() -> Self {
        Self {
            segment_substitution_rate: 0.4,
            boundary_jitter_max: 1,
            frame_flip_rate: 0.0,
        }
    }
}

impl TeacherNoise {
    pub fn clean() -> Self {
        Self {
            segment_substitution_rate: 0.0,
            boundary_jitter_max: 0,
            frame_flip_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("segment_substitution_rate", self.segment_substitution_rate),
            ("frame_flip_rate", self.frame_flip_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// A generated corpus together with the class means it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub class_means: Matrix,
    pub teacher: Option<TeacherNoise>,
    pub utterances: Vec<Utterance>,
}

const MEAN_PLACEMENT_ATTEMPTS: usize = 10_000;

/// Places `K` class means with pairwise distance at least the configured
/// separation, by rejection sampling from an isotropic Gaussian whose typical
/// pairwise distance is 1.5× the separation.
pub fn place_class_means(config: &CorpusConfig, rng: &mut Rng) -> Result<Matrix> {
    let (k, f) = (config.n_classes, config.feature_dim);
    let sep = config.class_mean_separation;
    let scale = 1.5 * sep / (2.0 * f as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    'class: for _ in 0..k {
        for _ in 0..MEAN_PLACEMENT_ATTEMPTS {
            let cand: Vec<f64> = (0..f).map(|_| scale * rng.normal()).collect();
            let ok = means.iter().all(|m| {
                let d: Vec<f64> = m.iter().zip(&cand).map(|(a, b)| a - b).collect();
                norm(&d) >= sep
            });
            if ok {
                means.push(cand);
                continue 'class;
            }
        }
        return Err(Error::config(
            "class_mean_separation",
            format!(
                "could not place {k} means {sep} apart in {f} dimensions; lower the separation, \
                 raise feature_dim or reduce n_classes"
            ),
        ));
    }
    Matrix::from_rows(&means)
}

/// Generates split `split` of the corpus described by `config`. All splits
/// share the class means (drawn from `config.seed`); split 0 is the corpus
/// returned by [`generate_corpus`].
pub fn generate_split(config: &CorpusConfig, split: u64, size: usize) -> Result<Corpus> {
    config.validate()?;
    let mut mean_rng = Rng::stream(config.seed, 0);
    let class_means = place_class_means(config, &mut mean_rng)?;
    let mut rng = Rng::stream(config.seed, 1 + split);
    let k = config.n_classes;
    let utterances = (0..size)
        .map(|id| {
            let t = rng.between(config.min_length, config.max_length);
            let mut labels = Vec::with_capacity(t);
            let mut y = rng.below(k);
            for i in 0..t {
                if i > 0 && !rng.bernoulli(config.p_stay) {
                    y = (y + 1 + rng.below(k - 1)) % k;
                }
                labels.push(y);
            }
            let mut frames = Matrix::zeros(t, config.feature_dim);
            for (i, &y) in labels.iter().enumerate() {
                for (x, m) in frames.row_mut(i).iter_mut().zip(class_means.row(y)) {
                    *x = m + config.noise_sigma * rng.normal();
                }
            }
            Utterance {
                id,
                frames,
                pseudo_labels: labels.clone(),
                true_labels: Some(labels),
            }
        })
        .collect();
    Ok(Corpus {
        config: config.clone(),
        class_means,
        teacher: None,
        utterances,
    })
}

/// Generates `corpus_size` utterances. Pseudo-labels start equal to the
/// true labels until a teacher is applied.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    generate_split(config, 0, config.corpus_size)
}

/// Simulated teacher output for one utterance.
///
/// Each maximal true segment is relabelled with probability `ε` to a
/// uniformly chosen different class; then every internal boundary moves by
/// a uniform integer in `[−jitter, jitter]`, clamped so segments keep their
/// order and at least one frame.
pub fn corrupt_labels(
    true_labels: &[Label],
    n_classes: usize,
    noise: &TeacherNoise,
    rng: &mut Rng,
) -> Vec<Label> {
    let segments = extract_segments(0, true_labels);
    let labels: Vec<Label> = segments
        .iter()
        .map(|s| {
            if n_classes > 1 && rng.bernoulli(noise.segment_substitution_rate) {
                (s.label + 1 + rng.below(n_classes - 1)) % n_classes
            } else {
                s.label
            }
        })
        .collect();

    let mut starts: Vec<usize> = segments.iter().map(|s| s.start).collect();
    if noise.boundary_jitter_max > 0 {
        let j = noise.boundary_jitter_max as i64;
        for b in 1..starts.len() {
            let lo = starts[b - 1] as i64 + 1;
            let hi = segments[b].end as i64; // keeps the segment non-empty
            let moved = starts[b] as i64 + rng.between_i64(-j, j);
            starts[b] = moved.clamp(lo, hi) as usize;
        }
    }

    let mut out = Vec::with_capacity(true_labels.len());
    for (b, &label) in labels.iter().enumerate() {
        let end = starts.get(b + 1).copied().unwrap_or(true_labels.len());
        out.extend(std::iter::repeat_n(label, end - starts[b]));
    }
    if noise.frame_flip_rate > 0.0 && n_classes > 1 {
        for y in out.iter_mut() {
            if rng.bernoulli(noise.frame_flip_rate) {
                *y = (*y + 1 + rng.below(n_classes - 1)) % n_classes;
            }
        }
    }
    out
}

/// Replaces every utterance's pseudo-labels with simulated teacher output.
pub fn apply_teacher(corpus: &mut Corpus, noise: &TeacherNoise, rng: &mut Rng) -> Result<()> {
    noise.validate()?;
    let k = corpus.config.n_classes;
    for utt in &mut corpus.utterances {
        let truth = utt
            .true_labels
            .as_ref()
            .ok_or(Error::Empty("true labels needed to simulate a teacher"))?;
        utt.pseudo_labels = corrupt_labels(truth, k, noise, rng);
    }
    corpus.teacher = Some(noise.clone());
    Ok(())
}

/// Pseudo-labels every utterance with the model's per-frame argmax
/// (ties to the lowest class). True labels are left alone.
pub fn relabel(params: &ModelParams, utterances: &mut [Utterance]) -> Result<()> {
    for utt in utterances.iter_mut() {
        utt.pseudo_labels = params.predict_labels(&utt.frames)?;
    }
    Ok(())
}

/// Fraction of frames whose pseudo-label differs from the truth.
pub fn pseudo_label_error(utterances: &[Utterance]) -> Result<f64> {
    let (mut wrong, mut total) = (0usize, 0usize);
    for utt in utterances {
        let truth = utt
            .true_labels
            .as_ref()
            .ok_or(Error::Empty("true labels"))?;
        wrong += truth
            .iter()
            .zip(&utt.pseudo_labels)
            .filter(|(a, b)| a != b)
            .count();
        total += truth.len();
    }
    Ok(wrong as f64 / total.max(1) as f64)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        format: String,
        version: u32,
        config: CorpusConfig,
        class_means: Vec<Vec<f64>>,
        teacher: Option<TeacherNoise>,
    },
    Utterance {
        id: usize,
        frames: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        true_labels: Option<Vec<Label>>,
        pseudo_labels: Vec<Label>,
    },
}

pub const CORPUS_FORMAT: &str = "csl-corpus";
pub const CORPUS_VERSION: u32 = 1;

impl Corpus {
    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let header = Record::Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            config: self.config.clone(),
            class_means: self.class_means.to_rows(),
            teacher: self.teacher.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for u in &self.utterances {
            let rec = Record::Utterance {
                id: u.id,
                frames: u.frames.to_rows(),
                true_labels: u.true_labels.clone(),
                pseudo_labels: u.pseudo_labels.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("corpus file is empty".into()))??;
        let Record::Header {
            format,
            version,
            config,
            class_means,
            teacher,
        } = serde_json::from_str(&first)?
        else {
            return Err(Error::Format("first corpus record must be the header".into()));
        };
        if format != CORPUS_FORMAT || version != CORPUS_VERSION {
            return Err(Error::Format(format!("unsupported corpus format {format} v{version}")));
        }
        let class_means = Matrix::from_rows(&class_means)?;
        let mut utterances = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Record::Utterance {
                    id,
                    frames,
                    true_labels,
                    pseudo_labels,
                } => {
                    let frames = Matrix::from_rows(&frames)?;
                    if pseudo_labels.len() != frames.rows()
                        || true_labels.as_ref().is_some_and(|t| t.len() != frames.rows())
                    {
                        return Err(Error::Format(format!("utterance {id}: label length mismatch")));
                    }
                    let k = config.n_classes;
                    let labels = pseudo_labels.iter().chain(true_labels.iter().flatten());
                    if let Some(&bad) = labels.into_iter().find(|&&y| y >= k) {
                        return Err(Error::LabelOutOfRange { label: bad, classes: k });
                    }
                    utterances.push(Utterance {
                        id,
                        frames,
                        true_labels,
                        pseudo_labels,
                    });
                }
                Record::Header { .. } => {
                    return Err(Error::Format("duplicate corpus header".into()));
                }
            }
        }
        Ok(Self {
            config,
            class_means,
            teacher,
            utterances,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
