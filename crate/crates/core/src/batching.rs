//! Mini-batch construction: uniform random batches, Label-Aware Batching
//! (LAB), and gradient accumulation with linear learning-rate scaling.
//!
//! LAB grows a batch two utterances at a time. Each round it draws a label
//! `r` with probability proportional to `(1/C(r))^α`, where `C(k)` counts the
//! segments of label `k` already in the batch, then adds two not-yet-used
//! utterances containing `r`. Labels with `C = 0` have undefined weight;
//! while any exist they take absolute priority and are drawn uniformly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::segmentation::{extract_segments, sample_representatives, Label, Segment};
use crate::synthdata::Utterance;

/// Segment counts per label for a partially built batch (`C(k)`).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    counts: BTreeMap<Label, usize>,
}

impl LabelCounts {
    /// All inventory labels at zero.
    pub fn with_inventory(labels: impl IntoIterator<Item = Label>) -> Self {
        Self {
            counts: labels.into_iter().map(|l| (l, 0)).collect(),
        }
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (Label, usize)>) -> Self {
        Self {
            counts: counts.into_iter().collect(),
        }
    }

    pub fn add(&mut self, label: Label, n: usize) {
        *self.counts.entry(label).or_insert(0) += n;
    }

    pub fn get(&self, label: Label) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.counts.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Label draw distribution for one LAB round, in ascending label order.
pub fn lab_probability(counts: &LabelCounts, alpha: f64) -> Result<Vec<(Label, f64)>> {
    if counts.is_empty() {
        return Err(Error::Empty("label inventory"));
    }
    let any_zero = counts.counts.values().any(|&c| c == 0);
    let weights: Vec<(Label, f64)> = counts
        .counts
        .iter()
        .map(|(&l, &c)| {
            let w = match (any_zero, c) {
                (true, 0) => 1.0,
                (true, _) => 0.0,
                (false, c) => (1.0 / c as f64).powf(alpha),
            };
            (l, w)
        })
        .collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    Ok(weights.into_iter().map(|(l, w)| (l, w / total)).collect())
}

pub fn sample_label(probs: &[(Label, f64)], rng: &mut Rng) -> Label {
    let weights: Vec<f64> = probs.iter().map(|(_, p)| *p).collect();
    probs[rng.categorical(&weights)].0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub alpha: f64,
    pub max_utterances: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            max_utterances: 16,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Label → utterances inverted index over pseudo-labels, plus the segment
/// labels of every utterance.
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    by_label: BTreeMap<Label, Vec<usize>>,
    segment_labels: Vec<Vec<Label>>,
}

impl CorpusIndex {
    pub fn build(utterances: &[Utterance]) -> Self {
        let mut by_label: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        let mut segment_labels = Vec::with_capacity(utterances.len());
        for (u, utt) in utterances.iter().enumerate() {
            let labels: Vec<Label> = extract_segments(u, &utt.pseudo_labels)
                .iter()
                .map(|s| s.label)
                .collect();
            let mut distinct = labels.clone();
            distinct.sort_unstable();
            distinct.dedup();
            for l in distinct {
                by_label.entry(l).or_default().push(u);
            }
            segment_labels.push(labels);
        }
        Self {
            by_label,
            segment_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.segment_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_labels.is_empty()
    }

    pub fn inventory(&self) -> impl Iterator<Item = Label> + '_ {
        self.by_label.keys().copied()
    }

    pub fn utterances_with(&self, label: Label) -> &[usize] {
        self.by_label.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn segment_labels(&self, utterance: usize) -> &[Label] {
        &self.segment_labels[utterance]
    }
}

/// Utterance indices (into the corpus slice) and their segments with
/// representatives drawn.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MiniBatch {
    pub utterances: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl MiniBatch {
    pub fn from_utterances(corpus: &[Utterance], ids: Vec<usize>, rng: &mut Rng) -> Self {
        let mut segments = Vec::new();
        for &u in &ids {
            let segs = extract_segments(u, &corpus[u].pseudo_labels);
            segments.extend(sample_representatives(&segs, rng));
        }
        Self {
            utterances: ids,
            segments,
        }
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for s in &self.segments {
            c.add(s.label, 1);
        }
        c
    }
}

fn whole_corpus(n: usize, max: usize) -> Option<Vec<usize>> {
    if n <= max {
        if n < max {
            log::warn!("corpus has {n} utterances, fewer than max_utterances={max}; using all of them");
        }
        Some((0..n).collect())
    } else {
        None
    }
}

pub fn build_random_batch(corpus: &[Utterance], max_utterances: usize, rng: &mut Rng) -> MiniBatch {
    let ids = whole_corpus(corpus.len(), max_utterances)
        .unwrap_or_else(|| rng.sample_indices(corpus.len(), max_utterances));
    MiniBatch::from_utterances(corpus, ids, rng)
}

/// Utterance selection of one LAB batch, without representatives.
pub fn lab_select(index: &CorpusIndex, config: &LabConfig, rng: &mut Rng) -> Result<Vec<usize>> {
    config.validate()?;
    let n = index.len();
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    if let Some(all) = whole_corpus(n, config.max_utterances) {
        return Ok(all);
    }
    let mut counts = LabelCounts::with_inventory(index.inventory());
    let mut added = vec![false; n];
    let mut batch = Vec::with_capacity(config.max_utterances);

    while batch.len() < config.max_utterances {
        let probs = lab_probability(&counts, config.alpha)?;
        let rare = sample_label(&probs, rng);
        let candidates: Vec<usize> = index
            .utterances_with(rare)
            .iter()
            .copied()
            .filter(|&u| !added[u])
            .collect();
        let mut picks: Vec<usize> = match candidates.len() {
            0 => Vec::new(),
            1 => vec![candidates[0]],
            m => rng.sample_indices(m, 2).into_iter().map(|i| candidates[i]).collect(),
        };
        // top up with uniformly random unused utterances so growth never stalls
        while picks.len() < 2 {
            let free: Vec<usize> = (0..n).filter(|&u| !added[u] && !picks.contains(&u)).collect();
            if free.is_empty() {
                break;
            }
            picks.push(free[rng.below(free.len())]);
        }
        for u in picks {
            if batch.len() == config.max_utterances {
                break;
            }
            added[u] = true;
            batch.push(u);
            for &l in index.segment_labels(u) {
                counts.add(l, 1);
            }
        }
    }
    Ok(batch)
}

pub fn build_lab_batch(
    corpus: &[Utterance],
    index: &CorpusIndex,
    config: &LabConfig,
    rng: &mut Rng,
) -> Result<MiniBatch> {
    let ids = lab_select(index, config, rng)?;
    Ok(MiniBatch::from_utterances(corpus, ids, rng))
}

/// Anything that can be summed and scaled as a gradient.
pub trait Gradient: Clone {
    fn add_assign(&mut self, other: &Self);
    fn scale(&mut self, factor: f64);
}

impl Gradient for Vec<f64> {
    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b;
        }
    }

    fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Averages the gradients of `steps` consecutive mini-batches into one
/// update applied at `steps ×` the scheduled learning rate.
#[derive(Clone, Debug)]
pub struct GradientAccumulator<G> {
    steps: usize,
    pending: Option<G>,
    seen: usize,
}

impl<G: Gradient> GradientAccumulator<G> {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("accumulation_steps", "must be at least 1"));
        }
        Ok(Self {
            steps,
            pending: None,
            seen: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scaled_lr(&self, base_lr: f64) -> f64 {
        base_lr * self.steps as f64
    }

    /// Adds one mini-batch gradient; returns the mean once `steps` are in.
    pub fn push(&mut self, grad: G) -> Option<G> {
        match &mut self.pending {
            Some(p) => p.add_assign(&grad),
            None => self.pending = Some(grad),
        }
        self.seen += 1;
        if self.seen < self.steps {
            return None;
        }
        self.seen = 0;
        let mut mean = self.pending.take()?;
        mean.scale(1.0 / self.steps as f64);
        Some(mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn utt(id: usize, labels: Vec<Label>) -> Utterance {
        Utterance {
            id,
            frames: Matrix::zeros(labels.len(), 1),
            true_labels: None,
            pseudo_labels: labels,
        }
    }

    fn probs_of(p: &[(Label, f64)]) -> Vec<f64> {
        p.iter().map(|(_, v)| *v).collect()
    }

    #[test]
    fn lab_probability_examples() {
        let p = lab_probability(&LabelCounts::from_counts([(0, 1), (1, 2)]), 2.0).unwrap();
        let v = probs_of(&p);
        assert!((v[0] - 0.8).abs() < 1e-12 && (v[1] - 0.2).abs() < 1e-12);

        for alpha in [0.5, 1.0, 2.0, 7.0] {
            let p = lab_probability(&LabelCounts::from_counts([(0, 3), (1, 3), (2, 3)]), alpha).unwrap();
            assert!(probs_of(&p).iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        }

        let p = lab_probability(&LabelCounts::from_counts([(0, 0), (1, 0), (2, 5)]), 2.0).unwrap();
        assert_eq!(probs_of(&p), vec![0.5, 0.5, 0.0]);

        assert!(lab_probability(&LabelCounts::default(), 2.0).is_err());
    }

    #[test]
    fn lab_probability_rarity_monotone() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let counts: Vec<(Label, usize)> = (0..8).map(|l| (l, 1 + rng.below(30))).collect();
            let p = lab_probability(&LabelCounts::from_counts(counts.clone()), 2.0).unwrap();
            let sum: f64 = probs_of(&p).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for (a, pa) in counts.iter().zip(&p) {
                for (b, pb) in counts.iter().zip(&p) {
                    if a.1 < b.1 {
                        assert!(pa.1 > pb.1);
                    }
                }
            }
        }
    }

    #[test]
    fn small_corpora() {
        let corpus = vec![utt(0, vec![0, 0, 1]), utt(1, vec![1, 2])];
        let index = CorpusIndex::build(&corpus);
        let mut rng = Rng::new(0);
        let cfg = LabConfig {
            max_utterances: 0,
            ..LabConfig::default()
        };
        assert!(build_lab_batch(&corpus, &index, &cfg, &mut rng).unwrap().utterances.is_empty());
        let cfg = LabConfig {
            max_utterances: 2,
            ..LabConfig::default()
        };
        let mut b = build_lab_batch(&corpus, &index, &cfg, &mut rng).unwrap().utterances;
        b.sort_unstable();
        assert_eq!(b, vec![0, 1]);
        // corpus smaller than the batch
        let cfg = LabConfig {
            max_utterances: 5,
            ..LabConfig::default()
        };
        assert_eq!(build_lab_batch(&corpus, &index, &cfg, &mut rng).unwrap().utterances.len(), 2);
    }

    #[test]
    fn lab_never_duplicates_and_reaches_size() {
        let mut rng = Rng::new(5);
        let corpus: Vec<Utterance> = (0..40)
            .map(|i| utt(i, (0..12).map(|_| rng.below(6)).collect()))
            .collect();
        let index = CorpusIndex::build(&corpus);
        for max in [1, 2, 3, 7, 16] {
            let cfg = LabConfig { alpha: 2.0, max_utterances: max };
            let b = build_lab_batch(&corpus, &index, &cfg, &mut rng).unwrap();
            let mut ids = b.utterances.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), max);
            assert!(b.segments.iter().all(|s| b.utterances.contains(&s.utterance_id)));
            assert!(b.segments.iter().all(|s| s.representative.is_some()));
        }
    }

    #[test]
    fn random_batch_basics() {
        let corpus: Vec<Utterance> = (0..10).map(|i| utt(i, vec![i % 3])).collect();
        let b = build_random_batch(&corpus, 1, &mut Rng::new(3));
        assert_eq!(b.utterances.len(), 1);
        let a = build_random_batch(&corpus, 4, &mut Rng::new(3));
        let c = build_random_batch(&corpus, 4, &mut Rng::new(3));
        assert_eq!(a, c);
    }

    #[test]
    fn random_batch_selection_rate() {
        let n_corpus = 10;
        let max = 3;
        let corpus: Vec<Utterance> = (0..n_corpus).map(|i| utt(i, vec![0])).collect();
        let mut rng = Rng::new(77);
        let draws = 100_000;
        let mut hits = vec![0usize; n_corpus];
        for _ in 0..draws {
            for u in build_random_batch(&corpus, max, &mut rng).utterances {
                hits[u] += 1;
            }
        }
        let p = max as f64 / n_corpus as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{h}");
        }
    }

    #[test]
    fn accumulation_identity_and_mean() {
        let mut acc = GradientAccumulator::new(1).unwrap();
        assert_eq!(acc.push(vec![1.0, 2.0]), Some(vec![1.0, 2.0]));
        assert_eq!(acc.scaled_lr(0.1), 0.1);

        let mut acc = GradientAccumulator::new(2).unwrap();
        assert_eq!(acc.push(vec![1.0, 4.0]), None);
        assert_eq!(acc.push(vec![3.0, 0.0]), Some(vec![2.0, 2.0]));

        let mut acc = GradientAccumulator::new(4).unwrap();
        let g = vec![0.5, -1.5];
        let mut out = None;
        for _ in 0..4 {
            out = acc.push(g.clone());
        }
        let mean = out.unwrap();
        let lr = acc.scaled_lr(0.01);
        let delta: Vec<f64> = mean.iter().map(|m| -lr * m).collect();
        let single: Vec<f64> = g.iter().map(|x| -0.04 * x).collect();
        for (a, b) in delta.iter().zip(&single) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(GradientAccumulator::<Vec<f64>>::new(0).is_err());
    }
}
