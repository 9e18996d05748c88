//! Contrastive (CSL) and frame-level cross-entropy objectives with exact
//! analytic gradients.
//!
//! For an anchor `i` with positive set `P(i)` and negative set `N(i)` the
//! contrastive term is
//!
//! ```text
//! ℓᵢ = 1/|P(i)| Σ_{p∈P(i)} −log( exp(hᵢ·h_p/τ) / Σ_{h∈N(i)∪{h_p}} exp(hᵢ·h/τ) )
//! ```
//!
//! and the batch loss averages `ℓᵢ` over the anchors whose positive set is
//! non-empty. Other positives are not part of the denominator.
//!
//! Gradients are taken with respect to the rows handed in; composing them
//! with the normalisation Jacobian is the model's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_in_place, Matrix, Rng};
use crate::segmentation::Label;

#[derive(Clone, Debug)]
pub struct ContrastiveBatch {
    embeddings: Matrix,
    labels: Vec<Label>,
    utterance_of: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Matrix, labels: Vec<Label>, utterance_of: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() || labels.len() != utterance_of.len() {
            return Err(Error::Shape(format!(
                "{} embeddings, {} labels, {} utterance ids",
                embeddings.rows(),
                labels.len(),
                utterance_of.len()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite);
        }
        if let Some(r) = embeddings
            .iter_rows()
            .position(|row| (norm(row) - 1.0).abs() > 1e-6)
        {
            return Err(Error::Shape(format!("embedding row {r} is not unit norm")));
        }
        Ok(Self {
            embeddings,
            labels,
            utterance_of,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn utterance_of(&self) -> &[usize] {
        &self.utterance_of
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Every other-label row; the negative cap is ignored.
    AllInBatch,
    /// Uniform over other-label rows of any utterance.
    RandomCrossUtterance,
    /// Other-label rows of the anchor's utterance, topped up from other
    /// utterances when there are fewer than the cap.
    SameUtterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CslConfig {
    pub temperature: f64,
    /// `None` means unlimited.
    pub positive_cap: Option<usize>,
    pub negative_cap: Option<usize>,
    pub negative_policy: NegativePolicy,
}

impl Default for CslConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            positive_cap: Some(8),
            negative_cap: Some(8),
            negative_policy: NegativePolicy::SameUtterance,
        }
    }
}

impl CslConfig {
    /// Every positive and every negative in the batch, at temperature `tau`.
    pub fn all_pairs(tau: f64) -> Self {
        Self {
            temperature: tau,
            positive_cap: None,
            negative_cap: None,
            negative_policy: NegativePolicy::AllInBatch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be a positive finite number"));
        }
        if self.positive_cap == Some(0) {
            return Err(Error::config("positive_cap", "must be at least 1"));
        }
        if self.negative_cap == Some(0) {
            return Err(Error::config("negative_cap", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Matrix,
    pub contributing_anchors: usize,
}

fn subsample(candidates: Vec<usize>, cap: Option<usize>, rng: &mut Rng) -> Vec<usize> {
    match cap {
        Some(c) if candidates.len() > c => {
            let mut picked: Vec<usize> = rng
                .sample_indices(candidates.len(), c)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => candidates,
    }
}

/// Rows sharing the anchor's label, excluding the anchor, subsampled to `cap`.
pub fn select_positives(
    anchor: usize,
    batch: &ContrastiveBatch,
    cap: Option<usize>,
    rng: &mut Rng,
) -> Vec<usize> {
    let label = batch.labels[anchor];
    let candidates = (0..batch.len())
        .filter(|&j| j != anchor && batch.labels[j] == label)
        .collect();
    subsample(candidates, cap, rng)
}

pub fn select_negatives(
    anchor: usize,
    batch: &ContrastiveBatch,
    config: &CslConfig,
    rng: &mut Rng,
) -> Vec<usize> {
    let label = batch.labels[anchor];
    let others = (0..batch.len()).filter(|&j| batch.labels[j] != label);
    match config.negative_policy {
        NegativePolicy::AllInBatch => others.collect(),
        NegativePolicy::RandomCrossUtterance => subsample(others.collect(), config.negative_cap, rng),
        NegativePolicy::SameUtterance => {
            let utt = batch.utterance_of[anchor];
            let (same, cross): (Vec<usize>, Vec<usize>) =
                others.partition(|&j| batch.utterance_of[j] == utt);
            let Some(cap) = config.negative_cap else {
                return same;
            };
            if same.len() >= cap {
                return subsample(same, Some(cap), rng);
            }
            let missing = cap - same.len();
            let mut out = same;
            out.extend(subsample(cross, Some(missing), rng));
            out.sort_unstable();
            out
        }
    }
}

/// Positive and negative index sets for one anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws the positive and negative sets for every anchor, in ascending
/// anchor order (positives first, then negatives). One negative set per
/// anchor is shared by all of its positive terms.
pub fn select_pairs(batch: &ContrastiveBatch, config: &CslConfig, rng: &mut Rng) -> Vec<AnchorPairs> {
    (0..batch.len())
        .map(|i| {
            let positives = select_positives(i, batch, config.positive_cap, rng);
            let negatives = if positives.is_empty() {
                Vec::new()
            } else {
                select_negatives(i, batch, config, rng)
            };
            AnchorPairs {
                positives,
                negatives,
            }
        })
        .collect()
}

/// Evaluates the contrastive loss and its gradient for fixed pair sets.
///
/// The rows need not be unit norm here; the loss only depends on dot
/// products, which makes this entry point usable for finite differences.
pub fn csl_loss_for_pairs(embeddings: &Matrix, pairs: &[AnchorPairs], tau: f64) -> Result<LossResult> {
    if pairs.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} pair sets for {} rows",
            pairs.len(),
            embeddings.rows()
        )));
    }
    let contributing = pairs.iter().filter(|p| !p.positives.is_empty()).count();
    if contributing == 0 {
        return Err(Error::NoPositivePairs);
    }
    let gram = embeddings.matmul_t(embeddings)?;
    let inv_tau = 1.0 / tau;
    let scale = 1.0 / contributing as f64;
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    let mut value = 0.0;

    // coefficient of each similarity s_ij in the loss, accumulated per anchor
    let mut coef: Vec<(usize, f64)> = Vec::new();
    for (i, anchor) in pairs.iter().enumerate() {
        if anchor.positives.is_empty() {
            continue;
        }
        let sim = gram.row(i);
        let shift = anchor
            .positives
            .iter()
            .chain(&anchor.negatives)
            .map(|&j| sim[j] * inv_tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_exp: Vec<f64> = anchor
            .negatives
            .iter()
            .map(|&n| (sim[n] * inv_tau - shift).exp())
            .collect();
        let neg_sum: f64 = neg_exp.iter().sum();
        let per_positive = scale / anchor.positives.len() as f64;

        coef.clear();
        let mut term = 0.0;
        let mut inv_denominators = 0.0;
        for &p in &anchor.positives {
            let pos_exp = (sim[p] * inv_tau - shift).exp();
            let denom = neg_sum + pos_exp;
            // ln(1 + Σ_n e^{s_n − s_p}) stays ≥ 0 under rounding
            let ratio = neg_sum / pos_exp;
            term += if ratio.is_finite() {
                ratio.ln_1p()
            } else {
                -(sim[p] * inv_tau - shift) + denom.ln()
            };
            inv_denominators += 1.0 / denom;
            // d/ds_ip of the p-term: (w_p − 1)/τ
            coef.push((p, per_positive * (pos_exp / denom - 1.0) * inv_tau));
        }
        for (&n, &e) in anchor.negatives.iter().zip(&neg_exp) {
            coef.push((n, per_positive * e * inv_denominators * inv_tau));
        }
        value += per_positive * term;

        for &(j, c) in &coef {
            for (g, h) in grad.row_mut(i).iter_mut().zip(embeddings.row(j)) {
                *g += c * h;
            }
            for (g, h) in grad.row_mut(j).iter_mut().zip(embeddings.row(i)) {
                *g += c * h;
            }
        }
    }
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Diverged("non-finite contrastive loss".into()));
    }
    Ok(LossResult {
        value,
        gradient: grad,
        contributing_anchors: contributing,
    })
}

pub fn csl_loss(batch: &ContrastiveBatch, config: &CslConfig, rng: &mut Rng) -> Result<LossResult> {
    config.validate()?;
    if batch.len() < 2 {
        return Err(Error::NoPositivePairs);
    }
    let pairs = select_pairs(batch, config, rng);
    csl_loss_for_pairs(&batch.embeddings, &pairs, config.temperature)
}

/// Mean frame-level cross-entropy over logits stacked across utterances
/// (`ΣTᵢ × K`), with its gradient with respect to the logits.
pub fn ce_loss(logits: &Matrix, targets: &[Label]) -> Result<LossResult> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross-entropy over zero frames"));
    }
    let k = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let inv_n = 1.0 / targets.len() as f64;
    let mut grad = logits.clone();
    let mut value = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = grad.row_mut(t);
        let raw = row[y];
        let log_z = softmax_in_place(row);
        value += log_z - raw;
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g *= inv_n);
    }
    value *= inv_n;
    if !value.is_finite() {
        return Err(Error::Diverged("non-finite cross-entropy".into()));
    }
    Ok(LossResult {
        value,
        gradient: grad,
        contributing_anchors: targets.len(),
    })
}

/// Mean cosine-style similarity between same-label and different-label rows.
pub fn label_similarity_gap(embeddings: &Matrix, labels: &[Label]) -> (f64, f64) {
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let s = dot(embeddings.row(i), embeddings.row(j));
            if labels[i] == labels[j] {
                same += s;
                ns += 1;
            } else {
                cross += s;
                nc += 1;
            }
        }
    }
    (same / ns.max(1) as f64, cross / nc.max(1) as f64)
}
