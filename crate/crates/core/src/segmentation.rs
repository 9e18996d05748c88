//! Maximal same-label runs of frame-level pseudo-labels.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

pub type Label = usize;

/// A maximal run `[start, end]` (inclusive) of one label inside one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub utterance_id: usize,
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub representative: Option<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn extract_segments(utterance_id: usize, pseudo_labels: &[Label]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=pseudo_labels.len() {
        if t == pseudo_labels.len() || pseudo_labels[t] != pseudo_labels[start] {
            out.push(Segment {
                utterance_id,
                start,
                end: t - 1,
                label: pseudo_labels[start],
                representative: None,
            });
            start = t;
        }
    }
    out
}

/// Inverse of [`extract_segments`].
pub fn expand(segments: &[Segment]) -> Vec<Label> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

/// Draws one representative frame per segment, uniformly over its span.
pub fn sample_representatives(segments: &[Segment], rng: &mut Rng) -> Vec<Segment> {
    segments
        .iter()
        .map(|s| Segment {
            representative: Some(rng.between(s.start, s.end)),
            ..*s
        })
        .collect()
}
