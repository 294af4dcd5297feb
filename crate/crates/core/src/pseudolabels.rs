//! Pseudo-label generation, per-class balancing, and rebuilding the
//! labeled/unlabeled partition around the selected samples.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlError {
    #[error("selected sample {0} is not in the unlabeled set")]
    NotUnlabeled(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum PlStage {
    /// Confidence-thresholded labels over all classes during discovery.
    Stage1,
    /// Novel-block argmax labels when rebuilding the labeled set.
    Stage2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PseudoLabel {
    pub sample_id: usize,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub stage: PlStage,
    /// The confidence threshold, when one applies.
    pub tau: Option<f64>,
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    /// Map row-indexed sample ids through a lookup, e.g. from batch row
    /// positions to dataset indices.
    pub fn relabel_ids(&mut self, ids: &[usize]) {
        for e in &mut self.entries {
            e.sample_id = ids[e.sample_id];
        }
    }
}

/// Discovery-stage pseudo-labels: keep a row when its max probability
/// strictly exceeds tau; the label is the argmax over all classes. Sample
/// ids are row indices.
pub fn gen_stage1_pl(probs: &Array2<f64>, tau: f64) -> PseudoLabelSet {
    let mut entries = Vec::new();
    for (r, row) in probs.rows().into_iter().enumerate() {
        let (label, conf) = argmax_row(row.iter().copied());
        if conf > tau {
            entries.push(PseudoLabel { sample_id: r, label, confidence: conf });
        }
    }
    PseudoLabelSet { stage: PlStage::Stage1, tau: Some(tau), entries }
}

/// Rebuild-time pseudo-labels: keep a row when its argmax over all classes
/// falls in the novel block (class index >= known_classes). No confidence
/// threshold; balancing happens separately.
pub fn gen_stage2_pl(probs: &Array2<f64>, known_classes: usize) -> PseudoLabelSet {
    let mut entries = Vec::new();
    for (r, row) in probs.rows().into_iter().enumerate() {
        let (label, conf) = argmax_row(row.iter().copied());
        if label >= known_classes {
            entries.push(PseudoLabel { sample_id: r, label, confidence: conf });
        }
    }
    PseudoLabelSet { stage: PlStage::Stage2, tau: None, entries }
}

fn argmax_row(row: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in row.enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    (best, best_v)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BalanceReport {
    /// Per-class quota actually used.
    pub k: usize,
    /// True when some class in the range received no candidates, forcing
    /// k = 0 and an empty selection.
    pub empty_class: bool,
}

/// Keep the k most confident candidates of each class in
/// [class_lo, class_hi), where k is the smallest per-class candidate count
/// (optionally capped by a ceiling). Confidence ties break toward the
/// smaller sample id. If any class in the range has no candidates the
/// selection is empty and the report says so.
pub fn topk_balance(
    set: &PseudoLabelSet,
    class_lo: usize,
    class_hi: usize,
    ceiling: Option<usize>,
) -> (PseudoLabelSet, BalanceReport) {
    let mut per_class: HashMap<usize, Vec<PseudoLabel>> = HashMap::new();
    for &e in &set.entries {
        if (class_lo..class_hi).contains(&e.label) {
            per_class.entry(e.label).or_default().push(e);
        }
    }
    let min_count = (class_lo..class_hi)
        .map(|c| per_class.get(&c).map_or(0, Vec::len))
        .min()
        .unwrap_or(0);
    let empty_class = min_count == 0 && class_lo < class_hi;
    let mut k = min_count;
    if let Some(c) = ceiling {
        k = k.min(c);
    }
    let mut selected = Vec::new();
    if k > 0 {
        for c in class_lo..class_hi {
            let cand = per_class.get_mut(&c).unwrap();
            cand.sort_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap()
                    .then(a.sample_id.cmp(&b.sample_id))
            });
            selected.extend_from_slice(&cand[..k]);
        }
        selected.sort_by_key(|e| e.sample_id);
    }
    (
        PseudoLabelSet { stage: set.stage, tau: set.tau, entries: selected },
        BalanceReport { k, empty_class },
    )
}

/// The rebuilt partition: the original labeled pairs plus the selected
/// pseudo-labeled samples, and the unlabeled list with those samples
/// removed. Always derived from the original split, never incrementally.
#[derive(Debug, Clone)]
pub struct RebuiltSets {
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

pub fn rebuild_sets(
    labeled: &[(usize, usize)],
    unlabeled: &[usize],
    selected: &PseudoLabelSet,
) -> Result<RebuiltSets, PlError> {
    let pool: std::collections::HashSet<usize> = unlabeled.iter().copied().collect();
    for e in &selected.entries {
        if !pool.contains(&e.sample_id) {
            return Err(PlError::NotUnlabeled(e.sample_id));
        }
    }
    let taken: std::collections::HashSet<usize> =
        selected.entries.iter().map(|e| e.sample_id).collect();
    let mut new_labeled = labeled.to_vec();
    new_labeled.extend(selected.entries.iter().map(|e| (e.sample_id, e.label)));
    new_labeled.sort();
    let new_unlabeled: Vec<usize> = unlabeled
        .iter()
        .copied()
        .filter(|i| !taken.contains(i))
        .collect();
    Ok(RebuiltSets { labeled: new_labeled, unlabeled: new_unlabeled })
}

/// Append one JSON line per entry to a pseudo-label manifest.
pub fn append_manifest<W: Write>(
    w: &mut W,
    epoch: usize,
    set: &PseudoLabelSet,
) -> Result<(), PlError> {
    #[derive(Serialize)]
    struct Line<'a> {
        epoch: usize,
        stage: &'a PlStage,
        sample_id: usize,
        label: usize,
        confidence: f64,
    }
    for e in &set.entries {
        let line = Line {
            epoch,
            stage: &set.stage,
            sample_id: e.sample_id,
            label: e.label,
            confidence: e.confidence,
        };
        serde_json::to_writer(&mut *w, &line).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}
