//! Evaluation: Hungarian assignment, clustering accuracy, and the split
//! accuracy report (known / novel / all).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("prediction/label length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Minimum-cost assignment by shortest augmenting paths, O(n^3).
/// Rectangular matrices are padded to square with a constant no better than
/// any real entry; rows assigned to padding come back as None.
pub fn hungarian_assign(cost: &Array2<f64>) -> Result<Vec<Option<usize>>, EvalError> {
    let (r, c) = cost.dim();
    if r == 0 || c == 0 {
        return Err(EvalError::Empty("cost matrix"));
    }
    let mut max_entry = f64::NEG_INFINITY;
    for ((i, j), &v) in cost.indexed_iter() {
        if !v.is_finite() {
            return Err(EvalError::NonFinite(i, j));
        }
        max_entry = max_entry.max(v);
    }
    let n = r.max(c);
    let pad = max_entry;
    let a = |i: usize, j: usize| -> f64 {
        if i < r && j < c {
            cost[(i, j)]
        } else {
            pad
        }
    };

    // p[j] holds the 1-based row assigned to 1-based column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut out = vec![None; r];
    for j in 1..=n {
        let row = p[j];
        if row >= 1 && row - 1 < r && j - 1 < c {
            out[row - 1] = Some(j - 1);
        }
    }
    Ok(out)
}

/// Fraction of samples whose predicted cluster maps onto their true class
/// under the best one-to-one cluster-to-class assignment. Cluster and class
/// ids must be dense in [0, k_pred) and [0, k_true).
pub fn clustering_accuracy(
    preds: &[usize],
    labels: &[usize],
    k_pred: usize,
    k_true: usize,
) -> Result<f64, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("clustering accuracy input"));
    }
    let mut counts = Array2::<f64>::zeros((k_pred.max(1), k_true.max(1)));
    for (&p, &l) in preds.iter().zip(labels) {
        counts[(p, l)] += 1.0;
    }
    let neg = counts.mapv(|x| -x);
    let assign = hungarian_assign(&neg)?;
    let mut matched = 0.0;
    for (cluster, col) in assign.iter().enumerate() {
        if let Some(class) = col {
            matched += counts[(cluster, *class)];
        }
    }
    Ok(matched / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Cluster novel samples over the argmax of all logits instead of just
    /// the novel block.
    pub novel_over_all_logits: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    /// Plain accuracy over samples whose hidden label is a known class;
    /// absent when the split has none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub known_acc: Option<f64>,
    /// Clustering accuracy over samples with novel hidden labels; absent
    /// when the split has none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novel_acc: Option<f64>,
    /// Clustering accuracy over every evaluated sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub all_acc: Option<f64>,
    pub n_known: usize,
    pub n_novel: usize,
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, v) in row.enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// The three-way accuracy report. `probs` rows are model outputs over
/// known-then-novel class columns (the model's novel width may differ from
/// the true novel class count); `labels` are the hidden labels;
/// `known_classes` is the shared known prefix.
pub fn report_metrics(
    probs: &Array2<f64>,
    labels: &[usize],
    known_classes: usize,
    cfg: &MetricsConfig,
) -> Result<MetricsReport, EvalError> {
    let n = probs.nrows();
    if n != labels.len() {
        return Err(EvalError::LengthMismatch(n, labels.len()));
    }
    if n == 0 {
        return Err(EvalError::Empty("metrics input"));
    }
    let c_total = probs.ncols();
    let preds: Vec<usize> = probs
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();

    let known_idx: Vec<usize> = (0..n).filter(|&i| labels[i] < known_classes).collect();
    let novel_idx: Vec<usize> = (0..n).filter(|&i| labels[i] >= known_classes).collect();

    let known_acc = if known_idx.is_empty() {
        None
    } else {
        let hits = known_idx.iter().filter(|&&i| preds[i] == labels[i]).count();
        Some(hits as f64 / known_idx.len() as f64)
    };

    let novel_acc = if novel_idx.is_empty() {
        None
    } else {
        let true_novel: Vec<usize> = novel_idx.iter().map(|&i| labels[i] - known_classes).collect();
        let k_true = true_novel.iter().max().unwrap() + 1;
        if cfg.novel_over_all_logits {
            let p: Vec<usize> = novel_idx.iter().map(|&i| preds[i]).collect();
            Some(clustering_accuracy(&p, &true_novel, c_total, k_true)?)
        } else {
            // predictions landing in the known block can never match; count
            // them against the denominator by restricting the contingency
            // table to novel-block predictions
            let in_block: Vec<usize> = novel_idx
                .iter()
                .filter(|&&i| preds[i] >= known_classes)
                .copied()
                .collect();
            if in_block.is_empty() {
                Some(0.0)
            } else {
                let p: Vec<usize> = in_block.iter().map(|&i| preds[i] - known_classes).collect();
                let l: Vec<usize> = in_block.iter().map(|&i| labels[i] - known_classes).collect();
                let matched =
                    clustering_accuracy(&p, &l, c_total - known_classes, k_true)? * p.len() as f64;
                Some(matched / novel_idx.len() as f64)
            }
        }
    };

    let k_true_all = labels.iter().max().unwrap() + 1;
    let all_acc = Some(clustering_accuracy(&preds, labels, c_total, k_true_all)?);

    Ok(MetricsReport {
        known_acc,
        novel_acc,
        all_acc,
        n_known: known_idx.len(),
        n_novel: novel_idx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &Array2<f64>) -> f64 {
        // try every injective row -> column map
        let (r, c) = cost.dim();
        fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            let (r, c) = cost.dim();
            if row == r {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            // a row may stay unassigned only when rows outnumber columns
            for j in 0..c {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[(row, j)], best);
                    used[j] = false;
                }
            }
            if r > c {
                rec(cost, row + 1, used, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; c], 0.0, &mut best);
        let _ = r;
        best
    }

    fn assign_cost(cost: &Array2<f64>, assign: &[Option<usize>]) -> f64 {
        assign
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost[(i, j)]))
            .sum()
    }

    #[test]
    fn matches_brute_force_on_random_square_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..200 {
            let k = rng.gen_range(1..=6);
            let cost = Array2::from_shape_fn((k, k), |_| rng.gen_range(-5.0..5.0));
            let assign = hungarian_assign(&cost).unwrap();
            let got = assign_cost(&cost, &assign);
            let want = brute_force_min(&cost);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn matches_brute_force_on_rectangular_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..200 {
            let r = rng.gen_range(1..=5);
            let c = rng.gen_range(1..=5);
            // shift negative so padded assignments can never help
            let cost = Array2::from_shape_fn((r, c), |_| rng.gen_range(-5.0..0.0));
            let assign = hungarian_assign(&cost).unwrap();
            let got = assign_cost(&cost, &assign);
            let want = brute_force_min(&cost);
            assert!((got - want).abs() < 1e-9, "trial {trial} ({r}x{c}): {got} vs {want}");
            let assigned: Vec<usize> = assign.iter().filter_map(|x| *x).collect();
            let mut dedup = assigned.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), assigned.len(), "column used twice");
        }
    }

    #[test]
    fn non_finite_cost_is_an_error() {
        let cost = array![[0.0, 1.0], [f64::NAN, 2.0]];
        assert!(matches!(hungarian_assign(&cost), Err(EvalError::NonFinite(1, 0))));
    }

    #[test]
    fn clustering_accuracy_perfect_under_relabeling() {
        // clusters are a permutation of the classes
        let labels = vec![0, 0, 1, 1, 2, 2];
        let preds = vec![2, 2, 0, 0, 1, 1];
        let acc = clustering_accuracy(&preds, &labels, 3, 3).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn clustering_accuracy_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 40;
            let k = 4;
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let base = clustering_accuracy(&preds, &labels, k, k).unwrap();
            // relabel clusters by a fixed permutation
            let perm = [2, 0, 3, 1];
            let renamed: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let again = clustering_accuracy(&renamed, &labels, k, k).unwrap();
            assert!((base - again).abs() < 1e-12);
        }
    }

    #[test]
    fn clustering_accuracy_with_more_clusters_than_classes() {
        let labels = vec![0, 0, 1, 1];
        let preds = vec![3, 3, 1, 1]; // 4 clusters, 2 classes
        let acc = clustering_accuracy(&preds, &labels, 4, 2).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(clustering_accuracy(&[], &[], 2, 2).is_err());
        assert!(report_metrics(&Array2::zeros((0, 4)), &[], 2, &MetricsConfig::default()).is_err());
    }

    #[test]
    fn report_separates_known_and_novel() {
        // 2 known classes, 2 novel; model output width 4
        // known rows predicted correctly; novel rows predicted as a
        // permutation of the novel block
        let probs = array![
            [0.9, 0.1, 0.0, 0.0], // label 0
            [0.1, 0.9, 0.0, 0.0], // label 1
            [0.0, 0.0, 0.1, 0.9], // label 2 -> cluster 1
            [0.0, 0.0, 0.2, 0.8], // label 2 -> cluster 1
            [0.0, 0.0, 0.9, 0.1], // label 3 -> cluster 0
            [0.0, 0.0, 0.8, 0.2], // label 3 -> cluster 0
        ];
        let labels = vec![0, 1, 2, 2, 3, 3];
        let r = report_metrics(&probs, &labels, 2, &MetricsConfig::default()).unwrap();
        assert_eq!(r.known_acc, Some(1.0));
        assert_eq!(r.novel_acc, Some(1.0));
        assert_eq!(r.all_acc, Some(1.0));
        assert_eq!((r.n_known, r.n_novel), (2, 4));
    }

    #[test]
    fn novel_predictions_in_known_block_count_wrong() {
        let probs = array![
            [0.9, 0.1, 0.0, 0.0], // label 2 but predicted known: wrong
            [0.0, 0.0, 0.1, 0.9], // label 2 -> cluster 1
            [0.0, 0.0, 0.9, 0.1], // label 3 -> cluster 0
            [0.0, 0.0, 0.8, 0.2], // label 3 -> cluster 0
        ];
        let labels = vec![2, 2, 3, 3];
        let r = report_metrics(&probs, &labels, 2, &MetricsConfig::default()).unwrap();
        assert_eq!(r.known_acc, None);
        assert_eq!(r.novel_acc, Some(0.75));

        // with clustering over all logits the known-block prediction forms
        // its own cluster and can be matched
        let cfg = MetricsConfig { novel_over_all_logits: true };
        let r2 = report_metrics(&probs, &labels, 2, &cfg).unwrap();
        assert!(r2.novel_acc.unwrap() >= 0.75);
    }

    #[test]
    fn all_known_split_has_no_novel_field() {
        let probs = array![[0.9, 0.1], [0.2, 0.8]];
        let labels = vec![0, 1];
        let r = report_metrics(&probs, &labels, 2, &MetricsConfig::default()).unwrap();
        assert!(r.novel_acc.is_none());
        assert_eq!(r.known_acc, Some(1.0));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("novel_acc").is_none());
    }

    #[test]
    fn novel_width_override_still_scores() {
        // model has 3 novel columns, ground truth only 2 novel classes
        let probs = array![
            [0.0, 0.0, 0.9, 0.05, 0.05], // label 2 -> cluster 0
            [0.0, 0.0, 0.1, 0.1, 0.8],   // label 3 -> cluster 2
            [0.0, 0.0, 0.1, 0.2, 0.7],   // label 3 -> cluster 2
        ];
        let labels = vec![2, 3, 3];
        let r = report_metrics(&probs, &labels, 2, &MetricsConfig::default()).unwrap();
        assert_eq!(r.novel_acc, Some(1.0));
    }
}
