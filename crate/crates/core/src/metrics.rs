//! Counting and localization evaluation: MAE, RMSE, point-matching
//! precision/recall/F1, and grouped breakdowns.
//!
//! Point matching solves the optimal one-to-one assignment between predicted
//! and ground-truth points over the bipartite graph of pairs within the
//! distance threshold, so the reported true-positive count is the maximum
//! achievable (greedy matching can under-count).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Point;

/// One (ground truth, predicted) count observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountPair {
    pub ground_truth: u64,
    pub predicted: u64,
    pub instance_id: String,
    pub attribute_category: Option<String>,
}

impl CountPair {
    /// Count-range bin label, derived from the ground-truth count.
    pub fn count_bin(&self) -> &'static str {
        match self.ground_truth {
            0..=20 => "0-20",
            21..=50 => "21-50",
            51..=100 => "51-100",
            _ => "100+",
        }
    }
}

/// Mean absolute error over count pairs.
pub fn mae(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = pairs
        .iter()
        .map(|p| (p.ground_truth as f64 - p.predicted as f64).abs())
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Root mean squared error over count pairs.
pub fn rmse(pairs: &[CountPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let d = p.ground_truth as f64 - p.predicted as f64;
            d * d
        })
        .sum();
    Ok((total / pairs.len() as f64).sqrt())
}

/// Outcome of matching predicted points against ground-truth points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMatchResult {
    /// (prediction index, ground-truth index, Euclidean distance) triples.
    pub matched: Vec<(usize, usize, f64)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

fn euclidean(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Minimum-cost assignment on a square cost matrix (row-major), returning
/// the column assigned to each row. Jonker-Volgenant style augmenting-path
/// algorithm with row/column potentials, O(n^3).
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[col] = row currently matched to the column; index n is the sentinel.
    let mut p = vec![n; n + 1];
    let mut way = vec![n; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[i0 * n + j] - u[i0] - v[j];
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
            if p[j0] == n {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut row_to_col = vec![n; n];
    for j in 0..n {
        if p[j] != n {
            row_to_col[p[j]] = j;
        }
    }
    row_to_col
}

/// Optimal one-to-one matching between predictions and ground truths.
///
/// Only pairs with Euclidean distance <= `threshold` are eligible. The
/// solver pads the cost matrix to a square with a cost larger than any
/// feasible total, so the result maximizes matched count first and
/// minimizes total distance among maximum matchings. Empty inputs yield
/// empty matches.
pub fn match_points(
    predictions: &[Point],
    ground_truth: &[Point],
    threshold: f64,
) -> Result<PointMatchResult> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "match threshold must be a positive real, got {threshold}"
        )));
    }
    for p in predictions.iter().chain(ground_truth) {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinite);
        }
    }

    let np = predictions.len();
    let ng = ground_truth.len();
    if np == 0 || ng == 0 {
        return Ok(PointMatchResult {
            matched: Vec::new(),
            unmatched_predictions: (0..np).collect(),
            unmatched_ground_truths: (0..ng).collect(),
        });
    }

    let n = np.max(ng);
    // One infeasible edge costs more than every feasible edge combined, so
    // the minimum-cost solution never trades a match away.
    let big = (np + ng + 1) as f64 * (threshold + 1.0);
    let mut cost = vec![big; n * n];
    for (i, p) in predictions.iter().enumerate() {
        for (j, g) in ground_truth.iter().enumerate() {
            let d = euclidean(p, g);
            if d <= threshold {
                cost[i * n + j] = d;
            }
        }
    }

    let row_to_col = solve_assignment(&cost, n);
    let mut matched = Vec::new();
    let mut unmatched_predictions = Vec::new();
    let mut matched_gt = vec![false; ng];
    for (i, pred) in predictions.iter().enumerate() {
        let j = row_to_col[i];
        if j < ng && cost[i * n + j] < big {
            matched.push((i, j, euclidean(pred, &ground_truth[j])));
            matched_gt[j] = true;
        } else {
            unmatched_predictions.push(i);
        }
    }
    let unmatched_ground_truths = (0..ng).filter(|&j| !matched_gt[j]).collect();
    Ok(PointMatchResult {
        matched,
        unmatched_predictions,
        unmatched_ground_truths,
    })
}

/// Precision, recall, and F1 derived from a match result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision / recall / F1 from raw match counts.
///
/// Zero denominators yield 0.0, except the all-empty case (no predictions
/// and no ground truth), which scores (1, 1, 1) so a correct "zero objects"
/// prediction is perfect.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> F1Score {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return F1Score {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    F1Score {
        precision,
        recall,
        f1,
    }
}

/// Precision / recall / F1 of a point-match result.
pub fn f1(result: &PointMatchResult) -> F1Score {
    f1_from_counts(
        result.matched.len(),
        result.unmatched_predictions.len(),
        result.unmatched_ground_truths.len(),
    )
}

/// How to group count pairs for a breakdown table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    CountRange,
    AttributeCategory,
}

/// One row of a grouped MAE/RMSE report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

/// Per-group MAE/RMSE with sample counts. Count-range bins are fixed at
/// 0-20, 21-50, 51-100, 100+ and reported in that order; attribute
/// categories are reported alphabetically. Empty groups are omitted.
pub fn grouped_report(pairs: &[CountPair], grouping: Grouping) -> Result<Vec<GroupRow>> {
    let mut keys: Vec<String> = Vec::new();
    let mut labels: Vec<String> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let label = match grouping {
            Grouping::CountRange => pair.count_bin().to_string(),
            Grouping::AttributeCategory => {
                pair.attribute_category
                    .clone()
                    .ok_or_else(|| Error::MissingCategory {
                        instance_id: pair.instance_id.clone(),
                    })?
            }
        };
        if !keys.contains(&label) {
            keys.push(label.clone());
        }
        labels.push(label);
    }
    match grouping {
        Grouping::CountRange => {
            let order = ["0-20", "21-50", "51-100", "100+"];
            keys.sort_by_key(|k| order.iter().position(|o| o == k).unwrap_or(order.len()));
        }
        Grouping::AttributeCategory => keys.sort(),
    }

    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        let subset: Vec<CountPair> = pairs
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == key)
            .map(|(p, _)| p.clone())
            .collect();
        rows.push(GroupRow {
            group: key,
            mae: mae(&subset)?,
            rmse: rmse(&subset)?,
            n: subset.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(gt: u64, pred: u64) -> CountPair {
        CountPair {
            ground_truth: gt,
            predicted: pred,
            instance_id: format!("{gt}-{pred}"),
            attribute_category: None,
        }
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[pair(3, 3), pair(9, 9)]).unwrap(), 0.0);
        assert_eq!(mae(&[pair(10, 12), pair(5, 5)]).unwrap(), 1.0);
        assert_eq!(mae(&[pair(0, 7)]).unwrap(), 7.0);
        assert_eq!(mae(&[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[pair(3, 3), pair(9, 9)]).unwrap(), 0.0);
        assert!((rmse(&[pair(10, 12), pair(5, 5)]).unwrap() - 2.0f64.sqrt()).abs() < 1e-12);
        // Identical error magnitudes collapse to that magnitude.
        assert!((rmse(&[pair(10, 13), pair(4, 1)]).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(rmse(&[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn match_exact_points() {
        let pts = vec![[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]];
        let m = match_points(&pts, &pts, 0.5).unwrap();
        assert_eq!(m.matched.len(), 3);
        assert!(m.matched.iter().all(|&(_, _, d)| d == 0.0));
        assert!(m.unmatched_predictions.is_empty());
        assert!(m.unmatched_ground_truths.is_empty());
    }

    #[test]
    fn one_prediction_two_candidates() {
        // Equidistant within threshold to both ground truths: exactly one match.
        let m = match_points(&[[0.0, 0.0]], &[[0.0, 1.0], [0.0, -1.0]], 2.0).unwrap();
        assert_eq!(m.matched.len(), 1);
        assert_eq!(m.unmatched_ground_truths.len(), 1);
    }

    #[test]
    fn optimal_beats_greedy() {
        // Greedy on the closest pair (p0-g0 at 1.0) would leave p1 unmatched;
        // the optimal solution matches both.
        let preds = vec![[0.0, 0.0], [2.0, 0.0]];
        let gts = vec![[1.0, 0.0], [-1.5, 0.0]];
        let m = match_points(&preds, &gts, 1.6).unwrap();
        assert_eq!(m.matched.len(), 2);
    }

    #[test]
    fn constructed_grid_matches_exhaustive_argmin() {
        // Distances chosen so the unique optimum is p0-g1, p1-g2, p2-g0.
        let preds = vec![[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]];
        let gts = vec![[20.0, 0.3], [0.0, 0.1], [10.0, 0.2]];
        let m = match_points(&preds, &gts, 30.0).unwrap();
        let mut pairs: Vec<(usize, usize)> = m.matched.iter().map(|&(p, g, _)| (p, g)).collect();
        pairs.sort_unstable();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn cardinality_conservation() {
        let preds = vec![[0.0, 0.0], [1.0, 1.0], [50.0, 50.0]];
        let gts = vec![[0.2, 0.0], [30.0, 30.0]];
        let m = match_points(&preds, &gts, 1.0).unwrap();
        assert_eq!(m.matched.len() + m.unmatched_predictions.len(), preds.len());
        assert_eq!(m.matched.len() + m.unmatched_ground_truths.len(), gts.len());
    }

    #[test]
    fn empty_inputs_allowed() {
        let m = match_points(&[], &[[1.0, 1.0]], 1.0).unwrap();
        assert!(m.matched.is_empty());
        assert_eq!(m.unmatched_ground_truths, vec![0]);
    }

    #[test]
    fn f1_examples() {
        let all = PointMatchResult {
            matched: vec![(0, 0, 0.1)],
            unmatched_predictions: vec![],
            unmatched_ground_truths: vec![],
        };
        let s = f1(&all);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        // TP=3, FP=1, FN=3.
        let mixed = PointMatchResult {
            matched: vec![(0, 0, 0.0), (1, 1, 0.0), (2, 2, 0.0)],
            unmatched_predictions: vec![3],
            unmatched_ground_truths: vec![3, 4, 5],
        };
        let s = f1(&mixed);
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 0.6).abs() < 1e-12);

        let none = PointMatchResult {
            matched: vec![],
            unmatched_predictions: vec![],
            unmatched_ground_truths: vec![0, 1],
        };
        let s = f1(&none);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));

        let empty = PointMatchResult {
            matched: vec![],
            unmatched_predictions: vec![],
            unmatched_ground_truths: vec![],
        };
        let s = f1(&empty);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn grouped_by_count_range() {
        let pairs = vec![pair(5, 7), pair(18, 18), pair(30, 25), pair(120, 100)];
        let rows = grouped_report(&pairs, Grouping::CountRange).unwrap();
        let groups: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(groups, vec!["0-20", "21-50", "100+"]);
        // Per-bin values equal recomputation on the subset.
        assert_eq!(rows[0].n, 2);
        assert_eq!(rows[0].mae, mae(&pairs[..2]).unwrap());
        assert_eq!(rows[1].mae, 5.0);
        assert_eq!(rows[2].rmse, 20.0);
    }

    #[test]
    fn grouped_single_bin_equals_global() {
        let pairs = vec![pair(1, 2), pair(3, 3), pair(10, 6)];
        let rows = grouped_report(&pairs, Grouping::CountRange).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].mae, mae(&pairs).unwrap());
        assert_eq!(rows[0].rmse, rmse(&pairs).unwrap());
    }

    #[test]
    fn grouped_by_attribute_requires_categories() {
        let mut a = pair(1, 1);
        a.attribute_category = Some("color".into());
        let b = pair(2, 2);
        let err = grouped_report(&[a.clone(), b], Grouping::AttributeCategory).unwrap_err();
        assert!(matches!(err, Error::MissingCategory { .. }));

        let mut c = pair(4, 6);
        c.attribute_category = Some("action".into());
        let rows = grouped_report(&[a, c], Grouping::AttributeCategory).unwrap();
        let groups: Vec<&str> = rows.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(groups, vec!["action", "color"]);
    }
}
