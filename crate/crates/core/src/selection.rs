//! Pseudo-label selection: score tokens against a query and split the batch
//! into a positive set `I+` and negative set `I-`.
//!
//! The positive set is the top-k scoring tokens where k comes from the
//! strategy (the ground-truth count N, a fixed k, or N plus a slack term).
//! Ties break toward the lower index so every partition is reproducible.

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, ExpressionEmbedding, TokenBatch};
use crate::error::{Error, Result};

/// How many tokens the positive class receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionVariant {
    /// Exactly N, the ground-truth object count.
    TopN,
    /// A fixed number of high-similarity tokens, independent of N.
    TopFixed(usize),
    /// N plus floor(sqrt(N)) slack selections.
    TopNPlusSqrt,
    /// N plus floor(2 * log2(N)) slack selections.
    TopNPlusTwoLog,
}

/// A selection strategy: the variant plus the ground-truth count N it is
/// resolved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub variant: SelectionVariant,
    pub n_ground_truth: usize,
}

impl SelectionStrategy {
    pub fn new(variant: SelectionVariant, n_ground_truth: usize) -> Self {
        Self {
            variant,
            n_ground_truth,
        }
    }

    /// Same variant, different ground-truth count.
    pub fn with_n(self, n_ground_truth: usize) -> Self {
        Self {
            n_ground_truth,
            ..self
        }
    }
}

/// Resolve a strategy to its effective selection count k.
///
/// `TopNPlusTwoLog` returns N unchanged for N in {0, 1}, where the log term
/// is undefined or zero; floor rounding is used for both fractional slack
/// terms.
pub fn resolve(strategy: &SelectionStrategy) -> usize {
    let n = strategy.n_ground_truth;
    match strategy.variant {
        SelectionVariant::TopN => n,
        SelectionVariant::TopFixed(k) => k,
        SelectionVariant::TopNPlusSqrt => n + (n as f64).sqrt().floor() as usize,
        SelectionVariant::TopNPlusTwoLog => {
            if n < 2 {
                n
            } else {
                n + (2.0 * (n as f64).log2()).floor() as usize
            }
        }
    }
}

/// The (I+, I-) split of a batch, with the scores that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedBatch {
    /// Indices of the positive class, ascending.
    positives: Vec<usize>,
    /// Indices of the negative class, ascending.
    negatives: Vec<usize>,
    /// Per-token similarity scores, order-aligned with the batch.
    scores: Vec<f64>,
    /// The query the scores were computed against.
    query: ExpressionEmbedding,
}

impl PartitionedBatch {
    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn query(&self) -> &ExpressionEmbedding {
        &self.query
    }
}

/// Cosine score for every token against the query, order-aligned with the
/// batch.
pub fn score_batch(batch: &TokenBatch, query: &ExpressionEmbedding) -> Result<Vec<f64>> {
    batch
        .tokens()
        .iter()
        .map(|z| cosine_similarity(z, query))
        .collect()
}

/// Score the batch and assign the top-k tokens to the positive class.
///
/// k is `resolve(strategy)` clamped to the batch size. Ties break toward
/// the lower index.
pub fn select_positives(
    batch: &TokenBatch,
    query: &ExpressionEmbedding,
    strategy: &SelectionStrategy,
) -> Result<PartitionedBatch> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scores = score_batch(batch, query)?;
    let k = resolve(strategy).min(batch.len());

    let mut order: Vec<usize> = (0..batch.len()).collect();
    // Stable tie rule: higher score first, lower index wins among equals.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });

    let mut positives: Vec<usize> = order[..k].to_vec();
    let mut negatives: Vec<usize> = order[k..].to_vec();
    positives.sort_unstable();
    negatives.sort_unstable();

    Ok(PartitionedBatch {
        positives,
        negatives,
        scores,
        query: query.clone(),
    })
}

/// Fraction of the positive set whose `is_target` flag is true.
///
/// An empty positive set scores 1.0 by convention, so vacuous selections
/// never register as failures; callers that need to exclude them can test
/// `partition.positives().is_empty()`.
pub fn selection_accuracy(partition: &PartitionedBatch, batch: &TokenBatch) -> Result<f64> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    if partition.positives().is_empty() {
        return Ok(1.0);
    }
    let hits = partition
        .positives()
        .iter()
        .filter(|&&i| labels[i].is_target)
        .count();
    Ok(hits as f64 / partition.positives().len() as f64)
}

/// F1 of the selected set against the true target set (set membership, not
/// point matching). Conventions match [`crate::metrics::f1`]: all-empty
/// yields 1.0, zero denominators yield 0.0.
pub fn selection_f1(partition: &PartitionedBatch, batch: &TokenBatch) -> Result<f64> {
    let labels = batch.labels().ok_or(Error::MissingLabels)?;
    let tp = partition
        .positives()
        .iter()
        .filter(|&&i| labels[i].is_target)
        .count();
    let selected = partition.positives().len();
    let targets = labels.iter().filter(|l| l.is_target).count();
    if selected == 0 && targets == 0 {
        return Ok(1.0);
    }
    let fp = selected - tp;
    let fn_ = targets - tp;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{QueryKind, TokenEmbedding, TokenLabel};

    fn batch_from_rows(rows: &[Vec<f64>]) -> TokenBatch {
        let tokens = rows
            .iter()
            .map(|r| TokenEmbedding::new(r.clone()).unwrap())
            .collect();
        TokenBatch::new(tokens, None, "test").unwrap()
    }

    fn query(values: &[f64]) -> ExpressionEmbedding {
        ExpressionEmbedding::new(values.to_vec(), QueryKind::MaskedExpression).unwrap()
    }

    #[test]
    fn resolve_matches_definitions() {
        let s = |v, n| SelectionStrategy::new(v, n);
        assert_eq!(resolve(&s(SelectionVariant::TopN, 7)), 7);
        assert_eq!(resolve(&s(SelectionVariant::TopFixed(5), 99)), 5);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusSqrt, 9)), 12);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusSqrt, 0)), 0);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusSqrt, 1)), 2);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusTwoLog, 8)), 14);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusTwoLog, 0)), 0);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusTwoLog, 1)), 1);
        assert_eq!(resolve(&s(SelectionVariant::TopNPlusTwoLog, 2)), 4);
    }

    #[test]
    fn score_batch_single_token_equal_to_query() {
        let b = batch_from_rows(&[vec![0.6, 0.8]]);
        let q = query(&[0.6, 0.8]);
        let scores = score_batch(&b, &q).unwrap();
        assert_eq!(scores.len(), 1);
        assert!((scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_batch_orthogonal_tokens() {
        let b = batch_from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]);
        let q = query(&[1.0, 0.0]);
        for s in score_batch(&b, &q).unwrap() {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn score_batch_matches_per_token_cosine() {
        // Element-wise re-computation of the cosine for explicit 2-D tokens.
        let rows = vec![vec![2.0, 0.0], vec![1.0, 1.0], vec![-3.0, 4.0]];
        let b = batch_from_rows(&rows);
        let qv = [0.8, 0.6];
        let q = query(&qv);
        let scores = score_batch(&b, &q).unwrap();
        for (row, got) in rows.iter().zip(&scores) {
            let dot: f64 = row.iter().zip(&qv).map(|(a, b)| a * b).sum();
            let n1 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n2 = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((got - dot / (n1 * n2)).abs() < 1e-12);
        }
    }

    #[test]
    fn select_everything_and_nothing() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let q = query(&[1.0, 0.0]);
        let all = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 3))
            .unwrap();
        assert_eq!(all.positives(), &[0, 1, 2]);
        assert!(all.negatives().is_empty());

        let none = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 0))
            .unwrap();
        assert!(none.positives().is_empty());
        assert_eq!(none.negatives(), &[0, 1, 2]);
    }

    #[test]
    fn tie_breaks_to_lower_index() {
        // Scores come out as [0.9, 0.1, 0.8, 0.8] against the query below.
        let b = batch_from_rows(&[
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.1, (1.0f64 - 0.01).sqrt()],
            vec![0.8, 0.6],
            vec![0.8, 0.6],
        ]);
        let q = query(&[1.0, 0.0]);
        let p = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 2))
            .unwrap();
        assert_eq!(p.positives(), &[0, 2]);
        assert_eq!(p.negatives(), &[1, 3]);
    }

    #[test]
    fn count_clamped_to_batch_size() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = query(&[1.0, 0.0]);
        let p = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 10))
            .unwrap();
        assert_eq!(p.positives().len(), 2);
    }

    #[test]
    fn partition_scores_separate() {
        let b = batch_from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![-0.5, 0.5],
        ]);
        let q = query(&[1.0, 0.0]);
        let p = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 2))
            .unwrap();
        let min_pos = p
            .positives()
            .iter()
            .map(|&i| p.scores()[i])
            .fold(f64::INFINITY, f64::min);
        let max_neg = p
            .negatives()
            .iter()
            .map(|&i| p.scores()[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos >= max_neg);
    }

    fn labeled_batch(flags: &[bool]) -> TokenBatch {
        let tokens: Vec<TokenEmbedding> = (0..flags.len())
            .map(|i| {
                let angle = 0.1 * i as f64;
                TokenEmbedding::new(vec![angle.cos(), angle.sin()]).unwrap()
            })
            .collect();
        let labels = flags
            .iter()
            .map(|&t| TokenLabel {
                class: Some(0),
                attribute: Some(0),
                is_target: t,
            })
            .collect();
        TokenBatch::new(tokens, Some(labels), "test").unwrap()
    }

    #[test]
    fn accuracy_counts_target_fraction() {
        let b = labeled_batch(&[true, true, true, true, false, false]);
        let q = query(&[1.0, 0.0]);
        // Top-5 picks indices 0..=4: four targets out of five selected.
        let p = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 5))
            .unwrap();
        assert_eq!(p.positives(), &[0, 1, 2, 3, 4]);
        assert!((selection_accuracy(&p, &b).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn accuracy_conventions() {
        let b = labeled_batch(&[true, true]);
        let q = query(&[1.0, 0.0]);
        let p = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 2))
            .unwrap();
        assert_eq!(selection_accuracy(&p, &b).unwrap(), 1.0);

        let empty = select_positives(&b, &q, &SelectionStrategy::new(SelectionVariant::TopN, 0))
            .unwrap();
        assert_eq!(selection_accuracy(&empty, &b).unwrap(), 1.0);

        let unlabeled = batch_from_rows(&[vec![1.0, 0.0]]);
        let p2 = select_positives(
            &unlabeled,
            &q,
            &SelectionStrategy::new(SelectionVariant::TopN, 1),
        )
        .unwrap();
        assert_eq!(
            selection_accuracy(&p2, &unlabeled).unwrap_err(),
            Error::MissingLabels
        );
    }

    #[test]
    fn selection_f1_set_overlap() {
        let b = labeled_batch(&[true, true, true, false, false]);
        let q = query(&[1.0, 0.0]);
        // k=4 picks 0..=3: TP=3, FP=1, FN=0 -> F1 = 6/7.
        let p = select_positives(
            &b,
            &q,
            &SelectionStrategy::new(SelectionVariant::TopFixed(4), 3),
        )
        .unwrap();
        assert!((selection_f1(&p, &b).unwrap() - 6.0 / 7.0).abs() < 1e-12);
    }
}
