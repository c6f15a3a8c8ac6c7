//! Contrastive and detection losses with hand-derived analytic gradients.
//!
//! Two contrastive objectives are implemented over a token batch:
//!
//! * [`sup_con_loss`] — the supervised contrastive loss with arbitrary
//!   per-anchor positive sets P(i):
//!   `sum_i -log( (1/|P(i)|) sum_{p in P(i)} exp(z_i.z_p/tau) /
//!   sum_{a != i} exp(z_i.z_a/tau) )`.
//! * [`modified_sup_con_loss`] — the positives-only-anchor variant that sums
//!   the same term over anchors in I+ with P(i) = I+ \ {i}, so heterogeneous
//!   negatives are never pulled toward one another.
//!
//! Detection training is covered by [`loc_loss`] (mean L1 distance between
//! assigned point pairs) and [`cls_loss`] (mean cross-entropy), and the three
//! are combined by [`composite_loss`] as a weighted sum.
//!
//! Gradients are exact partial derivatives of the returned value with respect
//! to the raw inputs. When `normalize_inputs` is set, the contrastive losses
//! L2-normalize embeddings internally and the gradient includes the
//! normalization Jacobian, so central finite differences on the raw values
//! reproduce it; [`finite_difference_gradient`] is the oracle used by the
//! test suite to verify that.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_norm, normalize, TokenBatch};
use crate::error::{Error, Result};
use crate::selection::PartitionedBatch;
use crate::Point;

/// Weights and temperature for the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Contrastive temperature tau.
    pub temperature: f64,
    /// Weight on the localization loss.
    pub lambda_loc: f64,
    /// Weight on the classification loss.
    pub lambda_cls: f64,
    /// Weight on the contrastive loss.
    pub lambda_c: f64,
    /// Normalize embeddings inside the contrastive losses (cosine logits).
    /// When false, raw dot products are used.
    pub normalize_inputs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lambda_loc: 1.0,
            lambda_cls: 5.0,
            lambda_c: 0.005,
            normalize_inputs: true,
        }
    }
}

impl LossConfig {
    /// Check the invariants: tau > 0, all lambdas >= 0 and finite.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::TemperatureNonPositive(self.temperature));
        }
        for (name, l) in [
            ("lambda_loc", self.lambda_loc),
            ("lambda_cls", self.lambda_cls),
            ("lambda_c", self.lambda_c),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative real, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// A scalar loss value with the exact gradient for every input row.
///
/// `anchors_used` counts the terms actually summed: anchors with non-empty
/// positive sets for the contrastive losses, assigned pairs for the
/// localization loss, and tokens for the classification loss. A report with
/// `anchors_used == 0` is the documented vacuous case (value 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub gradients: Vec<Vec<f64>>,
    pub anchors_used: usize,
}

impl LossReport {
    /// A zero-valued report with zero gradients of the given shape.
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            gradients: vec![vec![0.0; dim]; rows],
            anchors_used: 0,
        }
    }
}

fn validate_positive_sets(n: usize, positive_sets: &[Vec<usize>]) -> Result<()> {
    if positive_sets.len() != n {
        return Err(Error::LabelLengthMismatch {
            tokens: n,
            labels: positive_sets.len(),
        });
    }
    for (i, set) in positive_sets.iter().enumerate() {
        let mut seen = vec![false; n];
        for &p in set {
            if p >= n || p == i || seen[p] {
                return Err(Error::InvalidPositiveSet { anchor: i });
            }
            seen[p] = true;
        }
    }
    Ok(())
}

/// Shared kernel for both contrastive losses.
///
/// Works on raw value rows; normalizes internally (and chains the Jacobian
/// back to the raw rows) when `normalize_inputs` is set. Log-sum-exp terms
/// use max-subtraction.
fn contrastive_core(
    rows: &[Vec<f64>],
    positive_sets: &[Vec<usize>],
    temperature: f64,
    normalize_inputs: bool,
) -> Result<LossReport> {
    let n = rows.len();
    let dim = rows[0].len();
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::TemperatureNonPositive(temperature));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall { size: n, min: 2 });
    }
    validate_positive_sets(n, positive_sets)?;

    let (unit, norms): (Vec<Vec<f64>>, Vec<f64>) = if normalize_inputs {
        let mut u = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for row in rows {
            u.push(normalize(row)?);
            r.push(l2_norm(row));
        }
        (u, r)
    } else {
        (rows.to_vec(), vec![1.0; n])
    };

    // Logit matrix l[i][j] = z_i . z_j / tau.
    let mut logits = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let l = dot(&unit[i], &unit[j]) / temperature;
            logits[i][j] = l;
            logits[j][i] = l;
        }
    }

    let mut value = 0.0;
    let mut anchors_used = 0;
    let mut grad_unit = vec![vec![0.0; dim]; n];
    let mut in_positive = vec![false; n];

    for (i, set) in positive_sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        anchors_used += 1;
        for &p in set {
            in_positive[p] = true;
        }

        let mut max_logit = f64::NEG_INFINITY;
        for a in 0..n {
            if a != i {
                max_logit = max_logit.max(logits[i][a]);
            }
        }
        let mut denom = 0.0;
        let mut numer = 0.0;
        for a in 0..n {
            if a == i {
                continue;
            }
            let e = (logits[i][a] - max_logit).exp();
            denom += e;
            if in_positive[a] {
                numer += e;
            }
        }
        // -log((1/|P|) * numer / denom); the max shift cancels.
        value += (set.len() as f64).ln() + denom.ln() - numer.ln();

        // d(value_i)/d(logit_ia) = softmax over all non-anchors minus the
        // softmax restricted to the positive set.
        for a in 0..n {
            if a == i {
                continue;
            }
            let e = (logits[i][a] - max_logit).exp();
            let mut coef = e / denom;
            if in_positive[a] {
                coef -= e / numer;
            }
            let coef = coef / temperature;
            for d in 0..dim {
                grad_unit[i][d] += coef * unit[a][d];
                grad_unit[a][d] += coef * unit[i][d];
            }
        }

        for &p in set {
            in_positive[p] = false;
        }
    }

    // Chain through the normalization: tangential projection scaled by 1/|z|.
    let gradients = if normalize_inputs {
        grad_unit
            .into_iter()
            .enumerate()
            .map(|(j, g)| {
                let radial = dot(&unit[j], &g);
                g.iter()
                    .zip(&unit[j])
                    .map(|(gi, ui)| (gi - radial * ui) / norms[j])
                    .collect()
            })
            .collect()
    } else {
        grad_unit
    };

    Ok(LossReport {
        value,
        gradients,
        anchors_used,
    })
}

fn batch_rows(batch: &TokenBatch) -> Vec<Vec<f64>> {
    batch
        .tokens()
        .iter()
        .map(|t| t.values().to_vec())
        .collect()
}

/// Supervised contrastive loss with explicit per-anchor positive sets.
///
/// Anchors with empty P(i) contribute zero and are excluded from
/// `anchors_used`. Every P(i) must exclude the anchor itself.
pub fn sup_con_loss(
    batch: &TokenBatch,
    positive_sets: &[Vec<usize>],
    config: &LossConfig,
) -> Result<LossReport> {
    contrastive_core(
        &batch_rows(batch),
        positive_sets,
        config.temperature,
        config.normalize_inputs,
    )
}

/// Positive sets encoding the partition's two pseudo-classes: each token's
/// positives are the other members of its own side. This is how the
/// unmodified supervised contrastive loss treats the (I+, I-) pseudo-labels.
pub fn two_class_positive_sets(partition: &PartitionedBatch, n: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); n];
    for side in [partition.positives(), partition.negatives()] {
        for &i in side {
            sets[i] = side.iter().copied().filter(|&j| j != i).collect();
        }
    }
    sets
}

/// Positive sets for the modified objective: anchors only in I+, each with
/// P(i) = I+ \ {i}; everything else contributes nothing.
pub fn positives_only_sets(partition: &PartitionedBatch, n: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); n];
    for &i in partition.positives() {
        sets[i] = partition
            .positives()
            .iter()
            .copied()
            .filter(|&j| j != i)
            .collect();
    }
    sets
}

/// Modified supervised contrastive loss: only members of I+ act as anchors,
/// with the other members of I+ as their positives.
///
/// With |I+| <= 1 there are no positive pairs, so the value is 0 with
/// `anchors_used == 0`.
pub fn modified_sup_con_loss(
    partition: &PartitionedBatch,
    batch: &TokenBatch,
    config: &LossConfig,
) -> Result<LossReport> {
    let sets = positives_only_sets(partition, batch.len());
    contrastive_core(
        &batch_rows(batch),
        &sets,
        config.temperature,
        config.normalize_inputs,
    )
}

/// Mean L1 distance between assigned (prediction, target) point pairs.
///
/// The gradient rows align with `predicted`; each assigned pair contributes
/// its sign pattern divided by the pair count. An empty assignment is the
/// documented warning case, not an error: value 0 with `anchors_used == 0`.
pub fn loc_loss(
    predicted: &[Point],
    targets: &[Point],
    assignment: &[(usize, usize)],
) -> Result<LossReport> {
    for p in predicted.iter().chain(targets) {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::NonFinite);
        }
    }
    let mut report = LossReport::zeros(predicted.len(), 2);
    if assignment.is_empty() {
        return Ok(report);
    }
    let m = assignment.len() as f64;
    for &(pi, ti) in assignment {
        if pi >= predicted.len() || ti >= targets.len() {
            return Err(Error::InvalidConfig(format!(
                "assignment pair ({pi}, {ti}) out of range"
            )));
        }
        for d in 0..2 {
            let delta = predicted[pi][d] - targets[ti][d];
            report.value += delta.abs() / m;
            report.gradients[pi][d] += delta.signum_or_zero() / m;
        }
    }
    report.anchors_used = assignment.len();
    Ok(report)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}

/// Mean cross-entropy over per-token logit rows with a numerically stable
/// log-softmax. The gradient for each row is (softmax - one_hot) / n.
pub fn cls_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<LossReport> {
    if logits.len() != labels.len() {
        return Err(Error::LabelLengthMismatch {
            tokens: logits.len(),
            labels: labels.len(),
        });
    }
    if logits.is_empty() {
        return Ok(LossReport {
            value: 0.0,
            gradients: Vec::new(),
            anchors_used: 0,
        });
    }
    for row in logits {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut gradients = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: row.len(),
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        value += (log_z - row[label]) / n;
        let mut g: Vec<f64> = row.iter().map(|&x| (x - log_z).exp() / n).collect();
        g[label] -= 1.0 / n;
        gradients.push(g);
    }
    Ok(LossReport {
        value,
        gradients,
        anchors_used: logits.len(),
    })
}

/// Weighted sum of the localization, classification, and contrastive
/// reports: `lambda_loc * loc + lambda_cls * cls + lambda_c * contrastive`.
///
/// Gradients are combined with the same weights over the shared token set;
/// non-empty component gradient lists must therefore agree in shape.
/// `anchors_used` is carried over from the contrastive component.
pub fn composite_loss(
    loc: &LossReport,
    cls: &LossReport,
    contrastive: &LossReport,
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    let value = config.lambda_loc * loc.value
        + config.lambda_cls * cls.value
        + config.lambda_c * contrastive.value;

    let components = [
        (config.lambda_loc, &loc.gradients),
        (config.lambda_cls, &cls.gradients),
        (config.lambda_c, &contrastive.gradients),
    ];
    let mut gradients: Vec<Vec<f64>> = Vec::new();
    for (weight, grads) in components {
        if grads.is_empty() {
            continue;
        }
        if gradients.is_empty() {
            gradients = grads
                .iter()
                .map(|row| row.iter().map(|g| weight * g).collect())
                .collect();
            continue;
        }
        if grads.len() != gradients.len() {
            return Err(Error::GradientShapeMismatch);
        }
        for (acc, row) in gradients.iter_mut().zip(grads) {
            if acc.len() != row.len() {
                return Err(Error::GradientShapeMismatch);
            }
            for (a, g) in acc.iter_mut().zip(row) {
                *a += weight * g;
            }
        }
    }

    Ok(LossReport {
        value,
        gradients,
        anchors_used: contrastive.anchors_used,
    })
}

/// Central-difference gradient of an arbitrary scalar function of the batch,
/// probing every token coordinate: `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// This is the verification oracle for the analytic gradients above; the
/// probe perturbs raw token values, so it sees the same function (including
/// any internal normalization) as the loss being checked.
pub fn finite_difference_gradient<F>(loss_fn: F, batch: &TokenBatch, epsilon: f64) -> Vec<Vec<f64>>
where
    F: Fn(&TokenBatch) -> f64,
{
    assert!(
        epsilon > 1e-8 && epsilon < 1e-2,
        "epsilon {epsilon} outside (1e-8, 1e-2)"
    );
    let dim = batch.dim();
    let mut probe = batch.clone();
    let mut grads = vec![vec![0.0; dim]; batch.len()];
    for i in 0..batch.len() {
        for d in 0..dim {
            let base = batch.tokens()[i].values()[d];
            probe.set_value(i, d, base + epsilon);
            let plus = loss_fn(&probe);
            probe.set_value(i, d, base - epsilon);
            let minus = loss_fn(&probe);
            probe.set_value(i, d, base);
            grads[i][d] = (plus - minus) / (2.0 * epsilon);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ExpressionEmbedding, QueryKind, TokenEmbedding};
    use crate::selection::{select_positives, SelectionStrategy, SelectionVariant};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn batch_from_rows(rows: &[Vec<f64>]) -> TokenBatch {
        let tokens = rows
            .iter()
            .map(|r| TokenEmbedding::new(r.clone()).unwrap())
            .collect();
        TokenBatch::new(tokens, None, "test").unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            if let Ok(u) = normalize(&v) {
                return u;
            }
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> TokenBatch {
        batch_from_rows(&(0..n).map(|_| random_unit(rng, dim)).collect::<Vec<_>>())
    }

    /// Literal evaluation of the supervised contrastive formula, no shared
    /// code with the implementation path.
    fn literal_sup_con(
        rows: &[Vec<f64>],
        sets: &[Vec<usize>],
        tau: f64,
        normalize_inputs: bool,
    ) -> f64 {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                if normalize_inputs {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(|x| x / n).collect()
                } else {
                    r.clone()
                }
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let mut inner = 0.0;
            for &p in set {
                let mut denom = 0.0;
                for (a, row) in rows.iter().enumerate() {
                    if a != i {
                        denom += (dot(&rows[i], row) / tau).exp();
                    }
                }
                inner += (dot(&rows[i], &rows[p]) / tau).exp() / denom;
            }
            total += -(inner / set.len() as f64).ln();
        }
        total
    }

    #[test]
    fn identical_pair_is_zero() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let cfg = LossConfig {
            temperature: 1.0,
            ..LossConfig::default()
        };
        let r = sup_con_loss(&b, &[vec![1], vec![0]], &cfg).unwrap();
        assert!(r.value.abs() < 1e-12);
        assert_eq!(r.anchors_used, 2);
    }

    #[test]
    fn empty_positive_sets_are_vacuous() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let r = sup_con_loss(&b, &[vec![], vec![], vec![]], &LossConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.anchors_used, 0);
        assert!(r.gradients.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_batch(&mut rng, 4, 3);
        let sets = vec![vec![2], vec![0, 3], vec![], vec![1, 2]];
        let cfg = LossConfig {
            temperature: 0.5,
            ..LossConfig::default()
        };
        let rows: Vec<Vec<f64>> = b.tokens().iter().map(|t| t.values().to_vec()).collect();
        let want = literal_sup_con(&rows, &sets, 0.5, true);
        let got = sup_con_loss(&b, &sets, &cfg).unwrap();
        assert!((got.value - want).abs() < 1e-9, "{} vs {want}", got.value);
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = batch_from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cfg = LossConfig {
            temperature: 0.0,
            ..LossConfig::default()
        };
        assert!(matches!(
            sup_con_loss(&b, &[vec![1], vec![0]], &cfg),
            Err(Error::TemperatureNonPositive(_))
        ));

        let single = batch_from_rows(&[vec![1.0, 0.0]]);
        assert!(matches!(
            sup_con_loss(&single, &[vec![]], &LossConfig::default()),
            Err(Error::BatchTooSmall { .. })
        ));

        // Anchor inside its own positive set.
        assert!(matches!(
            sup_con_loss(&b, &[vec![0], vec![0]], &LossConfig::default()),
            Err(Error::InvalidPositiveSet { anchor: 0 })
        ));
    }

    fn partition_of(b: &TokenBatch, query: &[f64], k: usize) -> PartitionedBatch {
        let q = ExpressionEmbedding::new(query.to_vec(), QueryKind::MaskedExpression).unwrap();
        select_positives(b, &q, &SelectionStrategy::new(SelectionVariant::TopFixed(k), 0)).unwrap()
    }

    #[test]
    fn modified_single_positive_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 5, 4);
        let p = partition_of(&b, &random_unit(&mut rng, 4), 1);
        let r = modified_sup_con_loss(&p, &b, &LossConfig::default()).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.anchors_used, 0);
    }

    #[test]
    fn modified_reduces_to_standard_when_all_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let b = random_batch(&mut rng, n, 3);
            let p = partition_of(&b, &random_unit(&mut rng, 3), n);
            assert!(p.negatives().is_empty());
            let modified = modified_sup_con_loss(&p, &b, &LossConfig::default()).unwrap();
            let full_sets: Vec<Vec<usize>> = (0..n)
                .map(|i| (0..n).filter(|&j| j != i).collect())
                .collect();
            let standard = sup_con_loss(&b, &full_sets, &LossConfig::default()).unwrap();
            assert!((modified.value - standard.value).abs() < 1e-12);
        }
    }

    #[test]
    fn modified_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_batch(&mut rng, 6, 4);
        let p = partition_of(&b, &random_unit(&mut rng, 4), 3);
        let cfg = LossConfig {
            temperature: 0.07,
            ..LossConfig::default()
        };
        let rows: Vec<Vec<f64>> = b.tokens().iter().map(|t| t.values().to_vec()).collect();
        let sets = positives_only_sets(&p, 6);
        let want = literal_sup_con(&rows, &sets, 0.07, true);
        let got = modified_sup_con_loss(&p, &b, &cfg).unwrap();
        assert!((got.value - want).abs() < 1e-9);
    }

    #[test]
    fn contrastive_values_never_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..10);
            let b = random_batch(&mut rng, n, 3);
            let k = rng.gen_range(0..=n);
            let p = partition_of(&b, &random_unit(&mut rng, 3), k);
            let r = modified_sup_con_loss(&p, &b, &LossConfig::default()).unwrap();
            assert!(r.value >= 0.0, "negative loss {}", r.value);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 6;
        let b = random_batch(&mut rng, n, 4);
        let sets: Vec<Vec<usize>> = vec![vec![1, 2], vec![0], vec![], vec![4], vec![3], vec![]];
        let base = sup_con_loss(&b, &sets, &LossConfig::default()).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&i| b.tokens()[i].values().to_vec())
            .collect();
        let permuted = batch_from_rows(&rows);
        // inverse[old] = new position
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut permuted_sets = vec![Vec::new(); n];
        for (i, set) in sets.iter().enumerate() {
            permuted_sets[inverse[i]] = set.iter().map(|&p| inverse[p]).collect();
        }
        let got = sup_con_loss(&permuted, &permuted_sets, &LossConfig::default()).unwrap();
        assert!((got.value - base.value).abs() < 1e-12);
    }

    #[test]
    fn loc_loss_examples() {
        // Identity assignment on equal points.
        let pts = vec![[1.0, 2.0], [3.0, 4.0]];
        let r = loc_loss(&pts, &pts, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(r.value, 0.0);

        // Single pair |3| + |4| = 7.
        let r = loc_loss(&[[0.0, 0.0]], &[[3.0, 4.0]], &[(0, 0)]).unwrap();
        assert_eq!(r.value, 7.0);
        assert_eq!(r.gradients[0], vec![-1.0, -1.0]);

        // Mean of L1 distances 1 and 3 is 2.
        let r = loc_loss(
            &[[0.0, 0.0], [5.0, 5.0]],
            &[[1.0, 0.0], [6.0, 7.0]],
            &[(0, 0), (1, 1)],
        )
        .unwrap();
        assert_eq!(r.value, 2.0);

        // Empty assignment: value 0, anchors_used 0 as the warning flag.
        let r = loc_loss(&pts, &pts, &[]).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.anchors_used, 0);
    }

    #[test]
    fn cls_loss_examples() {
        // Saturated correct prediction: margin 100.
        let r = cls_loss(&[vec![100.0, 0.0]], &[0]).unwrap();
        assert!(r.value < 1e-40);

        // Uniform logits over two classes: ln 2 per token.
        let r = cls_loss(&[vec![0.0, 0.0], vec![3.0, 3.0]], &[0, 1]).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);

        // Three-token case against a literal softmax computation.
        let logits = vec![vec![0.2, -0.4], vec![1.5, 0.3], vec![-2.0, 0.1]];
        let labels = [1, 0, 0];
        let r = cls_loss(&logits, &labels).unwrap();
        let mut want = 0.0;
        for (row, &l) in logits.iter().zip(&labels) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            want += -(row[l].exp() / z).ln() / 3.0;
        }
        assert!((r.value - want).abs() < 1e-12);

        assert!(matches!(
            cls_loss(&[vec![0.0, 0.0]], &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn composite_weighted_sum() {
        let report = |v: f64| LossReport {
            value: v,
            gradients: Vec::new(),
            anchors_used: 0,
        };
        let cfg = LossConfig {
            lambda_loc: 1.0,
            lambda_cls: 5.0,
            lambda_c: 0.005,
            ..LossConfig::default()
        };
        let r = composite_loss(&report(2.0), &report(1.0), &report(10.0), &cfg).unwrap();
        assert!((r.value - 7.05).abs() < 1e-12);

        let zero = LossConfig {
            lambda_loc: 0.0,
            lambda_cls: 0.0,
            lambda_c: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(
            composite_loss(&report(2.0), &report(1.0), &report(10.0), &zero)
                .unwrap()
                .value,
            0.0
        );

        let only_c = LossConfig {
            lambda_loc: 0.0,
            lambda_cls: 0.0,
            lambda_c: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(
            composite_loss(&report(2.0), &report(1.0), &report(10.0), &only_c)
                .unwrap()
                .value,
            10.0
        );
    }

    #[test]
    fn composite_rejects_mismatched_gradients() {
        let a = LossReport {
            value: 1.0,
            gradients: vec![vec![1.0, 2.0]],
            anchors_used: 1,
        };
        let b = LossReport {
            value: 1.0,
            gradients: vec![vec![1.0, 2.0, 3.0]],
            anchors_used: 1,
        };
        let empty = LossReport {
            value: 0.0,
            gradients: Vec::new(),
            anchors_used: 0,
        };
        assert_eq!(
            composite_loss(&a, &b, &empty, &LossConfig::default()).unwrap_err(),
            Error::GradientShapeMismatch
        );
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let b = batch_from_rows(&[vec![1.0, 2.0]]);
        let grads = finite_difference_gradient(
            |batch| {
                batch
                    .tokens()
                    .iter()
                    .flat_map(|t| t.values())
                    .map(|x| x * x)
                    .sum()
            },
            &b,
            1e-5,
        );
        assert!((grads[0][0] - 2.0).abs() < 1e-6);
        assert!((grads[0][1] - 4.0).abs() < 1e-6);
    }

    fn max_rel_err(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
        let scale = analytic
            .iter()
            .chain(fd)
            .flatten()
            .fold(0.0f64, |m, &g| m.max(g.abs()))
            .max(1e-8);
        analytic
            .iter()
            .flatten()
            .zip(fd.iter().flatten())
            .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()))
            / scale
    }

    #[test]
    fn sup_con_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let n = rng.gen_range(3..7);
            let b = random_batch(&mut rng, n, 3);
            let sets: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i && rng.gen_bool(0.4))
                        .collect()
                })
                .collect();
            let cfg = LossConfig {
                temperature: 0.3,
                ..LossConfig::default()
            };
            let analytic = sup_con_loss(&b, &sets, &cfg).unwrap();
            let fd = finite_difference_gradient(
                |batch| sup_con_loss(batch, &sets, &cfg).unwrap().value,
                &b,
                1e-5,
            );
            let err = max_rel_err(&analytic.gradients, &fd);
            assert!(err < 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn modified_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..5 {
            let n = rng.gen_range(4..8);
            let b = random_batch(&mut rng, n, 3);
            let p = partition_of(&b, &random_unit(&mut rng, 3), n / 2);
            let cfg = LossConfig {
                temperature: 0.2,
                ..LossConfig::default()
            };
            let analytic = modified_sup_con_loss(&p, &b, &cfg).unwrap();
            let fd = finite_difference_gradient(
                |batch| modified_sup_con_loss(&p, batch, &cfg).unwrap().value,
                &b,
                1e-5,
            );
            assert!(max_rel_err(&analytic.gradients, &fd) < 1e-5);
        }
    }

    #[test]
    fn gradient_step_descends() {
        // One explicit small gradient step never increases the modified loss.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = LossConfig::default();
        for _ in 0..100 {
            let n = rng.gen_range(4..9);
            let b = random_batch(&mut rng, n, 4);
            let p = partition_of(&b, &random_unit(&mut rng, 4), rng.gen_range(2..=n));
            let before = modified_sup_con_loss(&p, &b, &cfg).unwrap();
            if before.anchors_used == 0 {
                continue;
            }
            let mut stepped = b.clone();
            for (i, g) in before.gradients.iter().enumerate() {
                let row: Vec<f64> = stepped.tokens()[i]
                    .values()
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| v - 1e-3 * gi)
                    .collect();
                stepped.set_token_values(i, &row).unwrap();
            }
            let after = modified_sup_con_loss(&p, &stepped, &cfg).unwrap();
            assert!(
                after.value <= before.value + 1e-9,
                "{} -> {}",
                before.value,
                after.value
            );
        }
    }
}
