//! Evaluation metrics: infection-probability and influence errors against a
//! reference, and structure-recovery quality of a learned rate matrix.

use ndarray::Array2;

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Per-step mean absolute per-node error `||x_t - x*_t||_1 / n`, one value
/// per row of the inputs.
pub fn prob_mae<F: Scalar>(predicted: &Array2<F>, reference: &Array2<F>) -> Result<Vec<F>> {
    if predicted.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "prob_mae: {:?} vs {:?}",
            predicted.shape(),
            reference.shape()
        )));
    }
    let n = F::of(predicted.ncols() as f64);
    Ok(predicted
        .rows()
        .into_iter()
        .zip(reference.rows())
        .map(|(p, r)| {
            let sum: F = p.iter().zip(r.iter()).map(|(a, b)| (*a - *b).abs()).sum();
            sum / n
        })
        .collect())
}

/// Per-step absolute error of the summed influence `|1 . (x_t - x*_t)|`.
/// Signed per-node errors cancel before the absolute value is taken.
pub fn influence_mae<F: Scalar>(predicted: &Array2<F>, reference: &Array2<F>) -> Result<Vec<F>> {
    if predicted.shape() != reference.shape() {
        return Err(Error::Dimension(format!(
            "influence_mae: {:?} vs {:?}",
            predicted.shape(),
            reference.shape()
        )));
    }
    Ok(predicted
        .rows()
        .into_iter()
        .zip(reference.rows())
        .map(|(p, r)| {
            let sum: F = p.iter().zip(r.iter()).map(|(a, b)| *a - *b).sum();
            sum.abs()
        })
        .collect())
}

/// Recovered edge indicators: `(i, j)` is an edge iff the learned rate
/// `A[[j, i]] >= eps` (boundary inclusive).
pub fn threshold_edges<F: Scalar>(rates: &Array2<F>, eps: f64) -> Result<Array2<u8>> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("threshold must be positive".into()));
    }
    let e = F::of(eps);
    Ok(rates.mapv(|v| u8::from(v >= e)))
}

/// Structure-recovery quality of a learned edge set and rate matrix against
/// the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Cosine similarity of the matrices; `None` when either is all zero.
    pub correlation: Option<f64>,
    pub threshold: f64,
    pub learned_edges: usize,
    pub true_edges: usize,
}

/// The four structure metrics, with the precision/recall denominators as
/// used alongside the reference tables (precision divides by the true edge
/// count, recall by the learned one):
///
/// ```text
/// Prc = |E and E*| / |E*|     Rcl = |E and E*| / |E|
/// Acc = 1 - |E xor E*| / (|E| + |E*|)
/// Cor = tr(A^T A*) / (||A||_F ||A*||_F)
/// ```
///
/// Empty denominators in Prc/Rcl yield 0; two empty edge sets count as
/// perfectly accurate.
pub fn structure_metrics<F: Scalar>(
    learned_edges: &Array2<u8>,
    true_edges: &Array2<u8>,
    learned_rates: &Array2<F>,
    true_rates: &Array2<F>,
    threshold: f64,
) -> Result<StructureReport> {
    if learned_edges.shape() != true_edges.shape()
        || learned_rates.shape() != true_rates.shape()
        || learned_edges.shape() != learned_rates.shape()
    {
        return Err(Error::Dimension("structure_metrics: shape mismatch".into()));
    }
    let mut both = 0usize;
    let mut learned = 0usize;
    let mut truth = 0usize;
    let mut differ = 0usize;
    for (&l, &t) in learned_edges.iter().zip(true_edges.iter()) {
        let l = l != 0;
        let t = t != 0;
        learned += usize::from(l);
        truth += usize::from(t);
        both += usize::from(l && t);
        differ += usize::from(l != t);
    }
    let precision = if truth == 0 { 0.0 } else { both as f64 / truth as f64 };
    let recall = if learned == 0 { 0.0 } else { both as f64 / learned as f64 };
    let accuracy = if learned + truth == 0 {
        1.0
    } else {
        1.0 - differ as f64 / (learned + truth) as f64
    };
    let mut dot = 0.0;
    let mut norm_l = 0.0;
    let mut norm_t = 0.0;
    for (&a, &b) in learned_rates.iter().zip(true_rates.iter()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        dot += a * b;
        norm_l += a * a;
        norm_t += b * b;
    }
    let correlation = if norm_l == 0.0 || norm_t == 0.0 {
        None
    } else {
        Some(dot / (norm_l.sqrt() * norm_t.sqrt()))
    };
    Ok(StructureReport {
        precision,
        recall,
        accuracy,
        correlation,
        threshold,
        learned_edges: learned,
        true_edges: truth,
    })
}

/// Threshold-then-score in one call, with the conventional default
/// threshold 0.01.
pub fn score_structure<F: Scalar>(
    learned_rates: &Array2<F>,
    true_rates: &Array2<F>,
    eps: f64,
) -> Result<StructureReport> {
    let learned = threshold_edges(learned_rates, eps)?;
    let truth = threshold_edges(true_rates, f64::MIN_POSITIVE)?;
    structure_metrics(&learned, &truth, learned_rates, true_rates, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn prob_mae_hand_values() {
        let x = arr2(&[[0.5, 0.5]]);
        let y = arr2(&[[1.0, 0.0]]);
        assert_eq!(prob_mae(&x, &x).unwrap(), vec![0.0]);
        assert_eq!(prob_mae(&x, &y).unwrap(), vec![0.5]);
        assert!(prob_mae(&x, &arr2(&[[1.0]])).is_err());
    }

    #[test]
    fn influence_mae_cancels_signed_errors() {
        let x = arr2(&[[0.6, 0.4]]);
        let y = arr2(&[[0.4, 0.6]]);
        assert!((influence_mae(&x, &y).unwrap()[0]).abs() < 1e-15);
        let z = arr2(&[[0.6, 0.6]]);
        assert!((influence_mae(&z, &y).unwrap()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let a = arr2(&[[0.0, 0.009], [0.010, 0.02]]);
        let e = threshold_edges(&a, 0.01).unwrap();
        assert_eq!(e, arr2(&[[0, 0], [1, 1]]));
        assert!(threshold_edges(&a, 0.0).is_err());
    }

    #[test]
    fn threshold_is_monotone_in_eps() {
        let a = arr2(&[[0.0, 0.3], [0.05, 0.011]]);
        let coarse = threshold_edges(&a, 0.1).unwrap();
        let fine = threshold_edges(&a, 0.01).unwrap();
        for (c, f) in coarse.iter().zip(fine.iter()) {
            assert!(c <= f);
        }
        // eps below the smallest positive entry keeps the full support.
        let all = threshold_edges(&a, 1e-9).unwrap();
        assert_eq!(all.iter().filter(|&&v| v == 1).count(), 3);
    }

    #[test]
    fn structure_hand_example() {
        // True edges {(0,1), (1,2)}, learned {(0,1), (0,2)} as (i, j) pairs
        // stored at [[j, i]].
        let mut truth = ndarray::Array2::<u8>::zeros((3, 3));
        truth[[1, 0]] = 1;
        truth[[2, 1]] = 1;
        let mut learned = ndarray::Array2::<u8>::zeros((3, 3));
        learned[[1, 0]] = 1;
        learned[[2, 0]] = 1;
        let a = learned.mapv(|v| v as f64);
        let t = truth.mapv(|v| v as f64);
        let rep = structure_metrics(&learned, &truth, &a, &t, 0.01).unwrap();
        assert!((rep.precision - 0.5).abs() < 1e-15);
        assert!((rep.recall - 0.5).abs() < 1e-15);
        assert!((rep.accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_structures_score_one() {
        let a = arr2(&[[0.0, 0.4], [0.7, 0.0]]);
        let rep = score_structure(&a, &a, 0.01).unwrap();
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 1.0);
        assert_eq!(rep.accuracy, 1.0);
        assert!((rep.correlation.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_scale_invariant_and_none_for_zero() {
        let a = arr2(&[[0.0, 0.4], [0.7, 0.0]]);
        let doubled = a.mapv(|v| 2.0 * v);
        let rep = score_structure(&doubled, &a, 0.01).unwrap();
        assert!((rep.correlation.unwrap() - 1.0).abs() < 1e-12);
        let zero = Array2::<f64>::zeros((2, 2));
        let rep = structure_metrics(
            &Array2::<u8>::zeros((2, 2)),
            &threshold_edges(&a, 0.01).unwrap(),
            &zero,
            &a,
            0.01,
        )
        .unwrap();
        assert!(rep.correlation.is_none());
        assert_eq!(rep.precision, 0.0);
    }

    #[test]
    fn accuracy_is_symmetric_and_prc_rcl_swap() {
        let mut e1 = Array2::<u8>::zeros((3, 3));
        e1[[1, 0]] = 1;
        e1[[0, 2]] = 1;
        let mut e2 = Array2::<u8>::zeros((3, 3));
        e2[[1, 0]] = 1;
        e2[[2, 1]] = 1;
        e2[[0, 1]] = 1;
        let a = e1.mapv(|v| v as f64);
        let b = e2.mapv(|v| v as f64);
        let fwd = structure_metrics(&e1, &e2, &a, &b, 0.01).unwrap();
        let rev = structure_metrics(&e2, &e1, &b, &a, 0.01).unwrap();
        assert!((fwd.accuracy - rev.accuracy).abs() < 1e-15);
        assert!((fwd.precision - rev.recall).abs() < 1e-15);
        assert!((fwd.recall - rev.precision).abs() < 1e-15);
    }
}
