use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Macro-averaged precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class precision/recall/F1 (0/0 taken as 0), averaged with equal
/// weight over all `num_classes` classes.
pub fn macro_prf(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MacroPrf> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be positive".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_count = vec![0usize; num_classes];
    let mut true_count = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class index out of range for {num_classes} classes"
            )));
        }
        pred_count[p] += 1;
        true_count[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        let p = ratio(tp[c], pred_count[c]);
        let r = ratio(tp[c], true_count[c]);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        ps += p;
        rs += r;
        fs += f;
    }
    let c = num_classes as f64;
    Ok(MacroPrf {
        precision: ps / c,
        recall: rs / c,
        f1: fs / c,
    })
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Floor applied to both distributions before the KL divergence.
pub const KL_EPSILON: f64 = 1e-10;

/// Which distribution the KL divergence is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(target || predicted)`.
    #[default]
    TargetReference,
    /// `KL(predicted || target)`.
    PredictionReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub l1: f64,
    pub chebyshev: f64,
    pub kl: f64,
}

fn floored(v: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = v.iter().map(|&x| x.max(KL_EPSILON)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|x| x / s).collect()
}

/// L1 and Chebyshev distances on the raw vectors; KL on copies floored at
/// [`KL_EPSILON`] and renormalized.
pub fn distribution_metrics(predicted: &[f64], target: &[f64], direction: KlDirection) -> Result<DistributionMetrics> {
    if predicted.len() != target.len() {
        return Err(Error::Shape(format!(
            "predicted length {} vs target length {}",
            predicted.len(),
            target.len()
        )));
    }
    let mut l1 = 0.0;
    let mut cheb: f64 = 0.0;
    for (p, q) in predicted.iter().zip(target) {
        let d = (p - q).abs();
        l1 += d;
        cheb = cheb.max(d);
    }
    let (p, q) = (floored(predicted), floored(target));
    let (reference, other) = match direction {
        KlDirection::TargetReference => (&q, &p),
        KlDirection::PredictionReference => (&p, &q),
    };
    let kl = reference
        .iter()
        .zip(other)
        .map(|(r, o)| r * (r / o).ln())
        .sum::<f64>()
        .max(0.0);
    Ok(DistributionMetrics { l1, chebyshev: cheb, kl })
}

/// Metrics averaged over regions (rows).
pub fn mean_distribution_metrics<P: AsRef<[f64]>, T: AsRef<[f64]>>(
    predicted: &[P],
    target: &[T],
    direction: KlDirection,
) -> Result<DistributionMetrics> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::Shape("need equal, non-zero numbers of predicted and target rows".into()));
    }
    let mut acc = DistributionMetrics {
        l1: 0.0,
        chebyshev: 0.0,
        kl: 0.0,
    };
    for (p, t) in predicted.iter().zip(target) {
        let m = distribution_metrics(p.as_ref(), t.as_ref(), direction)?;
        acc.l1 += m.l1;
        acc.chebyshev += m.chebyshev;
        acc.kl += m.kl;
    }
    let n = predicted.len() as f64;
    Ok(DistributionMetrics {
        l1: acc.l1 / n,
        chebyshev: acc.chebyshev / n,
        kl: acc.kl / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_constant_predictions() {
        let labels = [0, 1, 2, 1, 0];
        let m = macro_prf(&labels, &labels, 3).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        // balanced 2-class, always predict class 0: F1_0 = 2/3, F1_1 = 0
        let m = macro_prf(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - 0.25).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
    }

    #[test]
    fn macro_prf_errors() {
        assert!(macro_prf(&[0], &[0, 1], 2).is_err());
        assert!(macro_prf(&[3], &[0], 2).is_err());
    }

    #[test]
    fn kl_under_floor() {
        // mpmath: p=(1,0) floored to (1,1e-10)/(1+1e-10), q=(0.5,0.5)
        let expected = 10.819_778_284_510_283;
        let m = distribution_metrics(&[1.0, 0.0], &[0.5, 0.5], KlDirection::TargetReference).unwrap();
        assert_eq!(m.l1, 1.0);
        assert_eq!(m.chebyshev, 0.5);
        assert!((m.kl - expected).abs() < 1e-9, "{}", m.kl);
    }

    #[test]
    fn identical_distributions_are_zero() {
        let p = [0.2, 0.3, 0.5];
        let m = distribution_metrics(&p, &p, KlDirection::TargetReference).unwrap();
        assert_eq!((m.l1, m.chebyshev, m.kl), (0.0, 0.0, 0.0));
        assert!(distribution_metrics(&p, &[0.5, 0.5], KlDirection::TargetReference).is_err());
    }

    #[test]
    fn kl_direction_switch() {
        let p = [0.9, 0.1];
        let q = [0.5, 0.5];
        let a = distribution_metrics(&p, &q, KlDirection::TargetReference).unwrap().kl;
        let b = distribution_metrics(&p, &q, KlDirection::PredictionReference).unwrap().kl;
        let want_a = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let want_b = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((a - want_a).abs() < 1e-9 && (b - want_b).abs() < 1e-9);
    }

    fn probability_vector(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, k).prop_filter_map("non-zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn distribution_metric_bounds(p in probability_vector(5), q in probability_vector(5)) {
            let m = distribution_metrics(&p, &q, KlDirection::TargetReference).unwrap();
            prop_assert!(m.l1 <= 2.0 + 1e-12);
            prop_assert!(m.chebyshev <= 1.0 + 1e-12);
            prop_assert!(m.kl >= 0.0);
            prop_assert!(m.chebyshev <= m.l1 + 1e-15);
        }
    }
}
