//! Split conformal calibration: nonconformity scores, the conformal
//! quantile with its infinity atom, and the vanilla set/interval
//! constructors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("empty calibration score list")]
    EmptyScores,
    #[error("alpha {0} outside (0,1)")]
    InvalidAlpha(f64),
    #[error("non-finite calibration score at index {0}")]
    NonFiniteScore(usize),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: usize, n_classes: usize },
}

/// Classification nonconformity: one minus the predicted likelihood of the
/// candidate label.
pub fn score_class(probs: &[f64], y: usize) -> Result<f64, ConformalError> {
    if y >= probs.len() {
        return Err(ConformalError::LabelRange { label: y, n_classes: probs.len() });
    }
    Ok(1.0 - probs[y])
}

/// Quantile-regression nonconformity: signed distance of `y` outside the
/// predicted quantile band; negative iff strictly inside.
pub fn score_cqr(q_lo: f64, q_hi: f64, y: f64) -> f64 {
    (q_lo - y).max(y - q_hi)
}

/// The conformal critical value. The calibration distribution carries a
/// point mass at infinity for the unseen test score; when the quantile
/// index lands on it the threshold is the tagged `Infinite` sentinel, never
/// a float infinity inside arithmetic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalValue {
    pub threshold: Threshold,
    pub alpha: f64,
    pub n: usize,
}

impl CriticalValue {
    /// Does a score pass the conformal test `s <= q`?
    pub fn admits(&self, score: f64) -> bool {
        match self.threshold {
            Threshold::Finite(q) => score <= q,
            Threshold::Infinite => true,
        }
    }

    pub fn as_finite(&self) -> Option<f64> {
        match self.threshold {
            Threshold::Finite(q) => Some(q),
            Threshold::Infinite => None,
        }
    }
}

/// The `ceil((1-alpha)(n+1))`-th smallest calibration score, or the
/// infinity atom when that index exceeds `n`.
///
/// The order-statistic index is computed as `(n+1) - floor(alpha * (n+1))`,
/// which is the same integer in exact arithmetic but avoids the `1 - alpha`
/// rounding that can push `ceil` off by one when `(1-alpha)(n+1)` lands on
/// an integer (e.g. alpha = 0.1, n = 9).
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<CriticalValue, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyScores);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(ConformalError::NonFiniteScore(i));
    }
    let n = scores.len();
    let k = quantile_index(n, alpha);
    let threshold = if k > n {
        Threshold::Infinite
    } else {
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        Threshold::Finite(sorted[k - 1])
    };
    Ok(CriticalValue { threshold, alpha, n })
}

/// 1-based order-statistic index `ceil((1-alpha)(n+1))`.
pub fn quantile_index(n: usize, alpha: f64) -> usize {
    let m = (n + 1) as f64;
    let dropped = (alpha * m).floor() as usize;
    (n + 1).saturating_sub(dropped).max(1)
}

/// A label set over `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    contains: Vec<bool>,
}

impl PredictionSet {
    pub fn from_membership(contains: Vec<bool>) -> Self {
        PredictionSet { contains }
    }

    pub fn full(k: usize) -> Self {
        PredictionSet { contains: vec![true; k] }
    }

    pub fn n_classes(&self) -> usize {
        self.contains.len()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.contains.get(label).copied().unwrap_or(false)
    }

    pub fn size(&self) -> usize {
        self.contains.iter().filter(|&&b| b).count()
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.contains.len()).filter(|&y| self.contains[y]).collect()
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.contains
            .iter()
            .zip(&other.contains)
            .all(|(a, b)| !a || *b)
    }
}

/// `{y : 1 - probs[y] <= q}`.
pub fn vanilla_set_class(probs: &[f64], q: &CriticalValue) -> PredictionSet {
    let contains = probs.iter().map(|&p| q.admits(1.0 - p)).collect();
    PredictionSet::from_membership(contains)
}

/// A closed interval; `lo > hi` marks the empty interval, which can occur
/// when the critical value is negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl PredictionInterval {
    pub fn unbounded() -> Self {
        PredictionInterval { lo: f64::NEG_INFINITY, hi: f64::INFINITY }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    /// Interval width; empty intervals count as zero.
    pub fn length(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.hi - self.lo
        }
    }

    pub fn is_subset_of(&self, other: &PredictionInterval) -> bool {
        self.is_empty() || (other.lo <= self.lo && self.hi <= other.hi)
    }
}

/// Quantile predictions widened by the critical value:
/// `[q_lo - q, q_hi + q]`.
pub fn cqr_interval(q_lo: f64, q_hi: f64, q: &CriticalValue) -> PredictionInterval {
    match q.threshold {
        Threshold::Finite(qv) => PredictionInterval { lo: q_lo - qv, hi: q_hi + qv },
        Threshold::Infinite => PredictionInterval::unbounded(),
    }
}

/// A prediction region of either task, as the harness handles them.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Labels(PredictionSet),
    Interval(PredictionInterval),
}

impl Region {
    pub fn covers_label(&self, y: usize) -> bool {
        match self {
            Region::Labels(s) => s.contains(y),
            Region::Interval(_) => false,
        }
    }

    pub fn covers_value(&self, y: f64) -> bool {
        match self {
            Region::Labels(_) => false,
            Region::Interval(i) => i.contains(y),
        }
    }

    /// Label count for sets, length for intervals.
    pub fn size(&self) -> f64 {
        match self {
            Region::Labels(s) => s.size() as f64,
            Region::Interval(i) => i.length(),
        }
    }

    pub fn is_subset_of(&self, other: &Region) -> Option<bool> {
        match (self, other) {
            (Region::Labels(a), Region::Labels(b)) => Some(a.is_subset_of(b)),
            (Region::Interval(a), Region::Interval(b)) => Some(a.is_subset_of(b)),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_class_examples() {
        assert_eq!(score_class(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(score_class(&[0.25, 0.75], 0).unwrap(), 0.75);
        let k = 5;
        let uniform = vec![1.0 / k as f64; k];
        assert!((score_class(&uniform, 3).unwrap() - (1.0 - 1.0 / k as f64)).abs() < 1e-15);
        assert!(score_class(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn score_cqr_examples() {
        assert_eq!(score_cqr(0.0, 1.0, 0.5), -0.5);
        assert_eq!(score_cqr(0.0, 1.0, 2.0), 1.0);
        assert!((score_cqr(0.0, 1.0, -0.3) - 0.3).abs() < 1e-15);
        // Defined even with inverted quantile predictions.
        assert_eq!(score_cqr(1.0, 0.0, 0.5), 0.5);
    }

    #[test]
    fn quantile_ten_scores() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let q = conformal_quantile(&scores, 0.1).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(1.0));
    }

    #[test]
    fn quantile_hits_the_infinity_atom() {
        let scores = vec![0.3, 0.1, 0.5, 0.2, 0.4];
        let q = conformal_quantile(&scores, 0.1).unwrap();
        assert_eq!(q.threshold, Threshold::Infinite);
        assert!(q.admits(1e12));
    }

    #[test]
    fn quantile_near_alpha_one_takes_the_smallest_score() {
        let scores = vec![0.9, 0.2, 0.7];
        let q = conformal_quantile(&scores, 0.99).unwrap();
        assert_eq!(q.threshold, Threshold::Finite(0.2));
    }

    #[test]
    fn quantile_index_integer_boundary() {
        // (1-0.1)*(9+1) = 9 exactly; the naive ceil over floats says 10.
        assert_eq!(quantile_index(9, 0.1), 9);
        assert_eq!(quantile_index(10, 0.1), 10);
        assert_eq!(quantile_index(5, 0.1), 6);
        assert_eq!(quantile_index(500, 0.1), 451);
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(matches!(conformal_quantile(&[], 0.1), Err(ConformalError::EmptyScores)));
        assert!(matches!(conformal_quantile(&[0.1], 0.0), Err(ConformalError::InvalidAlpha(_))));
        assert!(matches!(
            conformal_quantile(&[0.1, f64::NAN], 0.1),
            Err(ConformalError::NonFiniteScore(1))
        ));
    }

    #[test]
    fn vanilla_set_examples() {
        let inf = CriticalValue { threshold: Threshold::Infinite, alpha: 0.1, n: 5 };
        assert_eq!(vanilla_set_class(&[0.2, 0.8], &inf).size(), 2);

        let half = CriticalValue { threshold: Threshold::Finite(0.5), alpha: 0.1, n: 10 };
        let set = vanilla_set_class(&[0.9, 0.1], &half);
        assert_eq!(set.labels(), vec![0]);

        let one = CriticalValue { threshold: Threshold::Finite(1.0), alpha: 0.1, n: 10 };
        assert_eq!(vanilla_set_class(&[0.3, 0.3, 0.4], &one).size(), 3);
    }

    #[test]
    fn cqr_interval_examples() {
        let q0 = CriticalValue { threshold: Threshold::Finite(0.0), alpha: 0.1, n: 10 };
        assert_eq!(cqr_interval(1.0, 2.0, &q0), PredictionInterval { lo: 1.0, hi: 2.0 });

        let qh = CriticalValue { threshold: Threshold::Finite(0.5), alpha: 0.1, n: 10 };
        assert_eq!(cqr_interval(1.0, 2.0, &qh), PredictionInterval { lo: 0.5, hi: 2.5 });

        let qneg = CriticalValue { threshold: Threshold::Finite(-2.0), alpha: 0.1, n: 10 };
        let interval = cqr_interval(1.0, 2.0, &qneg);
        assert!(interval.is_empty());
        assert_eq!(interval.length(), 0.0);
        assert!(!interval.contains(1.5));
    }

    #[test]
    fn interval_membership_matches_the_score_test() {
        let (q_lo, q_hi) = (0.25, 1.75);
        let q = CriticalValue { threshold: Threshold::Finite(0.4), alpha: 0.1, n: 20 };
        let interval = cqr_interval(q_lo, q_hi, &q);
        let mut y = -2.0;
        while y <= 4.0 {
            let by_score = q.admits(score_cqr(q_lo, q_hi, y));
            assert_eq!(interval.contains(y), by_score, "mismatch at y={y}");
            y += 1e-3;
        }
    }
}
