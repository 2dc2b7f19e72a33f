//! Verification-effectiveness metrics (TPR, TNR, AUROC) and
//! data-integrity metrics (harmlessness, stealthiness).

use serde::{Deserialize, Serialize};

use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::honeygen::HoneySet;
use crate::verifier::BlackBoxModel;

/// A score with the ground truth of the model it was measured against
/// (true = infringing).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub score: f64,
    pub truth: bool,
}

/// A binary verdict with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub verdict: bool,
    pub truth: bool,
}

/// True-positive and true-negative rates over labeled verdicts.
pub fn tpr_tnr(outcomes: &[VerdictOutcome]) -> Result<(f64, f64)> {
    let positives = outcomes.iter().filter(|o| o.truth).count();
    let negatives = outcomes.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::RejectedInput(
            "need at least one positive and one negative outcome".into(),
        ));
    }
    let tp = outcomes.iter().filter(|o| o.truth && o.verdict).count();
    let tn = outcomes.iter().filter(|o| !o.truth && !o.verdict).count();
    Ok((tp as f64 / positives as f64, tn as f64 / negatives as f64))
}

/// Tie-aware AUROC via the rank (Mann-Whitney) estimator:
/// `(concordant + 0.5 * tied) / (positives * negatives)`.
pub fn auroc(outcomes: &[ScoredOutcome]) -> Result<f64> {
    let positives = outcomes.iter().filter(|o| o.truth).count();
    let negatives = outcomes.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::RejectedInput(
            "need both classes to compute AUROC".into(),
        ));
    }
    if let Some(o) = outcomes.iter().find(|o| !o.score.is_finite()) {
        return Err(Error::RejectedInput(format!(
            "non-finite score {}",
            o.score
        )));
    }

    // Average ranks (1-based); ties share the mean rank of their block.
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|a, b| outcomes[*a].score.partial_cmp(&outcomes[*b].score).unwrap());
    let mut ranks = vec![0.0; outcomes.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && outcomes[order[j + 1]].score == outcomes[order[i]].score {
            j += 1;
        }
        // Ranks i+1..=j+1 average to (i + j + 2) / 2, a half-integer, so
        // the sum below stays exact in f64.
        let rank = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }

    let positive_rank_sum: f64 = outcomes
        .iter()
        .zip(&ranks)
        .filter(|(o, _)| o.truth)
        .map(|(_, r)| *r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pluggable image distance used by stealthiness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    MeanAbs,
    Rmse,
    MaxAbs,
}

impl DistanceKind {
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceKind::MeanAbs => {
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
            }
            DistanceKind::Rmse => {
                let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                    / a.len() as f64;
                mse.sqrt()
            }
            DistanceKind::MaxAbs => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// Stealthiness of a modification: `exp(-lambda * distance)`; 1 means the
/// images are identical.
pub fn stealthiness(
    original: &ImageSample,
    modified: &ImageSample,
    distance_kind: DistanceKind,
    lambda: f64,
) -> Result<f64> {
    if original.shape != modified.shape {
        return Err(Error::ShapeMismatch {
            expected: original.shape.to_string(),
            actual: modified.shape.to_string(),
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::RejectedInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let d = distance_kind.distance(&original.pixels, &modified.pixels);
    Ok((-lambda * d).exp())
}

/// Classification accuracy of the honey records (perturbed versions,
/// original labels) under the given model. Protocol errors are excluded;
/// their count is returned alongside.
pub fn harmlessness(honey: &HoneySet, model: &dyn BlackBoxModel) -> Result<(f64, usize)> {
    if honey.records.is_empty() {
        return Err(Error::RejectedInput("empty honey set".into()));
    }
    let mut correct = 0usize;
    let mut answered = 0usize;
    let mut errors = 0usize;
    for record in &honey.records {
        match model.predict(&record.current) {
            Ok(pred) => {
                answered += 1;
                if pred.argmax() == record.original.label {
                    correct += 1;
                }
            }
            Err(Error::Protocol(_)) => errors += 1,
            Err(other) => return Err(other),
        }
    }
    if answered == 0 {
        return Err(Error::Protocol(
            "all harmlessness queries failed".into(),
        ));
    }
    Ok((correct as f64 / answered as f64, errors))
}

/// The aggregate metrics emitted per (method, model pair).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub tpr: f64,
    pub tnr: f64,
    pub auroc: f64,
    /// None for methods that do not modify images (membership inference).
    pub hl: Option<f64>,
    pub stl: Option<f64>,
    pub distance_kind: DistanceKind,
    pub lambda: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub protocol_error_count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Shape;
    use proptest::prelude::*;

    fn outcome(score: f64, truth: bool) -> ScoredOutcome {
        ScoredOutcome { score, truth }
    }

    /// Exhaustive pair-counting oracle for AUROC.
    fn auroc_oracle(outcomes: &[ScoredOutcome]) -> f64 {
        let pos: Vec<f64> = outcomes.iter().filter(|o| o.truth).map(|o| o.score).collect();
        let neg: Vec<f64> = outcomes
            .iter()
            .filter(|o| !o.truth)
            .map(|o| o.score)
            .collect();
        let mut num = 0.0;
        for p in &pos {
            for n in &neg {
                if p > n {
                    num += 1.0;
                } else if p == n {
                    num += 0.5;
                }
            }
        }
        num / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn tpr_tnr_counts() {
        let v = |verdict, truth| VerdictOutcome { verdict, truth };
        let all_correct = vec![v(true, true), v(false, false)];
        assert_eq!(tpr_tnr(&all_correct).unwrap(), (1.0, 1.0));

        let all_one = vec![v(true, true), v(true, false)];
        assert_eq!(tpr_tnr(&all_one).unwrap(), (1.0, 0.0));

        // 3 of 4 positives correct, 1 of 2 negatives correct.
        let mixed = vec![
            v(true, true),
            v(true, true),
            v(true, true),
            v(false, true),
            v(false, false),
            v(true, false),
        ];
        assert_eq!(tpr_tnr(&mixed).unwrap(), (0.75, 0.5));

        assert!(tpr_tnr(&[v(true, true)]).is_err());
    }

    #[test]
    fn auroc_known_values() {
        let perfect = vec![
            outcome(0.9, true),
            outcome(0.8, true),
            outcome(0.1, false),
            outcome(0.2, false),
        ];
        assert_eq!(auroc(&perfect).unwrap(), 1.0);

        let ties = vec![
            outcome(0.3, true),
            outcome(0.7, true),
            outcome(0.3, false),
            outcome(0.7, false),
        ];
        assert_eq!(auroc(&ties).unwrap(), 0.5);

        // Verified against the brute-force pair count: pairs are
        // (0.8>0.5), (0.8>0.1), (0.3<0.5), (0.3>0.1) -> 3/4.
        let mixed = vec![
            outcome(0.8, true),
            outcome(0.3, true),
            outcome(0.5, false),
            outcome(0.1, false),
        ];
        assert_eq!(auroc(&mixed).unwrap(), 0.75);
        assert_eq!(auroc_oracle(&mixed), 0.75);

        assert!(auroc(&[outcome(0.5, true)]).is_err());
        assert!(auroc(&[outcome(f64::NAN, true), outcome(0.1, false)]).is_err());
    }

    #[test]
    fn stealthiness_known_values() {
        let shape = Shape::new(1, 2, 2);
        let a = ImageSample::new("a", shape, vec![0.5; 4], 0).unwrap();
        assert_eq!(
            stealthiness(&a, &a, DistanceKind::MeanAbs, 10.0).unwrap(),
            1.0
        );

        // Every pixel moved by the full 4/255 budget.
        let moved: Vec<f64> = a.pixels.iter().map(|p| p + 4.0 / 255.0).collect();
        let b = ImageSample::new("b", shape, moved, 0).unwrap();
        let stl = stealthiness(&a, &b, DistanceKind::MeanAbs, 10.0).unwrap();
        assert!((stl - (-40.0f64 / 255.0).exp()).abs() < 1e-12);
        assert!((stl - 0.8547).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting_oracle(
            scores in prop::collection::vec((0u8..6, any::<bool>()), 2..12)
        ) {
            let outcomes: Vec<ScoredOutcome> = scores
                .iter()
                .map(|(s, t)| outcome(f64::from(*s) / 5.0, *t))
                .collect();
            let has_both = outcomes.iter().any(|o| o.truth)
                && outcomes.iter().any(|o| !o.truth);
            prop_assume!(has_both);
            let fast = auroc(&outcomes).unwrap();
            let slow = auroc_oracle(&outcomes);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            scores in prop::collection::vec((-50i32..50, any::<bool>()), 2..20)
        ) {
            // Integer scores with an exact strictly-increasing transform
            // (cubing), so floating point cannot merge distinct values.
            let outcomes: Vec<ScoredOutcome> = scores
                .iter()
                .map(|(s, t)| outcome(f64::from(*s), *t))
                .collect();
            let has_both = outcomes.iter().any(|o| o.truth)
                && outcomes.iter().any(|o| !o.truth);
            prop_assume!(has_both);
            let transformed: Vec<ScoredOutcome> = outcomes
                .iter()
                .map(|o| outcome(o.score * o.score * o.score, o.truth))
                .collect();
            prop_assert_eq!(auroc(&outcomes).unwrap(), auroc(&transformed).unwrap());
        }

        #[test]
        fn tpr_tnr_permutation_invariant(
            outcomes in prop::collection::vec((any::<bool>(), any::<bool>()), 2..20),
            seed in any::<u64>(),
        ) {
            let outcomes: Vec<VerdictOutcome> = outcomes
                .iter()
                .map(|(v, t)| VerdictOutcome { verdict: *v, truth: *t })
                .collect();
            let has_both = outcomes.iter().any(|o| o.truth)
                && outcomes.iter().any(|o| !o.truth);
            prop_assume!(has_both);
            let mut shuffled = outcomes.clone();
            crate::rng::SplitMix64::new(seed).shuffle(&mut shuffled);
            prop_assert_eq!(tpr_tnr(&outcomes).unwrap(), tpr_tnr(&shuffled).unwrap());
        }

        #[test]
        fn stl_monotone_in_distance(d1 in 0.0f64..0.5, d2 in 0.0f64..0.5) {
            let shape = Shape::new(1, 1, 2);
            let base = ImageSample::new("o", shape, vec![0.5, 0.5], 0).unwrap();
            let with = |d: f64| {
                ImageSample::new("m", shape, vec![0.5 + d * 0.9, 0.5], 0).unwrap()
            };
            let s1 = stealthiness(&base, &with(d1), DistanceKind::MeanAbs, 10.0).unwrap();
            let s2 = stealthiness(&base, &with(d2), DistanceKind::MeanAbs, 10.0).unwrap();
            if d1 <= d2 {
                prop_assert!(s1 >= s2);
            } else {
                prop_assert!(s1 <= s2);
            }
        }
    }
}
