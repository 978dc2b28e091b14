//! Label-smoothed cross-entropy as a straight-line function of raw logits.
//!
//! This standalone evaluation is independent of the tape's fused loss op and
//! doubles as its oracle in tests: the target distribution is
//! `q = (1−u)·onehot + u·uniform(V)` and the loss `−Σ q·log_softmax(logits)`.

use crate::error::{Error, Result};

pub fn label_smoothed_ce(logits: &[f64], target: usize, uncertainty: f64, vocab: usize) -> Result<f64> {
    if logits.len() != vocab {
        return Err(Error::shape("label_smoothed_ce", format!("{} logits for vocab {vocab}", logits.len())));
    }
    if target >= vocab {
        return Err(Error::TargetOutOfRange { id: target, vocab });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    let u = uncertainty;
    let mut loss = 0.0;
    for (v, &logit) in logits.iter().enumerate() {
        let q = u / vocab as f64 + if v == target { 1.0 - u } else { 0.0 };
        loss -= q * (logit - lse);
    }
    Ok(loss)
}

/// The smoothed target distribution itself, for inspection.
pub fn smoothed_targets(target: usize, uncertainty: f64, vocab: usize) -> Result<Vec<f64>> {
    if target >= vocab {
        return Err(Error::TargetOutOfRange { id: target, vocab });
    }
    let u = uncertainty;
    Ok((0..vocab)
        .map(|v| u / vocab as f64 + if v == target { 1.0 - u } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothed_distribution_hand_example() {
        let q = smoothed_targets(0, 0.1, 4).unwrap();
        let want = [0.925, 0.025, 0.025, 0.025];
        for (a, b) in q.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one_for_any_uncertainty() {
        for u in [0.0, 0.05, 0.1, 0.5, 0.99] {
            let q = smoothed_targets(2, u, 7).unwrap();
            let sum: f64 = q.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "u={u}");
        }
    }

    #[test]
    fn zero_uncertainty_is_plain_cross_entropy() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let loss = label_smoothed_ce(&logits, 2, 0.0, 4).unwrap();
        let max = 2.0;
        let lse = logits.iter().map(|&x| (x - max as f64).exp()).sum::<f64>().ln() + max;
        assert!((loss - (lse - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_target_rejected() {
        assert!(matches!(
            label_smoothed_ce(&[0.0; 4], 4, 0.1, 4),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn matches_tape_fused_loss() {
        use crate::tensor::{Tape, Tensor};
        let logits = vec![0.5, -0.3, 1.7, 0.1, -2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 5], logits.clone()).unwrap(), false);
        let lp = tape.log_softmax(x).unwrap();
        let nll = tape.smoothed_nll(lp, &[3], 0.1).unwrap();
        let fused = tape.value(nll).data[0];
        let straight = label_smoothed_ce(&logits, 3, 0.1, 5).unwrap();
        assert!((fused - straight).abs() < 1e-12);
    }
}
