//! Best-window selection over an evaluation series: the contiguous window
//! of fixed size with maximal mean score; ties go to the earliest window;
//! the spread is the population standard deviation within the window.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub score: f64,
}

/// Ordered (step, score) points; steps strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct EvalSeries {
    points: Vec<EvalPoint>,
}

impl EvalSeries {
    pub fn new() -> EvalSeries {
        EvalSeries { points: Vec::new() }
    }

    pub fn push(&mut self, step: u64, score: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if step <= last.step {
                return Err(Error::ConfigInvalid(format!(
                    "evaluation steps must increase: {} after {}",
                    step, last.step
                )));
            }
        }
        self.points.push(EvalPoint { step, score });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[EvalPoint] {
        &self.points
    }

    pub fn scores(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.score).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport {
    pub mean: f64,
    pub std: f64,
    pub start_index: usize,
}

/// Scan every window of the given size; direct per-window summation keeps
/// tie comparisons bit-identical to an exhaustive oracle.
pub fn best_eval_window(series: &EvalSeries, window: usize) -> Result<WindowReport> {
    let scores = series.scores();
    best_window_over(&scores, window)
}

pub fn best_window_over(scores: &[f64], window: usize) -> Result<WindowReport> {
    if window == 0 {
        return Err(Error::ConfigInvalid("window must be positive".into()));
    }
    if scores.len() < window {
        return Err(Error::SeriesTooShort { len: scores.len(), window });
    }
    let mut best: Option<WindowReport> = None;
    for start in 0..=scores.len() - window {
        let slice = &scores[start..start + window];
        let mean = slice.iter().sum::<f64>() / window as f64;
        let better = match &best {
            None => true,
            Some(b) => mean > b.mean,
        };
        if better {
            let var = slice.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / window as f64;
            best = Some(WindowReport { mean, std: var.sqrt(), start_index: start });
        }
    }
    Ok(best.expect("at least one window"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(scores: &[f64]) -> EvalSeries {
        let mut s = EvalSeries::new();
        for (i, &v) in scores.iter().enumerate() {
            s.push(i as u64 * 10, v).unwrap();
        }
        s
    }

    #[test]
    fn hand_example() {
        let report = best_eval_window(&series(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3).unwrap();
        assert_eq!(report.start_index, 2);
        assert!((report.mean - 4.0).abs() < 1e-12);
        assert!((report.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_series() {
        let report = best_eval_window(&series(&[7.5; 9]), 4).unwrap();
        assert_eq!(report.start_index, 0);
        assert_eq!(report.mean, 7.5);
        assert_eq!(report.std, 0.0);
    }

    #[test]
    fn whole_series_window() {
        let report = best_eval_window(&series(&[1.0, 2.0, 6.0]), 3).unwrap();
        assert_eq!(report.start_index, 0);
        assert!((report.mean - 3.0).abs() < 1e-12);
    }

    #[test]
    fn earliest_window_wins_ties() {
        let report = best_eval_window(&series(&[5.0, 5.0, 1.0, 5.0, 5.0]), 2).unwrap();
        assert_eq!(report.start_index, 0);
    }

    #[test]
    fn too_short_series_rejected() {
        assert!(matches!(
            best_eval_window(&series(&[1.0, 2.0]), 3),
            Err(Error::SeriesTooShort { len: 2, window: 3 })
        ));
    }

    #[test]
    fn steps_must_increase() {
        let mut s = EvalSeries::new();
        s.push(10, 1.0).unwrap();
        assert!(s.push(10, 2.0).is_err());
        assert!(s.push(5, 2.0).is_err());
        assert!(s.push(11, 2.0).is_ok());
    }
}
