//! Adaptive gradient clipping: a step is aborted outright when the log of
//! the gradient norm spikes above the moving mean by more than `threshold`
//! moving standard deviations. Statistics update only on accepted steps, so
//! an aborted step leaves everything untouched.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub enabled: bool,
    /// Exponential moving-average decay for the log-norm statistics.
    pub decay: f64,
    /// Accepted updates before aborts can trigger; cold statistics are
    /// meaningless.
    pub warmup_steps: usize,
    /// Abort when log‖g‖ > μ + threshold·σ.
    pub threshold: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { enabled: true, decay: 0.99, warmup_steps: 100, threshold: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipDecision {
    Accept,
    Abort,
}

/// Moving mean and variance of log‖g‖₂, tracked as exponential averages of
/// the value and its square.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormStats {
    config: ClipConfig,
    accepted: usize,
    log_mean: f64,
    log_sq_mean: f64,
}

impl GradNormStats {
    pub fn new(config: ClipConfig) -> GradNormStats {
        GradNormStats { config, accepted: 0, log_mean: 0.0, log_sq_mean: 0.0 }
    }

    /// Construct with known statistics, already past warmup. Test hook for
    /// exercising the threshold arithmetic directly.
    pub fn warmed(config: ClipConfig, mean: f64, std: f64) -> GradNormStats {
        GradNormStats {
            accepted: config.warmup_steps.max(1),
            log_mean: mean,
            log_sq_mean: mean * mean + std * std,
            config,
        }
    }

    pub fn mean(&self) -> f64 {
        self.log_mean
    }

    pub fn std(&self) -> f64 {
        (self.log_sq_mean - self.log_mean * self.log_mean).max(0.0).sqrt()
    }

    pub fn accepted_updates(&self) -> usize {
        self.accepted
    }

    /// Decide whether a step with this gradient norm may be applied.
    /// Side-effect free; call [`GradNormStats::update`] after the step is
    /// actually taken.
    pub fn check(&self, grad_norm: f64) -> ClipDecision {
        if !grad_norm.is_finite() {
            return ClipDecision::Abort;
        }
        if !self.config.enabled || self.accepted < self.config.warmup_steps {
            return ClipDecision::Accept;
        }
        let x = grad_norm.max(1e-300).ln();
        if x > self.log_mean + self.config.threshold * self.std() {
            ClipDecision::Abort
        } else {
            ClipDecision::Accept
        }
    }

    /// Fold an accepted step's norm into the moving statistics. The first
    /// update seeds the averages directly to avoid cold-start bias.
    pub fn update(&mut self, grad_norm: f64) {
        debug_assert!(grad_norm.is_finite());
        let x = grad_norm.max(1e-300).ln();
        if self.accepted == 0 {
            self.log_mean = x;
            self.log_sq_mean = x * x;
        } else {
            let d = self.config.decay;
            self.log_mean = d * self.log_mean + (1.0 - d) * x;
            self.log_sq_mean = d * self.log_sq_mean + (1.0 - d) * x * x;
        }
        self.accepted += 1;
    }

    pub fn bitwise_eq(&self, other: &GradNormStats) -> bool {
        self.accepted == other.accepted
            && self.log_mean.to_bits() == other.log_mean.to_bits()
            && self.log_sq_mean.to_bits() == other.log_sq_mean.to_bits()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_arithmetic() {
        let stats = GradNormStats::warmed(ClipConfig::default(), 1.0, 0.1);
        // abort strictly above μ + 4σ = 1.4
        assert_eq!(stats.check(1.5f64.exp()), ClipDecision::Abort);
        assert_eq!(stats.check(1.39f64.exp()), ClipDecision::Accept);
    }

    #[test]
    fn non_finite_always_aborts() {
        let cold = GradNormStats::new(ClipConfig::default());
        assert_eq!(cold.check(f64::NAN), ClipDecision::Abort);
        assert_eq!(cold.check(f64::INFINITY), ClipDecision::Abort);
        let warmed = GradNormStats::warmed(ClipConfig::default(), 0.0, 1.0);
        assert_eq!(warmed.check(f64::NAN), ClipDecision::Abort);
    }

    #[test]
    fn warmup_accepts_everything_finite() {
        let mut stats = GradNormStats::new(ClipConfig::default());
        for i in 0..100 {
            let norm = if i == 50 { 1e12 } else { 1.0 };
            assert_eq!(stats.check(norm), ClipDecision::Accept);
            stats.update(norm);
        }
        assert_eq!(stats.accepted_updates(), 100);
    }

    #[test]
    fn spikes_abort_after_warmup_and_leave_stats_unchanged() {
        let mut stats = GradNormStats::new(ClipConfig { warmup_steps: 10, ..Default::default() });
        for _ in 0..200 {
            stats.update(1.0f64.exp());
        }
        let before = stats.clone();
        let spike = (stats.mean() + 5.0 * stats.std().max(1e-6)).exp();
        assert_eq!(stats.check(spike), ClipDecision::Abort);
        assert!(stats.bitwise_eq(&before));
    }

    #[test]
    fn disabled_clipping_accepts_spikes() {
        let cfg = ClipConfig { enabled: false, ..Default::default() };
        let stats = GradNormStats::warmed(cfg, 0.0, 0.001);
        assert_eq!(stats.check(1e30), ClipDecision::Accept);
    }
}
