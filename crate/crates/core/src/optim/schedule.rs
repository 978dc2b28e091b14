//! The two learning-rate schedules.
//!
//! Replica-scaled schedule:
//!   lr(t) = base · min(1 + t(n−1)/(np), n, n·(2n)^((s−nt)/(e−s)))
//! linear warmup to n·base over p steps, constant until the decay starts at
//! t = s/n, exponential decay until t = e/n where the third term equals
//! exactly base/2 (= the 5e-5 floor at base 1e-4), then held at the floor.
//!
//! Inverse-square-root schedule:
//!   lr(t) = r0/√d_model · min((t+1)/(p√p), 1/√(t+1))
//! maximized at t+1 = p where both arguments equal 1/√p.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RnmtScheduleConfig {
    /// Peak single-replica rate: the schedule starts here and warms up to n·base.
    #[serde(default = "default_rnmt_base")]
    pub base: f64,
    /// Concurrent replica count n.
    pub n: usize,
    /// Warmup steps p.
    pub p: usize,
    /// Decay start step s (in replica-scaled units; decay begins at t = s/n).
    pub s: usize,
    /// Decay end step e.
    pub e: usize,
    /// Post-decay constant.
    #[serde(default = "default_rnmt_floor")]
    pub floor: f64,
}

fn default_rnmt_base() -> f64 {
    1e-4
}

fn default_rnmt_floor() -> f64 {
    5e-5
}

impl RnmtScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.s == 0 || self.s >= self.e {
            return Err(Error::ConfigInvalid(format!(
                "replica schedule needs n ≥ 1, p > 0, 0 < s < e; got n={}, p={}, s={}, e={}",
                self.n, self.p, self.s, self.e
            )));
        }
        if self.base <= 0.0 || self.floor < 0.0 {
            return Err(Error::ConfigInvalid("schedule rates must be positive".into()));
        }
        Ok(())
    }
}

pub fn lr_rnmt(t: u64, cfg: &RnmtScheduleConfig) -> Result<f64> {
    lr_rnmt_real(t as f64, cfg)
}

/// Real-valued evaluation; the schedule is continuous in t, with the decay
/// ending at t = e/n where the formula's value is exactly base·n·(2n)^(−1) =
/// base/2 (the 5e-5 floor at base 1e-4), held constant afterwards.
pub fn lr_rnmt_real(t: f64, cfg: &RnmtScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    let (n, p, s, e) = (cfg.n as f64, cfg.p as f64, cfg.s as f64, cfg.e as f64);
    let warmup = 1.0 + t * (n - 1.0) / (n * p);
    let decay = n * (2.0 * n).powf((s - n * t) / (e - s));
    let lr = cfg.base * warmup.min(n).min(decay);
    if n * t >= e {
        Ok(lr.max(cfg.floor))
    } else {
        Ok(lr)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformerScheduleConfig {
    /// Magnitude constant r0.
    pub r0: f64,
    /// Warmup steps p.
    pub p: usize,
    pub d_model: usize,
}

impl TransformerScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.d_model == 0 || self.r0 <= 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "schedule needs p > 0, d_model > 0, r0 > 0; got p={}, d_model={}, r0={}",
                self.p, self.d_model, self.r0
            )));
        }
        Ok(())
    }
}

pub fn lr_transformer(t: u64, cfg: &TransformerScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    let p = cfg.p as f64;
    let t1 = t as f64 + 1.0;
    let warmup = t1 / (p * p.sqrt());
    let decay = 1.0 / t1.sqrt();
    Ok(cfg.r0 / (cfg.d_model as f64).sqrt() * warmup.min(decay))
}
