//! Experiment configuration shared by every module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

fn default_kappa_tilde() -> f64 {
    1.0
}

/// Model and privacy parameters for one experiment.
///
/// `p` and `q` accept `f64::INFINITY` as the sentinel for the sup-norm
/// forms of the Besov norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of servers m.
    pub m: usize,
    /// Observations per server n.
    pub n: usize,
    /// Known noise level of the sequence model.
    pub sigma: f64,
    /// Besov smoothness s.
    pub s: f64,
    /// Besov radius R.
    pub r: f64,
    /// Besov integrability index p in [2, inf].
    pub p: f64,
    /// Besov fine index q in [1, inf].
    pub q: f64,
    /// Privacy parameter epsilon.
    pub epsilon: f64,
    /// Privacy parameter delta.
    pub delta: f64,
    /// Target risk level alpha.
    pub alpha: f64,
    /// Calibration constant used in clipping thresholds and Lipschitz
    /// bounds. The theory only requires it "large enough"; level control
    /// is handled by Monte Carlo calibration downstream.
    #[serde(default = "default_kappa_tilde")]
    pub kappa_tilde: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("field {0} must be positive")]
    NonPositive(&'static str),
    #[error("epsilon must lie in (1/(m*n), 1], got {0}")]
    EpsilonRange(f64),
    #[error("delta must lie in [0, 1), got {0}")]
    DeltaRange(f64),
    #[error("alpha must lie in (0, 1), got {0}")]
    AlphaRange(f64),
    #[error("p must lie in [2, inf], got {0}")]
    PRange(f64),
    #[error("q must lie in [1, inf], got {0}")]
    QRange(f64),
}

impl ModelConfig {
    /// Total sample size N = m * n.
    pub fn total_n(&self) -> usize {
        self.m * self.n
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.m == 0 {
            return Err(ConfigError::NonPositive("m"));
        }
        if self.n == 0 {
            return Err(ConfigError::NonPositive("n"));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("s", self.s),
            ("r", self.r),
            ("kappa_tilde", self.kappa_tilde),
        ] {
            if !(v > 0.0) {
                return Err(ConfigError::NonPositive(name));
            }
        }
        let n_total = (self.m * self.n) as f64;
        if !(self.epsilon > 1.0 / n_total && self.epsilon <= 1.0) {
            return Err(ConfigError::EpsilonRange(self.epsilon));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(ConfigError::DeltaRange(self.delta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ConfigError::AlphaRange(self.alpha));
        }
        if !(self.p >= 2.0) {
            return Err(ConfigError::PRange(self.p));
        }
        if !(self.q >= 1.0) {
            return Err(ConfigError::QRange(self.q));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            m: 10,
            n: 50,
            sigma: 1.0,
            s: 1.0,
            r: 1.0,
            p: 2.0,
            q: 2.0,
            epsilon: 0.5,
            delta: 1e-3,
            alpha: 0.05,
            kappa_tilde: 1.0,
        }
    }

    #[test]
    fn valid_config_passes() {
        assert_eq!(base().validate(), Ok(()));
    }

    #[test]
    fn epsilon_below_one_over_n_rejected() {
        let mut c = base();
        c.epsilon = 1.0 / 501.0;
        assert!(matches!(c.validate(), Err(ConfigError::EpsilonRange(_))));
    }

    #[test]
    fn infinite_p_q_accepted() {
        let mut c = base();
        c.p = f64::INFINITY;
        c.q = f64::INFINITY;
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn p_below_two_rejected() {
        let mut c = base();
        c.p = 1.5;
        assert!(matches!(c.validate(), Err(ConfigError::PRange(_))));
    }
}
