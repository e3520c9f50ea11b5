//! Gaussian sequence model: signals, Besov norms, projections, and
//! distributed data generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::rng::{substream, tag};

/// Total coefficient count up to level `l_max`: d_L = sum_{l=1}^{L} 2^l.
pub fn dimension(l_max: u32) -> usize {
    assert!(l_max >= 1, "resolution level must be at least 1");
    (1usize << (l_max + 1)) - 2
}

/// A sequence-space signal, sparse by level. Coefficients are indexed by
/// (l, k) with l >= 1 and 1 <= k <= 2^l; anything not stored is zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Signal {
    coeffs: BTreeMap<(u32, u32), f64>,
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("index k={k} out of range for level l={l}")]
    IndexRange { l: u32, k: u32 },
    #[error("malformed signal text at line {0}")]
    Parse(usize),
}

impl Signal {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn set(&mut self, l: u32, k: u32, value: f64) -> Result<(), SignalError> {
        if l < 1 || k < 1 || (k as u64) > (1u64 << l) {
            return Err(SignalError::IndexRange { l, k });
        }
        if value == 0.0 {
            self.coeffs.remove(&(l, k));
        } else {
            self.coeffs.insert((l, k), value);
        }
        Ok(())
    }

    pub fn get(&self, l: u32, k: u32) -> f64 {
        self.coeffs.get(&(l, k)).copied().unwrap_or(0.0)
    }

    /// Largest level carrying a stored coefficient; 0 for the zero signal.
    pub fn max_level(&self) -> u32 {
        self.coeffs.keys().map(|&(l, _)| l).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.coeffs.iter().map(|(&(l, k), &v)| (l, k, v))
    }

    pub fn squared_l2(&self) -> f64 {
        self.coeffs.values().map(|v| v * v).sum()
    }

    /// Coefficients at levels 1..=l_max flattened in (l, k) order.
    pub fn to_vector(&self, l_max: u32) -> Vec<f64> {
        let mut out = vec![0.0; dimension(l_max)];
        for (&(l, k), &v) in &self.coeffs {
            if l <= l_max {
                out[flat_index(l, k)] = v;
            }
        }
        out
    }

    /// Plain-text serialization: header `levels=L`, then one `l k value`
    /// line per stored coefficient.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "levels={}", self.max_level());
        for (&(l, k), &v) in &self.coeffs {
            let _ = writeln!(out, "{} {} {}", l, k, v);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SignalError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(SignalError::Parse(1))?;
        if !header.trim().starts_with("levels=") {
            return Err(SignalError::Parse(1));
        }
        let mut sig = Signal::zero();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut field = || parts.next().ok_or(SignalError::Parse(i + 1));
            let l: u32 = field()?.parse().map_err(|_| SignalError::Parse(i + 1))?;
            let k: u32 = field()?.parse().map_err(|_| SignalError::Parse(i + 1))?;
            let v: f64 = field()?.parse().map_err(|_| SignalError::Parse(i + 1))?;
            sig.set(l, k, v)?;
        }
        Ok(sig)
    }
}

/// Position of coefficient (l, k) in the flat level-major layout.
pub fn flat_index(l: u32, k: u32) -> usize {
    debug_assert!(l >= 1 && k >= 1 && (k as u64) <= (1u64 << l));
    ((1usize << l) - 2) + (k as usize - 1)
}

/// Inverse of [`flat_index`].
pub fn level_of_index(idx: usize) -> (u32, u32) {
    let mut l = 1u32;
    let mut offset = 0usize;
    loop {
        let width = 1usize << l;
        if idx < offset + width {
            return (l, (idx - offset + 1) as u32);
        }
        offset += width;
        l += 1;
    }
}

/// Besov sequence norm with smoothness `s`, integrability `p`, fine index
/// `q`. `p = inf` and `q = inf` select the max / sup forms.
pub fn besov_norm(f: &Signal, s: f64, p: f64, q: f64) -> f64 {
    let l_max = f.max_level();
    if l_max == 0 {
        return 0.0;
    }
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    let mut level_terms = Vec::with_capacity(l_max as usize);
    for l in 1..=l_max {
        let coeffs: Vec<f64> = (1..=(1u32 << l)).map(|k| f.get(l, k)).collect();
        let lp = if p.is_infinite() {
            coeffs.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
        } else {
            coeffs.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
        };
        let weight = 2f64.powf(l as f64 * (s + 0.5 - inv_p));
        level_terms.push(weight * lp);
    }
    if q.is_infinite() {
        level_terms.into_iter().fold(0.0f64, f64::max)
    } else {
        level_terms.into_iter().map(|t| t.powf(q)).sum::<f64>().powf(1.0 / q)
    }
}

/// Zeroes every coefficient above level `l_max`.
pub fn project(f: &Signal, l_max: u32) -> Signal {
    assert!(l_max >= 1);
    let mut out = Signal::zero();
    for (l, k, v) in f.iter() {
        if l <= l_max {
            out.set(l, k, v).expect("indices already validated");
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spread {
    /// All mass on the first coefficient of the level.
    Spike,
    /// Mass spread evenly across the level.
    Uniform,
}

/// Alternative-hypothesis generator: a signal with all mass at level `l`
/// and exact l2 norm `rho`. rho = 0 is the null signal.
pub fn gen_signal_single_level(l: u32, rho: f64, spread: Spread, _seed: u64) -> Signal {
    assert!(rho >= 0.0);
    if rho == 0.0 {
        return Signal::zero();
    }
    let mut sig = Signal::zero();
    match spread {
        Spread::Spike => {
            sig.set(l, 1, rho).unwrap();
        }
        Spread::Uniform => {
            let per = rho * 2f64.powf(-(l as f64) / 2.0);
            for k in 1..=(1u32 << l) {
                sig.set(l, k, per).unwrap();
            }
        }
    }
    sig
}

/// Draws a signal from the centered Gaussian prior on levels 1..=l_max:
/// independent coordinates with variance c_scale^{-1/2} * rho^2 / d_L,
/// so the expected squared norm is c_scale^{-1/2} * rho^2.
pub fn gen_signal_prior(l_max: u32, rho: f64, c_scale: f64, seed: u64) -> Signal {
    assert!(rho >= 0.0 && c_scale > 0.0);
    let d = dimension(l_max);
    let sd = (c_scale.powf(-0.5) * rho * rho / d as f64).sqrt();
    let mut rng = substream(seed, &[tag::SIGNAL]);
    let mut sig = Signal::zero();
    for idx in 0..d {
        let (l, k) = level_of_index(idx);
        let z: f64 = rng.sample(StandardNormal);
        sig.set(l, k, sd * z).unwrap();
    }
    sig
}

/// m servers, each holding n noisy observations of the first d_L
/// coefficients of `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedData {
    /// servers[j][i] is observation i on server j, length d_L.
    pub servers: Vec<Vec<Vec<f64>>>,
    pub level: u32,
}

impl DistributedData {
    pub fn dim(&self) -> usize {
        dimension(self.level)
    }
}

/// Samples the sequence model: observation = f + sigma * noise, with one
/// independent substream per server so generation parallelizes safely.
pub fn sample_data(f: &Signal, cfg: &ModelConfig, l_max: u32, seed: u64) -> DistributedData {
    let d = dimension(l_max);
    let mean = f.to_vector(l_max);
    let servers = (0..cfg.m)
        .map(|j| {
            let mut rng = substream(seed, &[tag::DATA, j as u64]);
            (0..cfg.n)
                .map(|_| {
                    (0..d)
                        .map(|t| {
                            let z: f64 = rng.sample(StandardNormal);
                            mean[t] + cfg.sigma * z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    DistributedData { servers, level: l_max }
}
