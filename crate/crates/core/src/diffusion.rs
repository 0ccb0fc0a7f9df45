//! Forward corruption: timestep and secondary-ratio sampling, response masking.
//!
//! The schedule is linear (`alpha_t = 1 - t`), so the masking rate equals `t`.
//! Timesteps are drawn from `[t_min, 1]` rather than `[0, 1]`; the `1/t`
//! weight of the NELBO is unbounded at zero.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-3;

/// How the secondary ratio `rho` is drawn given `t`.
///
/// `Uniform` draws from `U(0, 1 - t)`, `Fixed(k)` is `min(k, 1 - t)` and
/// `TruncatedUniform(k)` draws uniformly between `min(k, 1 - t)` and `1 - t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "snake_case")]
pub enum RhoStrategy {
    #[default]
    Uniform,
    Fixed(f64),
    TruncatedUniform(f64),
}

impl RhoStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RhoStrategy::Uniform => Ok(()),
            RhoStrategy::Fixed(k) | RhoStrategy::TruncatedUniform(k) => {
                if (0.0..1.0).contains(&k) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("rho k must lie in [0, 1), got {k}")))
                }
            }
        }
    }

    /// Draws `rho` for a given `t`.
    pub fn sample_rho(&self, t: f64, rng: &mut impl Rng) -> Result<f64> {
        self.validate()?;
        let room = (1.0 - t).max(0.0);
        let rho = match *self {
            RhoStrategy::Uniform => rng.random::<f64>() * room,
            RhoStrategy::Fixed(k) => k.min(room),
            RhoStrategy::TruncatedUniform(k) => {
                let lo = k.min(room);
                lo + rng.random::<f64>() * (room - lo)
            }
        };
        // keep t + rho <= 1 exactly
        Ok(rho.min(room))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepDraw {
    pub t: f64,
    pub rho: f64,
}

impl TimestepDraw {
    pub fn new(t: f64, rho: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) || rho < 0.0 || t + rho > 1.0 {
            return Err(Error::Contract(format!("invalid draw t={t}, rho={rho}")));
        }
        Ok(TimestepDraw { t, rho })
    }

    /// Masking rate of the probe input, `t + rho`.
    pub fn probe_rate(&self) -> f64 {
        (self.t + self.rho).min(1.0)
    }
}

/// `t ~ U[t_min, 1]`.
pub fn sample_t(t_min: f64, rng: &mut impl Rng) -> f64 {
    t_min + rng.random::<f64>() * (1.0 - t_min)
}

/// Draws `t` from `t_rng` and `rho` from `rho_rng`. Separate streams keep the
/// sequence of `t` values identical across rho strategies.
pub fn sample_timestep(
    strategy: RhoStrategy,
    t_min: f64,
    t_rng: &mut impl Rng,
    rho_rng: &mut impl Rng,
) -> Result<TimestepDraw> {
    if !(t_min > 0.0 && t_min < 1.0) {
        return Err(Error::Config(format!("t_min must lie in (0, 1), got {t_min}")));
    }
    strategy.validate()?;
    let t = sample_t(t_min, t_rng);
    let rho = strategy.sample_rho(t, rho_rng)?;
    TimestepDraw::new(t, rho)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Each response token masked independently with probability `rate`.
    #[default]
    Bernoulli,
    /// Exactly `round(rate * response_len)` response tokens masked.
    ExactCount,
}

/// A sequence with some response tokens replaced by `[MASK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSequence {
    pub ids: Vec<usize>,
    /// Sorted masked positions.
    pub mask_set: Vec<usize>,
    pub source_t: f64,
}

impl CorruptedSequence {
    pub fn is_masked(&self, pos: usize) -> bool {
        self.mask_set.binary_search(&pos).is_ok()
    }
}

/// Masks each response token of `clean` with probability `rate`.
///
/// Draws one uniform per response position in order, so the result is a
/// pure function of `(clean, rate, rng state)`.
pub fn corrupt(clean: &TokenSequence, rate: f64, mask_id: usize, rng: &mut impl Rng) -> CorruptedSequence {
    corrupt_with(clean, rate, mask_id, MaskingMode::Bernoulli, rng)
}

pub fn corrupt_with(
    clean: &TokenSequence,
    rate: f64,
    mask_id: usize,
    mode: MaskingMode,
    rng: &mut impl Rng,
) -> CorruptedSequence {
    let rate = rate.clamp(0.0, 1.0);
    let mut ids = clean.ids.clone();
    let range = clean.response_range();
    let mask_set: Vec<usize> = match mode {
        MaskingMode::Bernoulli => range.filter(|_| rng.random::<f64>() < rate).collect(),
        MaskingMode::ExactCount => {
            let n = ((rate * clean.response_len as f64).round() as usize).min(clean.response_len);
            let mut picked = rand::seq::index::sample(rng, clean.response_len, n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| i + clean.prompt_len).collect()
        }
    };
    for &p in &mask_set {
        ids[p] = mask_id;
    }
    CorruptedSequence {
        ids,
        mask_set,
        source_t: rate,
    }
}

/// Masks every response position; the fully corrupted `x_1`.
pub fn mask_all(clean: &TokenSequence, mask_id: usize) -> CorruptedSequence {
    let mut ids = clean.ids.clone();
    let mask_set: Vec<usize> = clean.response_range().collect();
    for &p in &mask_set {
        ids[p] = mask_id;
    }
    CorruptedSequence {
        ids,
        mask_set,
        source_t: 1.0,
    }
}

/// Masks exactly `positions` (which must be response positions).
pub fn mask_positions(clean: &TokenSequence, positions: &BTreeSet<usize>, mask_id: usize, rate: f64) -> Result<CorruptedSequence> {
    let range = clean.response_range();
    let mut ids = clean.ids.clone();
    for &p in positions {
        if !range.contains(&p) {
            return Err(Error::Contract(format!("position {p} is not a response position")));
        }
        ids[p] = mask_id;
    }
    Ok(CorruptedSequence {
        ids,
        mask_set: positions.iter().copied().collect(),
        source_t: rate,
    })
}

/// Restores the clean tokens at `positions`, all of which must be masked.
pub fn unmask_positions(
    corrupted: &CorruptedSequence,
    clean: &TokenSequence,
    positions: &BTreeSet<usize>,
) -> Result<CorruptedSequence> {
    let mut ids = corrupted.ids.clone();
    for &p in positions {
        if !corrupted.is_masked(p) {
            return Err(Error::Contract(format!("position {p} is not in the mask set")));
        }
        ids[p] = clean.ids[p];
    }
    let mask_set = corrupted
        .mask_set
        .iter()
        .copied()
        .filter(|p| !positions.contains(p))
        .collect();
    Ok(CorruptedSequence {
        ids,
        mask_set,
        source_t: corrupted.source_t,
    })
}
