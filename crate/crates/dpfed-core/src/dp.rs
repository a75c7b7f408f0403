//! Differential-privacy mechanisms: gradient clipping, sensitivity
//! estimation, Gaussian noise, and noise-scale decay schedules.
//!
//! Noise is always calibrated as std = σ · S where S is the sensitivity of
//! the query the caller protects; callers that average over a batch scale the
//! draw themselves. `sigma0 = 0` is the documented noise-off switch: it
//! bypasses the schedule floor and produces exactly zero noise so that
//! disabled-noise runs stay bit-identical with raw training.

use crate::nn::Gradient;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("round {t} is outside the schedule horizon T={rounds}")]
    RoundOutOfRange { t: u64, rounds: u64 },
    #[error("every per-example gradient in the batch is zero; l2-max sensitivity is undefined")]
    DegenerateBatch,
    #[error("endpoint schedules need at least two rounds, got T={rounds}")]
    ShortHorizon { rounds: u64 },
    #[error("schedule endpoint sigma_end={sigma_end} must lie in (0, sigma0={sigma0}]")]
    BadEndpoint { sigma0: f64, sigma_end: f64 },
    #[error("{policy:?} schedule needs {field}")]
    MissingParameter { policy: DecayPolicy, field: &'static str },
}

/// How the per-iteration sensitivity S is chosen for per-example mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityMode {
    /// S = C, the clipping bound.
    FixedClip,
    /// S = min(C, largest per-layer l2 norm among the clipped per-example
    /// gradients of the batch).
    L2Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayPolicy {
    Fixed,
    Linear,
    Staircase,
    Exponential,
    Cyclic,
}

/// Noise-scale schedule σ_t over rounds t ∈ [0, T).
///
/// Closed forms (before clamping into [sigma_floor, sigma0]):
/// - linear:      σ0 (1 − γ t)
/// - staircase:   σ0 (1 − γ ⌊t / Γ⌋) with Γ = `period`
/// - exponential: σ0 e^{−γ t}
/// - cyclic:      (σ0 / 2)(cos(π (t mod c) / c) + 1), c = ⌈T / γ⌉ with γ cycles
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub policy: DecayPolicy,
    pub gamma: f64,
    /// Staircase step width Γ in rounds; unused by other policies.
    pub period: u64,
    /// Horizon T; querying t ≥ T is an error.
    pub rounds: u64,
    /// Lower clamp, applied whenever sigma0 > 0.
    pub sigma_floor: f64,
}

pub const DEFAULT_SIGMA_FLOOR: f64 = 0.5;

impl NoiseSchedule {
    pub fn fixed(rounds: u64) -> NoiseSchedule {
        NoiseSchedule { policy: DecayPolicy::Fixed, gamma: 0.0, period: 1, rounds, sigma_floor: DEFAULT_SIGMA_FLOOR }
    }

    /// Linear decay hitting `sigma_end` exactly at t = T − 1:
    /// γ = (1 − σ_end/σ0) / (T − 1).
    pub fn linear_endpoints(sigma0: f64, sigma_end: f64, rounds: u64, sigma_floor: f64) -> Result<NoiseSchedule, DpError> {
        if rounds < 2 {
            return Err(DpError::ShortHorizon { rounds });
        }
        if !(sigma_end > 0.0 && sigma_end <= sigma0) {
            return Err(DpError::BadEndpoint { sigma0, sigma_end });
        }
        let gamma = (1.0 - sigma_end / sigma0) / (rounds - 1) as f64;
        Ok(NoiseSchedule { policy: DecayPolicy::Linear, gamma, period: 1, rounds, sigma_floor })
    }

    /// Exponential decay hitting `sigma_end` exactly at t = T − 1:
    /// γ = ln(σ0/σ_end) / (T − 1).
    pub fn exponential_endpoints(
        sigma0: f64,
        sigma_end: f64,
        rounds: u64,
        sigma_floor: f64,
    ) -> Result<NoiseSchedule, DpError> {
        if rounds < 2 {
            return Err(DpError::ShortHorizon { rounds });
        }
        if !(sigma_end > 0.0 && sigma_end <= sigma0) {
            return Err(DpError::BadEndpoint { sigma0, sigma_end });
        }
        let gamma = (sigma0 / sigma_end).ln() / (rounds - 1) as f64;
        Ok(NoiseSchedule { policy: DecayPolicy::Exponential, gamma, period: 1, rounds, sigma_floor })
    }

    pub fn with_rate(policy: DecayPolicy, gamma: f64, period: u64, rounds: u64, sigma_floor: f64) -> NoiseSchedule {
        NoiseSchedule { policy, gamma, period, rounds, sigma_floor }
    }
}

/// Privacy hyperparameters of one experiment: clipping bound C, initial noise
/// scale σ0, failure probability δ, and the σ_t schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyParams {
    pub clip: f64,
    pub sigma0: f64,
    pub delta: f64,
    pub schedule: NoiseSchedule,
}

/// σ_t for round t. Errors if t ≥ T. `sigma0 = 0` returns exactly 0 (noise
/// off); otherwise the closed form is clamped into [sigma_floor, sigma0].
pub fn noise_scale_at(params: &PrivacyParams, t: u64) -> Result<f64, DpError> {
    let sched = &params.schedule;
    if t >= sched.rounds {
        return Err(DpError::RoundOutOfRange { t, rounds: sched.rounds });
    }
    let sigma0 = params.sigma0;
    if sigma0 == 0.0 {
        return Ok(0.0);
    }
    let raw = match sched.policy {
        DecayPolicy::Fixed => sigma0,
        DecayPolicy::Linear => sigma0 * (1.0 - sched.gamma * t as f64),
        DecayPolicy::Staircase => {
            assert!(sched.period >= 1, "staircase period must be at least 1");
            sigma0 * (1.0 - sched.gamma * (t / sched.period) as f64)
        }
        DecayPolicy::Exponential => sigma0 * (-sched.gamma * t as f64).exp(),
        DecayPolicy::Cyclic => {
            assert!(sched.gamma >= 1.0, "cyclic schedule needs at least one cycle");
            let cycle = ((sched.rounds as f64) / sched.gamma).ceil().max(1.0);
            let phase = (t % cycle as u64) as f64;
            (sigma0 / 2.0) * ((std::f64::consts::PI * phase / cycle).cos() + 1.0)
        }
    };
    Ok(raw.clamp(sched.sigma_floor, sigma0))
}

/// l2 norm of each layer block (weights and bias concatenated).
pub fn layer_l2_norms(g: &Gradient) -> Vec<f64> {
    g.layers
        .iter()
        .map(|l| {
            (l.weights.iter().map(|x| x * x).sum::<f64>() + l.bias.iter().map(|x| x * x).sum::<f64>()).sqrt()
        })
        .collect()
}

/// Scales the whole gradient by min(1, C / ‖g‖₂) where ‖g‖₂ is the global
/// norm over all layers. A gradient already inside the ball is returned
/// unchanged (same bits), so an effectively infinite C is a no-op.
pub fn clip_gradient(g: &Gradient, clip: f64) -> Gradient {
    assert!(clip > 0.0, "clipping bound must be positive");
    let norm = g.l2_norm();
    if norm <= clip {
        return g.clone();
    }
    let mut out = g.clone();
    out.scale(clip / norm);
    out
}

/// l2-max sensitivity of a clipped batch: min(C, max per-layer l2 norm over
/// all examples and layers). An all-zero batch has no usable scale and is an
/// error; the training loop substitutes 1e-6 · C in that case.
pub fn l2_max_sensitivity(clipped: &[Gradient], clip: f64) -> Result<f64, DpError> {
    let mut max_norm: f64 = 0.0;
    for g in clipped {
        for n in layer_l2_norms(g) {
            max_norm = max_norm.max(n);
        }
    }
    if max_norm == 0.0 {
        return Err(DpError::DegenerateBatch);
    }
    Ok(max_norm.min(clip))
}

/// Substitute scale for a degenerate (all-zero) batch.
pub fn degenerate_sensitivity(clip: f64) -> f64 {
    1e-6 * clip
}

/// Adds iid N(0, (sigma · sensitivity · scale)²) to every coordinate. A zero
/// std skips the draw loop entirely: the rng is untouched and every
/// coordinate keeps its exact bit pattern.
pub fn add_gaussian_noise(g: &mut Gradient, sigma: f64, sensitivity: f64, scale: f64, rng: &mut impl Rng) {
    let std = sigma * sensitivity * scale;
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("std must be finite");
    for v in g.flat_iter_mut() {
        *v += normal.sample(rng);
    }
}

/// A fresh noise tensor N(0, (σS)²) with the shape of `proto`.
pub fn gaussian_noise_like(proto: &Gradient, sigma: f64, sensitivity: f64, rng: &mut impl Rng) -> Gradient {
    let mut out = proto.clone();
    for v in out.flat_iter_mut() {
        *v = 0.0;
    }
    add_gaussian_noise(&mut out, sigma, sensitivity, 1.0, rng);
    out
}

/// Smallest ε the Gaussian mechanism certifies at (σ, δ):
/// ε = √(2 ln(1.25/δ)) / σ. Returns ∞ for σ ≤ 0 (no noise, no guarantee).
pub fn min_epsilon_for_sigma(sigma: f64, delta: f64) -> f64 {
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    if sigma <= 0.0 {
        return f64::INFINITY;
    }
    (2.0 * (1.25 / delta).ln()).sqrt() / sigma
}
