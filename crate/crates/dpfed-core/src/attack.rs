//! Gradient-leakage reconstruction attack: starting from a seed image, run
//! gradient descent on the input so that the model gradient it induces
//! matches a captured target gradient. Success means the reconstruction
//! lands within an RMSE threshold of the true victim example.
//!
//! The attacker sees exactly one captured surface (the shared update, the
//! client-side update, or the victim's per-example gradient, all in
//! gradient units) and knows the true label.

use crate::federation::{capture_surfaces, FedError, FederationConfig, SurfaceCapture};
use crate::nn::{input_gradient_of_match_loss, Example, Gradient, ModelParams};
use crate::seed::stream;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("rmse compares vectors of lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("attack campaign needs at least one victim")]
    NoVictims,
    #[error("invalid attack configuration: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Fed(#[from] FedError),
}

/// Which captured signal the attacker reconstructs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    /// The update observed at the server after any server-side treatment.
    Type0,
    /// The update leaving the client, after any client-side treatment.
    Type1,
    /// The designated victim's in-iteration per-example gradient.
    Type2,
}

impl std::fmt::Display for Surface {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Surface::Type0 => "type0",
            Surface::Type1 => "type1",
            Surface::Type2 => "type2",
        })
    }
}

impl std::str::FromStr for Surface {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "type0" => Ok(Surface::Type0),
            "type1" => Ok(Surface::Type1),
            "type2" => Ok(Surface::Type2),
            other => Err(format!("unknown attack surface {other:?} (expected type0, type1, or type2)")),
        }
    }
}

/// How the attacker initializes the reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedKind {
    /// i.i.d. uniform [0, 1) pixels from the attack rng.
    Random,
    /// A fixed 4x4 intensity tile, independent of any rng.
    Patterned,
}

impl std::fmt::Display for SeedKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SeedKind::Random => "random",
            SeedKind::Patterned => "patterned",
        })
    }
}

impl std::str::FromStr for SeedKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SeedKind::Random),
            "patterned" => Ok(SeedKind::Patterned),
            other => Err(format!("unknown seed kind {other:?} (expected random or patterned)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub surface: Surface,
    pub seed_kind: SeedKind,
    /// Reconstruction iteration cap (tau).
    pub max_iterations: u32,
    /// Initial input-space step size for the matcher descent.
    pub attack_lr: f64,
    /// RMSE below this value counts as a successful reconstruction.
    pub success_rmse: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            surface: Surface::Type2,
            seed_kind: SeedKind::Random,
            max_iterations: 300,
            attack_lr: 0.05,
            success_rmse: 0.1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.max_iterations < 1 {
            return Err(AttackError::BadConfig { reason: "max_iterations must be >= 1".into() });
        }
        if !(self.attack_lr > 0.0 && self.attack_lr.is_finite()) {
            return Err(AttackError::BadConfig {
                reason: format!("attack_lr {} must be finite and > 0", self.attack_lr),
            });
        }
        if !(self.success_rmse > 0.0 && self.success_rmse.is_finite()) {
            return Err(AttackError::BadConfig {
                reason: format!("success_rmse {} must be finite and > 0", self.success_rmse),
            });
        }
        Ok(())
    }
}

/// Outcome of one victim reconstruction. `resilient` is true exactly when
/// the final reconstruction distance is at or above the success threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub resilient: bool,
    /// RMSE between the reconstruction and the true victim features.
    pub recon_distance: f64,
    pub iterations_used: u32,
    /// Match loss after every completed iteration (non-increasing).
    pub per_iteration_loss: Vec<f64>,
}

/// Campaign aggregate across victims.
#[derive(Clone, Debug, PartialEq)]
pub struct CampaignSummary {
    /// Fraction of victims reconstructed within the success threshold.
    pub asr: f64,
    pub mean_distance: f64,
    pub mean_iterations: f64,
    pub reports: Vec<AttackReport>,
}

/// Root-mean-square error between two equal-length vectors.
pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64, AttackError> {
    if a.len() != b.len() {
        return Err(AttackError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.is_empty() {
        return Err(AttackError::LengthMismatch { a: 0, b: 0 });
    }
    let sum_sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum_sq / a.len() as f64).sqrt())
}

/// Builds the starting point for the reconstruction. The patterned seed is
/// a deterministic intensity tile and never touches the rng; the random
/// seed draws uniform [0, 1) pixels.
pub fn init_seed(kind: SeedKind, input_dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    match kind {
        SeedKind::Random => (0..input_dim).map(|_| rng.gen::<f64>()).collect(),
        SeedKind::Patterned => {
            let side = (input_dim as f64).sqrt().round() as usize;
            if side * side == input_dim {
                (0..input_dim)
                    .map(|i| {
                        let (r, c) = (i / side, i % side);
                        ((r % 4) * 4 + (c % 4)) as f64 / 15.0
                    })
                    .collect()
            } else {
                (0..input_dim).map(|i| (i % 16) as f64 / 15.0).collect()
            }
        }
    }
}

/// Match loss below this is treated as exact convergence.
const CONVERGENCE_TOL: f64 = 1e-8;
const STEP_GROWTH: f64 = 1.5;
const MAX_STEP_FACTOR: f64 = 100.0;
const MAX_HALVINGS: u32 = 40;
// A descent that improves the loss by less than 0.1% over 30 iterations is
// stuck in a flat basin; the remaining budget is better spent on a restart.
const STALL_WINDOW: usize = 30;
const STALL_REL_IMPROVEMENT: f64 = 1e-3;

fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Gradient descent with a backtracking line search on the gradient-match
/// loss, starting from `x0`. Steps are accepted only when the loss does not
/// increase, so the recorded loss trace is non-increasing. Non-finite loss
/// or gradient values abort the attack as a divergence: the report is
/// resilient with the full iteration budget spent and the distance taken at
/// the last finite iterate.
pub fn reconstruct_from(
    model: &ModelParams,
    target: &Gradient,
    label: usize,
    x0: Vec<f64>,
    victim_features: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackReport, AttackError> {
    cfg.validate()?;
    if x0.len() != victim_features.len() {
        return Err(AttackError::LengthMismatch { a: x0.len(), b: victim_features.len() });
    }
    let mut x = x0;
    clamp_unit(&mut x);
    let mut per_iteration_loss = Vec::new();
    let mut iterations_used: u32 = 0;
    let mut diverged = false;

    let mut current = match input_gradient_of_match_loss(model, &x, label, target) {
        Ok(m) if m.loss.is_finite() => m,
        // a non-finite starting point counts as an immediate divergence
        _ => {
            let recon_distance = rmse(&x, victim_features)?;
            return Ok(AttackReport {
                resilient: true,
                recon_distance,
                iterations_used: cfg.max_iterations,
                per_iteration_loss,
            });
        }
    };

    let mut step = cfg.attack_lr;
    let max_step = MAX_STEP_FACTOR * cfg.attack_lr;
    if current.loss >= CONVERGENCE_TOL {
        'outer: for _ in 0..cfg.max_iterations {
            if current.input_grad.iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            let mut accepted = None;
            let mut trial_step = step;
            for _ in 0..=MAX_HALVINGS {
                let mut candidate: Vec<f64> = x
                    .iter()
                    .zip(&current.input_grad)
                    .map(|(xi, gi)| xi - trial_step * gi)
                    .collect();
                clamp_unit(&mut candidate);
                let trial = match input_gradient_of_match_loss(model, &candidate, label, target) {
                    Ok(t) if t.loss.is_finite() => t,
                    _ => {
                        diverged = true;
                        break 'outer;
                    }
                };
                if trial.loss <= current.loss {
                    accepted = Some((candidate, trial, trial_step));
                    break;
                }
                trial_step *= 0.5;
            }
            match accepted {
                Some((candidate, trial, used_step)) => {
                    x = candidate;
                    current = trial;
                    step = (used_step * STEP_GROWTH).min(max_step);
                    iterations_used += 1;
                    per_iteration_loss.push(current.loss);
                    if current.loss < CONVERGENCE_TOL {
                        break;
                    }
                    let n = per_iteration_loss.len();
                    if n > STALL_WINDOW {
                        let before = per_iteration_loss[n - 1 - STALL_WINDOW];
                        let improvement = before - per_iteration_loss[n - 1];
                        if improvement <= STALL_REL_IMPROVEMENT * before.abs() {
                            break;
                        }
                    }
                }
                // the line search found no non-increasing step: numerical floor
                None => break,
            }
        }
    }

    let recon_distance = rmse(&x, victim_features)?;
    if diverged {
        return Ok(AttackReport {
            resilient: true,
            recon_distance,
            iterations_used: cfg.max_iterations,
            per_iteration_loss,
        });
    }
    Ok(AttackReport {
        resilient: !(recon_distance < cfg.success_rmse),
        recon_distance,
        iterations_used,
        per_iteration_loss,
    })
}

/// Full single-victim attack: build the seed image, then run the matcher
/// descent against the captured target gradient.
/// Runs [`reconstruct_from`] with restarts: the first start honors
/// `cfg.seed_kind`, each later start draws a fresh random seed image, and
/// every start spends from one shared budget of `cfg.max_iterations`
/// descent steps. Returns on the first successful start; when all fail,
/// reports the start with the lowest final match loss (the reconstruction
/// the attacker would submit) with the concatenated loss trace.
pub fn reconstruct(
    model: &ModelParams,
    target: &Gradient,
    label: usize,
    victim_features: &[f64],
    cfg: &AttackConfig,
    rng: &mut ChaCha12Rng,
) -> Result<AttackReport, AttackError> {
    cfg.validate()?;
    let mut remaining = cfg.max_iterations;
    let mut total: u32 = 0;
    let mut trace: Vec<f64> = Vec::new();
    let mut best: Option<(f64, AttackReport)> = None;
    let mut kind = cfg.seed_kind;
    while remaining > 0 {
        let x0 = init_seed(kind, victim_features.len(), rng);
        kind = SeedKind::Random;
        let seg_cfg = AttackConfig { max_iterations: remaining, ..cfg.clone() };
        let mut report = reconstruct_from(model, target, label, x0, victim_features, &seg_cfg)?;
        total += report.iterations_used;
        trace.extend(report.per_iteration_loss.iter().copied());
        if !report.resilient {
            report.iterations_used = total;
            report.per_iteration_loss = trace;
            return Ok(report);
        }
        let final_loss =
            report.per_iteration_loss.last().copied().unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(loss, _)| final_loss < *loss) {
            best = Some((final_loss, report.clone()));
        }
        // a start that accepted no step still burns budget, or exhaustion
        // at a hard target would loop forever
        remaining = remaining.saturating_sub(report.iterations_used.max(1));
    }
    let (_, mut report) = best.expect("at least one start ran");
    report.iterations_used = total;
    report.per_iteration_loss = trace;
    Ok(report)
}

fn pick_surface(capture: SurfaceCapture, surface: Surface) -> Gradient {
    match surface {
        Surface::Type0 => capture.type0,
        Surface::Type1 => capture.type1,
        Surface::Type2 => capture.type2,
    }
}

/// Attacks every victim independently (in parallel) against the surface
/// exposed by `fed_cfg.algorithm` and aggregates the success rate. Victim
/// `v` derives its capture noise from stream "victim" and its seed image
/// from stream "attack", both indexed by `v`, so results do not depend on
/// scheduling.
pub fn attack_campaign(
    model: &ModelParams,
    victims: &[Example],
    fed_cfg: &FederationConfig,
    cfg: &AttackConfig,
) -> Result<CampaignSummary, AttackError> {
    cfg.validate()?;
    if victims.is_empty() {
        return Err(AttackError::NoVictims);
    }
    let reports: Vec<AttackReport> = victims
        .par_iter()
        .enumerate()
        .map(|(v, victim)| {
            let mut capture_rng = stream(cfg.seed, "victim", &[v as u64]);
            let capture = capture_surfaces(model, victim, fed_cfg, &mut capture_rng)?;
            let target = pick_surface(capture, cfg.surface);
            let mut attack_rng = stream(cfg.seed, "attack", &[v as u64]);
            reconstruct(model, &target, victim.label, &victim.features, cfg, &mut attack_rng)
        })
        .collect::<Result<_, AttackError>>()?;
    let n = reports.len() as f64;
    let successes = reports.iter().filter(|r| !r.resilient).count() as f64;
    let mean_distance = reports.iter().map(|r| r.recon_distance).sum::<f64>() / n;
    let mean_iterations = reports.iter().map(|r| r.iterations_used as f64).sum::<f64>() / n;
    Ok(CampaignSummary { asr: successes / n, mean_distance, mean_iterations, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::{NoiseSchedule, PrivacyParams, SensitivityMode};
    use crate::federation::{AlgorithmVariant, NoisePlacement};
    use crate::nn::example_gradient;

    fn tiny_model(seed: u64) -> ModelParams {
        ModelParams::init(&[16, 8, 3], &mut stream(seed, "init", &[]))
    }

    fn tiny_victim(seed: u64) -> Example {
        let mut rng = stream(seed, "data", &[]);
        let features: Vec<f64> = (0..16).map(|_| rng.gen::<f64>()).collect();
        Example { features, label: 1 }
    }

    fn fed_cfg(algorithm: AlgorithmVariant) -> FederationConfig {
        FederationConfig {
            n_clients: 4,
            clients_per_round: 2,
            rounds: 2,
            local_iters: 1,
            batch_size: 1,
            learning_rate: 0.1,
            algorithm,
            privacy: PrivacyParams {
                clip: 4.0,
                sigma0: 1.0,
                delta: 1e-5,
                schedule: NoiseSchedule::fixed(2),
            },
            sensitivity: SensitivityMode::FixedClip,
            noise_placement: NoisePlacement::PostAverage,
            seed: 5,
        }
    }

    #[test]
    fn rmse_matches_hand_computation() {
        let got = rmse(&[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((got - 0.7071067811865476).abs() < 1e-12, "got {got}");
        assert_eq!(rmse(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            rmse(&[1.0], &[1.0, 2.0]).unwrap_err(),
            AttackError::LengthMismatch { a: 1, b: 2 }
        ));
    }

    #[test]
    fn patterned_seed_is_a_tile_and_ignores_the_rng() {
        let mut rng = stream(0, "attack", &[0]);
        let before: u64 = {
            let mut probe = rng.clone();
            probe.gen()
        };
        let seed16 = init_seed(SeedKind::Patterned, 16, &mut rng);
        // 16 = 4x4, so the tile covers the image exactly once: i/15
        for (i, v) in seed16.iter().enumerate() {
            assert!((v - i as f64 / 15.0).abs() < 1e-15);
        }
        let after: u64 = rng.gen();
        assert_eq!(before, after, "patterned seed must not consume rng state");

        let seed10 = init_seed(SeedKind::Patterned, 10, &mut rng);
        for (i, v) in seed10.iter().enumerate() {
            assert!((v - (i % 16) as f64 / 15.0).abs() < 1e-15);
        }

        let mut rng_a = stream(0, "attack", &[1]);
        let mut rng_b = stream(0, "attack", &[1]);
        let ra = init_seed(SeedKind::Random, 16, &mut rng_a);
        let rb = init_seed(SeedKind::Random, 16, &mut rng_b);
        assert_eq!(ra, rb);
        assert!(ra.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn starting_at_the_victim_is_a_fixed_point() {
        let model = tiny_model(1);
        let victim = tiny_victim(2);
        let target = example_gradient(&model, &victim);
        let cfg = AttackConfig::default();
        let report = reconstruct_from(
            &model,
            &target,
            victim.label,
            victim.features.clone(),
            &victim.features,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.iterations_used, 0, "victim start must already match");
        assert!(!report.resilient);
        assert!(report.recon_distance < 1e-12);
    }

    #[test]
    fn accepted_losses_never_increase() {
        let model = tiny_model(3);
        let victim = tiny_victim(4);
        let target = example_gradient(&model, &victim);
        let cfg = AttackConfig { max_iterations: 120, ..AttackConfig::default() };
        let mut rng = stream(7, "attack", &[0]);
        let report =
            reconstruct(&model, &target, victim.label, &victim.features, &cfg, &mut rng).unwrap();
        assert!(!report.per_iteration_loss.is_empty());
        for pair in report.per_iteration_loss.windows(2) {
            assert!(pair[1] <= pair[0], "loss increased: {} -> {}", pair[0], pair[1]);
        }
        assert!(report.iterations_used <= cfg.max_iterations);
        assert_eq!(report.iterations_used as usize, report.per_iteration_loss.len());
    }

    #[test]
    fn clean_gradient_attack_succeeds_and_noisy_attack_fails() {
        let model = tiny_model(5);
        let victim = tiny_victim(6);
        let cfg = AttackConfig { seed: 11, ..AttackConfig::default() };

        let clean = attack_campaign(&model, &[victim.clone()], &fed_cfg(AlgorithmVariant::NonPrivate), &cfg)
            .unwrap();
        assert_eq!(clean.asr, 1.0, "distance {}", clean.mean_distance);
        assert!(clean.mean_iterations >= 1.0);

        let mut noisy_fed = fed_cfg(AlgorithmVariant::FedAlphaCdpSigma);
        noisy_fed.sensitivity = SensitivityMode::L2Max;
        noisy_fed.privacy.schedule = NoiseSchedule::linear_endpoints(6.0, 3.0, 2, 0.5).unwrap();
        noisy_fed.privacy.sigma0 = 6.0;
        let noisy = attack_campaign(&model, &[victim], &noisy_fed, &cfg).unwrap();
        assert_eq!(noisy.asr, 0.0, "distance {}", noisy.mean_distance);
        assert!(noisy.mean_distance > clean.mean_distance);
    }

    #[test]
    fn campaign_is_deterministic_and_order_stable() {
        let model = tiny_model(8);
        let victims: Vec<Example> = (0..4).map(|i| tiny_victim(20 + i)).collect();
        let cfg = AttackConfig { seed: 3, max_iterations: 60, ..AttackConfig::default() };
        let fed = fed_cfg(AlgorithmVariant::NonPrivate);
        let a = attack_campaign(&model, &victims, &fed, &cfg).unwrap();
        let b = attack_campaign(&model, &victims, &fed, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            attack_campaign(&model, &[], &fed, &cfg).unwrap_err(),
            AttackError::NoVictims
        ));
    }
}
