//! Federated training simulator: client population, per-round sampling,
//! local training under each algorithm variant, server aggregation, the
//! compression/perturbation baselines, and the instrumented capture hooks
//! the reconstruction attack reads from.
//!
//! Per-example DP variants sanitize inside every local iteration, so the
//! transmitted update is a function of noisy iterates only; raw per-example
//! gradients never escape the iteration scope. Client-update DP variants
//! train raw and sanitize the whole update once per round, either before
//! transmission (client placement) or on reception (server placement).

use crate::accountant::{
    budget_exhausted, spend_or_zero, AccountError, AccountingMethod, LedgerEntry, Mechanism,
    MomentsAccountant, PrivacyLedger,
};
use crate::data::{partition, DataError, Dataset};
use crate::dp::{
    add_gaussian_noise, clip_gradient, degenerate_sensitivity, l2_max_sensitivity, noise_scale_at,
    DecayPolicy, DpError, PrivacyParams, SensitivityMode,
};
use crate::nn::{
    accuracy, batch_gradient, per_example_gradients, sgd_step, apply_delta, average_gradients,
    Example, Gradient, ModelParams, NnError, example_gradient,
};
use crate::report::{RoundRow, RunSummary, TrainingReport};
use crate::seed::stream;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("clients_per_round {k} must lie in 1..={n}")]
    BadClientCount { k: usize, n: usize },
    #[error("batch size {batch} exceeds client {client}'s dataset of {have} examples")]
    BatchTooLarge { batch: usize, client: usize, have: usize },
    #[error("aggregate needs at least one update")]
    NoUpdates,
    #[error("update from client {client} is not shape-congruent with the global model")]
    ShapeMismatch { client: usize },
    #[error("invalid configuration: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Account(#[from] AccountError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// The training algorithm run by every client.
#[derive(Clone, Debug, PartialEq)]
pub enum AlgorithmVariant {
    /// Plain FedAvg, no privacy mechanism.
    NonPrivate,
    /// Client-update DP, noise injected at the server on reception.
    FedSdpServer,
    /// Client-update DP, noise injected at the client before transmission.
    FedSdpClient,
    /// Per-example DP with fixed clip sensitivity and fixed noise scale.
    FedCdp,
    /// Per-example DP with l2-max sensitivity and fixed noise scale.
    FedAlphaCdp,
    /// Per-example DP with l2-max sensitivity and a decaying noise schedule.
    FedAlphaCdpSigma,
    /// Baseline: zero out the mu% smallest-magnitude update coordinates.
    PruneThreshold { mu_percent: f64 },
    /// Baseline: keep a random fraction of above-threshold coordinates.
    PruneRandomDssgd { keep_fraction: f64, threshold: f64 },
    /// Baseline: uncalibrated additive Gaussian noise (no ledger entry).
    AdditiveNoise { variance: f64 },
}

impl AlgorithmVariant {
    pub fn token(&self) -> &'static str {
        match self {
            AlgorithmVariant::NonPrivate => "non_private",
            AlgorithmVariant::FedSdpServer => "fed_sdp_server",
            AlgorithmVariant::FedSdpClient => "fed_sdp_client",
            AlgorithmVariant::FedCdp => "fed_cdp",
            AlgorithmVariant::FedAlphaCdp => "fed_alpha_cdp",
            AlgorithmVariant::FedAlphaCdpSigma => "fed_alpha_cdp_sigma",
            AlgorithmVariant::PruneThreshold { .. } => "prune_threshold",
            AlgorithmVariant::PruneRandomDssgd { .. } => "prune_random_dssgd",
            AlgorithmVariant::AdditiveNoise { .. } => "additive_noise",
        }
    }

    /// Variants that sanitize per-example gradients inside local iterations.
    pub fn is_per_example_dp(&self) -> bool {
        matches!(
            self,
            AlgorithmVariant::FedCdp
                | AlgorithmVariant::FedAlphaCdp
                | AlgorithmVariant::FedAlphaCdpSigma
        )
    }

    pub fn is_client_update_dp(&self) -> bool {
        matches!(self, AlgorithmVariant::FedSdpServer | AlgorithmVariant::FedSdpClient)
    }

    fn validate(&self) -> Result<(), FedError> {
        let bad = |reason: String| Err(FedError::BadConfig { reason });
        match *self {
            AlgorithmVariant::PruneThreshold { mu_percent } => {
                if !(0.0..100.0).contains(&mu_percent) {
                    return bad(format!("prune percentage {mu_percent} must lie in [0, 100)"));
                }
            }
            AlgorithmVariant::PruneRandomDssgd { keep_fraction, threshold } => {
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return bad(format!("keep fraction {keep_fraction} must lie in (0, 1]"));
                }
                if !(threshold >= 0.0 && threshold.is_finite()) {
                    return bad(format!("prune threshold {threshold} must be finite and >= 0"));
                }
            }
            AlgorithmVariant::AdditiveNoise { variance } => {
                if !(variance >= 0.0 && variance.is_finite()) {
                    return bad(format!("noise variance {variance} must be finite and >= 0"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Where per-example noise enters relative to batch averaging. The two
/// placements differ by a 1/B factor in effective noise variance:
/// post-average injects a single N(0, sigma^2 S^2) draw into the averaged
/// clipped gradient, per-example injects one such draw per example before
/// averaging. Both are charged identically in the ledger (the accounting is
/// conservative for the per-example placement).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NoisePlacement {
    PerExampleThenAverage,
    #[default]
    PostAverage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u64,
    pub local_iters: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub algorithm: AlgorithmVariant,
    pub privacy: PrivacyParams,
    pub sensitivity: SensitivityMode,
    pub noise_placement: NoisePlacement,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |reason: String| Err(FedError::BadConfig { reason });
        if self.clients_per_round < 1 || self.clients_per_round > self.n_clients {
            return Err(FedError::BadClientCount {
                k: self.clients_per_round,
                n: self.n_clients,
            });
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.local_iters < 1 || self.rounds < 1 {
            return bad("rounds and local_iters must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        self.algorithm.validate()?;
        let p = &self.privacy;
        if !(p.clip > 0.0 && p.clip.is_finite()) {
            return bad(format!("clip bound {} must be finite and > 0", p.clip));
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return bad(format!("delta {} must lie in (0, 1)", p.delta));
        }
        if !(p.sigma0 >= 0.0 && p.sigma0.is_finite()) {
            return bad(format!("sigma {} must be finite and >= 0", p.sigma0));
        }
        let policy = p.schedule.policy;
        match self.algorithm {
            AlgorithmVariant::FedCdp => {
                if self.sensitivity != SensitivityMode::FixedClip {
                    return bad("fed_cdp requires sensitivity = fixed_clip".into());
                }
                if policy != DecayPolicy::Fixed {
                    return bad("fed_cdp requires a fixed noise scale".into());
                }
            }
            AlgorithmVariant::FedAlphaCdp => {
                if self.sensitivity != SensitivityMode::L2Max {
                    return bad("fed_alpha_cdp requires sensitivity = l2_max".into());
                }
                if policy != DecayPolicy::Fixed {
                    return bad("fed_alpha_cdp requires a fixed noise scale".into());
                }
            }
            AlgorithmVariant::FedAlphaCdpSigma => {
                if self.sensitivity != SensitivityMode::L2Max {
                    return bad("fed_alpha_cdp_sigma requires sensitivity = l2_max".into());
                }
                if policy == DecayPolicy::Fixed {
                    return bad("fed_alpha_cdp_sigma requires a decaying noise schedule".into());
                }
            }
            AlgorithmVariant::FedSdpServer | AlgorithmVariant::FedSdpClient => {
                if policy != DecayPolicy::Fixed {
                    return bad("fed_sdp uses a fixed noise scale".into());
                }
            }
            _ => {}
        }
        if self.algorithm.is_per_example_dp() || self.algorithm.is_client_update_dp() {
            if self.privacy.schedule.rounds != self.rounds {
                return bad(format!(
                    "noise schedule horizon {} must equal the round count {}",
                    self.privacy.schedule.rounds, self.rounds
                ));
            }
        }
        Ok(())
    }
}

/// When training continues past a fixed-round stop (budget or accuracy
/// stops), the noise schedule holds its final value.
fn effective_sigma(privacy: &PrivacyParams, t: u64) -> Result<f64, DpError> {
    noise_scale_at(privacy, t.min(privacy.schedule.rounds.saturating_sub(1)))
}

/// One client's transmitted model delta for a round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundUpdate {
    pub client_id: usize,
    pub delta: Gradient,
    pub sanitized: bool,
}

/// Stop condition evaluated after every round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    /// Run exactly the configured number of rounds.
    Rounds,
    /// Stop once the accounted spend strictly exceeds `eps_target`.
    Budget { eps_target: f64, method: AccountingMethod },
    /// Stop once validation accuracy reaches `accuracy`.
    TargetAccuracy { accuracy: f64 },
}

/// Draws `k` distinct client ids uniformly without replacement.
pub fn sample_clients(n: usize, k: usize, rng: &mut ChaCha12Rng) -> Result<Vec<usize>, FedError> {
    if k < 1 || k > n {
        return Err(FedError::BadClientCount { k, n });
    }
    // partial Fisher-Yates: the first k slots end up uniform without replacement
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

fn sample_batch(n: usize, batch: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// Plain local SGD for `local_iters` iterations; returns the raw update
/// W_L − W(t). Batches are drawn uniformly with replacement.
pub fn local_train_raw(
    model: &ModelParams,
    data: &[Example],
    cfg: &FederationConfig,
    client_id: usize,
    batch_rng: &mut ChaCha12Rng,
) -> Result<RoundUpdate, FedError> {
    if data.len() < cfg.batch_size {
        return Err(FedError::BatchTooLarge {
            batch: cfg.batch_size,
            client: client_id,
            have: data.len(),
        });
    }
    let mut w = model.clone();
    for _ in 0..cfg.local_iters {
        let ixs = sample_batch(data.len(), cfg.batch_size, batch_rng);
        let batch: Vec<Example> = ixs.iter().map(|&i| data[i].clone()).collect();
        let g = batch_gradient(&w, &batch);
        w = sgd_step(&w, &g, cfg.learning_rate);
    }
    Ok(RoundUpdate { client_id, delta: Gradient::between(&w, model), sanitized: false })
}

/// Per-example DP local training: every iteration clips per-example
/// gradients, assigns the sensitivity, injects Gaussian noise, and descends
/// on the sanitized gradient only. Emits one ledger entry per iteration
/// with the instance-level sampling rate q = B*K_t/|D|: an example lands in
/// some batch of the global step only if its client is drawn (K_t of N) and
/// the example is drawn into that client's batch (B of |D_i|).
#[allow(clippy::too_many_arguments)]
pub fn local_train_per_example_dp(
    model: &ModelParams,
    data: &[Example],
    global_train: usize,
    cfg: &FederationConfig,
    round: u64,
    client_id: usize,
    batch_rng: &mut ChaCha12Rng,
    noise_rng: &mut ChaCha12Rng,
    entries: &mut Vec<LedgerEntry>,
) -> Result<RoundUpdate, FedError> {
    assert!(cfg.algorithm.is_per_example_dp(), "variant {} is not per-example DP", cfg.algorithm.token());
    if data.len() < cfg.batch_size {
        return Err(FedError::BatchTooLarge {
            batch: cfg.batch_size,
            client: client_id,
            have: data.len(),
        });
    }
    let clip = cfg.privacy.clip;
    let q = (cfg.batch_size * cfg.clients_per_round) as f64 / global_train as f64;
    let sigma_t = effective_sigma(&cfg.privacy, round)?;
    let mut w = model.clone();
    for l in 0..cfg.local_iters {
        let ixs = sample_batch(data.len(), cfg.batch_size, batch_rng);
        let batch: Vec<Example> = ixs.iter().map(|&i| data[i].clone()).collect();
        let per_example = per_example_gradients(&w, &batch);
        let clipped: Vec<Gradient> = per_example.iter().map(|g| clip_gradient(g, clip)).collect();
        let s = match cfg.sensitivity {
            SensitivityMode::FixedClip => clip,
            SensitivityMode::L2Max => match l2_max_sensitivity(&clipped, clip) {
                Ok(s) => s,
                // all-zero batch: substitute the floor scale so noise and
                // accounting stay well-defined instead of aborting the run
                Err(DpError::DegenerateBatch) => degenerate_sensitivity(clip),
                Err(e) => return Err(e.into()),
            },
        };
        let sanitized = match cfg.noise_placement {
            NoisePlacement::PostAverage => {
                let mut avg = average_gradients(&clipped);
                add_gaussian_noise(&mut avg, sigma_t, s, 1.0, noise_rng);
                avg
            }
            NoisePlacement::PerExampleThenAverage => {
                let noisy: Vec<Gradient> = clipped
                    .iter()
                    .map(|g| {
                        let mut n = g.clone();
                        add_gaussian_noise(&mut n, sigma_t, s, 1.0, noise_rng);
                        n
                    })
                    .collect();
                average_gradients(&noisy)
            }
        };
        w = sgd_step(&w, &sanitized, cfg.learning_rate);
        entries.push(LedgerEntry {
            round,
            local_iter: l,
            sigma: sigma_t,
            sensitivity: s,
            q,
            mechanism: Mechanism::PerExample,
        });
    }
    Ok(RoundUpdate { client_id, delta: Gradient::between(&w, model), sanitized: true })
}

/// Client-update sanitization: clips the whole flattened update to l2 norm
/// <= clip, then adds N(0, sigma^2 clip^2) per coordinate. Emits one ledger
/// entry with q = K_t/N. Identical math for client-side and server-side
/// placement; only the attack-surface exposure differs.
pub fn sdp_sanitize(
    update: &RoundUpdate,
    clip: f64,
    sigma: f64,
    q: f64,
    round: u64,
    rng: &mut ChaCha12Rng,
    entries: &mut Vec<LedgerEntry>,
) -> RoundUpdate {
    let mut noised = clip_gradient(&update.delta, clip);
    add_gaussian_noise(&mut noised, sigma, clip, 1.0, rng);
    entries.push(LedgerEntry {
        round,
        local_iter: 0,
        sigma,
        sensitivity: clip,
        q,
        mechanism: Mechanism::PerClient,
    });
    RoundUpdate { client_id: update.client_id, delta: noised, sanitized: true }
}

/// Zeroes the mu% of coordinates with smallest magnitude; ties break by
/// ascending coordinate index.
pub fn prune_threshold(update: &Gradient, mu_percent: f64) -> Gradient {
    let mut out = update.clone();
    let n = out.flat_len();
    let k = (mu_percent / 100.0 * n as f64).floor() as usize;
    if k == 0 {
        return out;
    }
    let mut order: Vec<(f64, usize)> =
        out.flat_iter().enumerate().map(|(ix, v)| (v.abs(), ix)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut zero = vec![false; n];
    for &(_, ix) in order.iter().take(k) {
        zero[ix] = true;
    }
    for (ix, v) in out.flat_iter_mut().enumerate() {
        if zero[ix] {
            *v = 0.0;
        }
    }
    out
}

/// Keeps a uniformly random min(floor(keep_fraction * n), #eligible)-sized
/// subset of the coordinates with |value| > threshold; everything else
/// becomes zero.
pub fn prune_random_dssgd(
    update: &Gradient,
    keep_fraction: f64,
    threshold: f64,
    rng: &mut ChaCha12Rng,
) -> Gradient {
    let mut out = update.clone();
    let n = out.flat_len();
    let mut eligible: Vec<usize> = out
        .flat_iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > threshold)
        .map(|(ix, _)| ix)
        .collect();
    let keep = ((keep_fraction * n as f64).floor() as usize).min(eligible.len());
    // partial Fisher-Yates over the eligible set
    for i in 0..keep {
        let j = rng.gen_range(i..eligible.len());
        eligible.swap(i, j);
    }
    let kept: std::collections::HashSet<usize> = eligible[..keep].iter().copied().collect();
    for (ix, v) in out.flat_iter_mut().enumerate() {
        if !kept.contains(&ix) {
            *v = 0.0;
        }
    }
    out
}

/// Adds i.i.d. N(0, variance) to every coordinate. Not DP-calibrated, so no
/// ledger entry; variance 0 returns the update untouched.
pub fn additive_random_noise(update: &Gradient, variance: f64, rng: &mut ChaCha12Rng) -> Gradient {
    if variance == 0.0 {
        return update.clone();
    }
    let std = variance.sqrt();
    let mut out = update.clone();
    for v in out.flat_iter_mut() {
        *v += std * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    out
}

/// FedAvg aggregation: the global model plus the unweighted mean of deltas.
pub fn aggregate(global: &ModelParams, updates: &[RoundUpdate]) -> Result<ModelParams, FedError> {
    if updates.is_empty() {
        return Err(FedError::NoUpdates);
    }
    for u in updates {
        if !u.delta.congruent_with(global) {
            return Err(FedError::ShapeMismatch { client: u.client_id });
        }
    }
    let deltas: Vec<Gradient> = updates.iter().map(|u| u.delta.clone()).collect();
    let mean = average_gradients(&deltas);
    Ok(apply_delta(global, &mean, 1.0))
}

fn one_client_round(
    global: &ModelParams,
    shard: &[Example],
    cfg: &FederationConfig,
    t: u64,
    client_id: usize,
    entries: &mut Vec<LedgerEntry>,
) -> Result<RoundUpdate, FedError> {
    let mut batch_rng = stream(cfg.seed, "batch", &[t, client_id as u64]);
    let mut noise_rng = stream(cfg.seed, "noise", &[t, client_id as u64]);
    let q2 = cfg.clients_per_round as f64 / cfg.n_clients as f64;
    match &cfg.algorithm {
        AlgorithmVariant::NonPrivate | AlgorithmVariant::FedSdpServer => {
            local_train_raw(global, shard, cfg, client_id, &mut batch_rng)
        }
        AlgorithmVariant::FedSdpClient => {
            let raw = local_train_raw(global, shard, cfg, client_id, &mut batch_rng)?;
            Ok(sdp_sanitize(
                &raw,
                cfg.privacy.clip,
                cfg.privacy.sigma0,
                q2,
                t,
                &mut noise_rng,
                entries,
            ))
        }
        AlgorithmVariant::FedCdp
        | AlgorithmVariant::FedAlphaCdp
        | AlgorithmVariant::FedAlphaCdpSigma => local_train_per_example_dp(
            global,
            shard,
            cfg,
            t,
            client_id,
            &mut batch_rng,
            &mut noise_rng,
            entries,
        ),
        AlgorithmVariant::PruneThreshold { mu_percent } => {
            let raw = local_train_raw(global, shard, cfg, client_id, &mut batch_rng)?;
            Ok(RoundUpdate {
                client_id,
                delta: prune_threshold(&raw.delta, *mu_percent),
                sanitized: false,
            })
        }
        AlgorithmVariant::PruneRandomDssgd { keep_fraction, threshold } => {
            let raw = local_train_raw(global, shard, cfg, client_id, &mut batch_rng)?;
            Ok(RoundUpdate {
                client_id,
                delta: prune_random_dssgd(&raw.delta, *keep_fraction, *threshold, &mut noise_rng),
                sanitized: false,
            })
        }
        AlgorithmVariant::AdditiveNoise { variance } => {
            let raw = local_train_raw(global, shard, cfg, client_id, &mut batch_rng)?;
            Ok(RoundUpdate {
                client_id,
                delta: additive_random_noise(&raw.delta, *variance, &mut noise_rng),
                sanitized: false,
            })
        }
    }
}

/// Runs federated rounds until the stop rule fires. Budget and accuracy
/// stops are bounded by a hard cap of 10x the configured rounds; hitting
/// the cap yields a report flagged `timed_out`.
pub fn run_training(
    cfg: &FederationConfig,
    dataset: &Dataset,
    hidden: &[usize],
    stop: &StopRule,
) -> Result<TrainingReport, FedError> {
    run_training_full(cfg, dataset, hidden, stop).map(|(report, _)| report)
}

/// [`run_training`] plus the final global model, for callers that persist a
/// checkpoint or hand the model to the attack engine.
pub fn run_training_full(
    cfg: &FederationConfig,
    dataset: &Dataset,
    hidden: &[usize],
    stop: &StopRule,
) -> Result<(TrainingReport, ModelParams), FedError> {
    cfg.validate()?;
    if let StopRule::Budget { eps_target, .. } = stop {
        if !(*eps_target > 0.0) {
            return Err(FedError::BadConfig {
                reason: format!("budget stop needs a positive target, got {eps_target}"),
            });
        }
    }

    let mut partition_rng = stream(cfg.seed, "partition", &[]);
    let shards_ix = partition(dataset.train.len(), cfg.n_clients, &mut partition_rng)?;
    let shards: Vec<Vec<Example>> = shards_ix
        .iter()
        .map(|ixs| ixs.iter().map(|&i| dataset.train[i].clone()).collect())
        .collect();

    let mut dims = vec![dataset.n_features];
    dims.extend_from_slice(hidden);
    dims.push(dataset.n_classes);
    let mut init_rng = stream(cfg.seed, "init", &[]);
    let mut global = ModelParams::init(&dims, &mut init_rng);

    let mut ledger = PrivacyLedger::new(cfg.privacy.delta)?;
    let mut moments = MomentsAccountant::new();
    let cap = match stop {
        StopRule::Rounds => cfg.rounds,
        _ => cfg.rounds.saturating_mul(10),
    };

    let mut per_round = Vec::new();
    let mut timed_out = false;
    // the loop always runs at least one round (rounds >= 1), so this is set
    let mut val_acc;
    let mut t = 0;
    loop {
        let mut sample_rng = stream(cfg.seed, "client-sample", &[t]);
        let mut selected = sample_clients(cfg.n_clients, cfg.clients_per_round, &mut sample_rng)?;
        // ledger segments merge in client-id order for determinism
        selected.sort_unstable();

        let mut round_entries = Vec::new();
        let mut updates = Vec::with_capacity(selected.len());
        for &client_id in &selected {
            let update = one_client_round(
                &global,
                &shards[client_id],
                cfg,
                t,
                client_id,
                &mut round_entries,
            )?;
            updates.push(update);
        }
        if cfg.algorithm == AlgorithmVariant::FedSdpServer {
            let q2 = cfg.clients_per_round as f64 / cfg.n_clients as f64;
            updates = updates
                .iter()
                .map(|u| {
                    let mut server_rng = stream(cfg.seed, "noise", &[t, u.client_id as u64]);
                    sdp_sanitize(
                        u,
                        cfg.privacy.clip,
                        cfg.privacy.sigma0,
                        q2,
                        t,
                        &mut server_rng,
                        &mut round_entries,
                    )
                })
                .collect();
        }
        global = aggregate(&global, &updates)?;

        let mean_s = if round_entries.is_empty() {
            0.0
        } else {
            round_entries.iter().map(|e| e.sensitivity).sum::<f64>() / round_entries.len() as f64
        };
        let sigma_t = if cfg.algorithm.is_per_example_dp() || cfg.algorithm.is_client_update_dp() {
            effective_sigma(&cfg.privacy, t)?
        } else {
            0.0
        };
        for entry in round_entries {
            ledger.append(entry)?;
        }

        val_acc = accuracy(&global, &dataset.val);
        let eps_base = spend_or_zero(&ledger, AccountingMethod::Base)?.epsilon;
        let eps_adv = spend_or_zero(&ledger, AccountingMethod::Advanced)?.epsilon;
        let eps_zcdp = spend_or_zero(&ledger, AccountingMethod::Zcdp)?.epsilon;
        let eps_moments = if ledger.is_empty() { 0.0 } else { moments.epsilon(&ledger)?.epsilon };
        per_round.push(RoundRow {
            round: t,
            val_accuracy: val_acc,
            sigma_t,
            mean_s,
            eps_moments,
            eps_zcdp,
            eps_adv,
            eps_base,
        });

        t += 1;
        let stop_now = match stop {
            StopRule::Rounds => t >= cfg.rounds,
            StopRule::Budget { eps_target, method } => {
                budget_exhausted(&ledger, *method, *eps_target)?
            }
            StopRule::TargetAccuracy { accuracy } => val_acc >= *accuracy,
        };
        if stop_now {
            break;
        }
        if t >= cap {
            timed_out = true;
            break;
        }
    }

    let spends = vec![
        spend_or_zero(&ledger, AccountingMethod::Base)?,
        spend_or_zero(&ledger, AccountingMethod::Advanced)?,
        spend_or_zero(&ledger, AccountingMethod::Zcdp)?,
        if ledger.is_empty() {
            spend_or_zero(&ledger, AccountingMethod::Moments)?
        } else {
            moments.epsilon(&ledger)?
        },
    ];
    let report = TrainingReport {
        per_round,
        summary: RunSummary { accuracy: val_acc, rounds_used: t, timed_out, spends },
        ledger,
    };
    Ok((report, global))
}

/// What the adversary sees at each of the three capture surfaces, expressed
/// in gradient units (updates are normalized by -1/eta so a single matcher
/// serves all surfaces).
#[derive(Clone, Debug)]
pub struct SurfaceCapture {
    /// The shared update as it arrives at the server.
    pub type0: Gradient,
    /// The update as it leaves client local training.
    pub type1: Gradient,
    /// The designated victim's per-example gradient before local descent.
    pub type2: Gradient,
}

/// Runs the first local iteration of round 1 for a single-client,
/// single-example federation (L = 1, B = 1) and records what each attack
/// surface exposes under `cfg.algorithm`.
pub fn capture_surfaces(
    model: &ModelParams,
    victim: &Example,
    cfg: &FederationConfig,
    noise_rng: &mut ChaCha12Rng,
) -> Result<SurfaceCapture, FedError> {
    cfg.algorithm.validate()?;
    let eta = cfg.learning_rate;
    if !(eta > 0.0) {
        return Err(FedError::BadConfig {
            reason: format!("surface capture needs a positive learning rate, got {eta}"),
        });
    }
    let g_raw = example_gradient(model, victim);
    let clip = cfg.privacy.clip;
    let as_update = |g: &Gradient| {
        let mut d = g.clone();
        d.scale(-eta);
        d
    };
    let as_gradient = |d: &Gradient| {
        let mut g = d.clone();
        g.scale(-1.0 / eta);
        g
    };

    let capture = match &cfg.algorithm {
        AlgorithmVariant::NonPrivate | AlgorithmVariant::FedSdpServer => SurfaceCapture {
            type0: g_raw.clone(),
            type1: g_raw.clone(),
            type2: g_raw,
        },
        AlgorithmVariant::FedSdpClient => {
            let delta = as_update(&g_raw);
            let mut sanitized = clip_gradient(&delta, clip);
            add_gaussian_noise(&mut sanitized, cfg.privacy.sigma0, clip, 1.0, noise_rng);
            let exposed = as_gradient(&sanitized);
            SurfaceCapture { type0: exposed.clone(), type1: exposed, type2: g_raw }
        }
        AlgorithmVariant::FedCdp
        | AlgorithmVariant::FedAlphaCdp
        | AlgorithmVariant::FedAlphaCdpSigma => {
            let mut sanitized = clip_gradient(&g_raw, clip);
            let s = match cfg.sensitivity {
                SensitivityMode::FixedClip => clip,
                SensitivityMode::L2Max => {
                    match l2_max_sensitivity(std::slice::from_ref(&sanitized), clip) {
                        Ok(s) => s,
                        Err(DpError::DegenerateBatch) => degenerate_sensitivity(clip),
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            let sigma0 = effective_sigma(&cfg.privacy, 0)?;
            add_gaussian_noise(&mut sanitized, sigma0, s, 1.0, noise_rng);
            SurfaceCapture {
                type0: sanitized.clone(),
                type1: sanitized.clone(),
                type2: sanitized,
            }
        }
        AlgorithmVariant::PruneThreshold { mu_percent } => {
            let exposed = as_gradient(&prune_threshold(&as_update(&g_raw), *mu_percent));
            SurfaceCapture { type0: exposed.clone(), type1: exposed, type2: g_raw }
        }
        AlgorithmVariant::PruneRandomDssgd { keep_fraction, threshold } => {
            let exposed = as_gradient(&prune_random_dssgd(
                &as_update(&g_raw),
                *keep_fraction,
                *threshold,
                noise_rng,
            ));
            SurfaceCapture { type0: exposed.clone(), type1: exposed, type2: g_raw }
        }
        AlgorithmVariant::AdditiveNoise { variance } => {
            let exposed =
                as_gradient(&additive_random_noise(&as_update(&g_raw), *variance, noise_rng));
            SurfaceCapture { type0: exposed.clone(), type1: exposed, type2: g_raw }
        }
    };
    Ok(capture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::NoiseSchedule;
    use crate::nn::{Activation, Layer};
    use crate::seed::stream;

    fn tiny_dataset(seed: u64) -> Dataset {
        let mut rng = stream(seed, "data", &[]);
        crate::data::synthetic_blobs(3, 8, 120, 4.0, 30, &mut rng).unwrap()
    }

    fn base_config(algorithm: AlgorithmVariant) -> FederationConfig {
        FederationConfig {
            n_clients: 6,
            clients_per_round: 3,
            rounds: 4,
            local_iters: 2,
            batch_size: 3,
            learning_rate: 0.2,
            algorithm,
            privacy: PrivacyParams {
                clip: 4.0,
                sigma0: 1.0,
                delta: 1e-5,
                schedule: NoiseSchedule::fixed(4),
            },
            sensitivity: SensitivityMode::FixedClip,
            noise_placement: NoisePlacement::PostAverage,
            seed: 91,
        }
    }

    #[test]
    fn sample_clients_is_distinct_uniform_and_deterministic() {
        let mut rng = stream(1, "client-sample", &[0]);
        let a = sample_clients(100, 20, &mut rng).unwrap();
        let mut rng = stream(1, "client-sample", &[0]);
        let b = sample_clients(100, 20, &mut rng).unwrap();
        assert_eq!(a, b);
        let mut seen = std::collections::HashSet::new();
        for &c in &a {
            assert!(c < 100);
            assert!(seen.insert(c), "client {c} drawn twice");
        }
        let mut rng = stream(1, "client-sample", &[1]);
        let all = sample_clients(5, 5, &mut rng).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert!(sample_clients(3, 4, &mut rng).is_err());
        assert!(sample_clients(3, 0, &mut rng).is_err());
    }

    #[test]
    fn zero_learning_rate_produces_zero_delta() {
        let ds = tiny_dataset(4);
        let mut cfg = base_config(AlgorithmVariant::NonPrivate);
        cfg.learning_rate = 0.0;
        let mut rng = stream(cfg.seed, "init", &[]);
        let model = ModelParams::init(&[8, 6, 3], &mut rng);
        let mut batch_rng = stream(cfg.seed, "batch", &[0, 0]);
        let update = local_train_raw(&model, &ds.train, &cfg, 0, &mut batch_rng).unwrap();
        assert!(update.delta.flat_iter().all(|v| v == 0.0));
        assert!(!update.sanitized);
    }

    #[test]
    fn dp_local_training_with_tight_clip_scales_the_raw_update() {
        // L = 1, B = 1: the DP update with noise off is exactly the clipped
        // gradient through one SGD step
        let ds = tiny_dataset(5);
        let mut cfg = base_config(AlgorithmVariant::FedCdp);
        cfg.local_iters = 1;
        cfg.batch_size = 1;
        cfg.privacy.sigma0 = 0.0;
        cfg.privacy.clip = 0.05;
        let mut rng = stream(cfg.seed, "init", &[]);
        let model = ModelParams::init(&[8, 6, 3], &mut rng);

        let mut batch_rng = stream(cfg.seed, "batch", &[0, 0]);
        let raw = local_train_raw(&model, &ds.train, &cfg, 0, &mut batch_rng).unwrap();
        let mut batch_rng = stream(cfg.seed, "batch", &[0, 0]);
        let mut noise_rng = stream(cfg.seed, "noise", &[0, 0]);
        let mut entries = Vec::new();
        let dp = local_train_per_example_dp(
            &model, &ds.train, &cfg, 0, 0, &mut batch_rng, &mut noise_rng, &mut entries,
        )
        .unwrap();

        let raw_norm = raw.delta.l2_norm() / cfg.learning_rate;
        assert!(raw_norm > cfg.privacy.clip, "test needs an active clip");
        let factor = cfg.privacy.clip / raw_norm;
        for (a, b) in dp.delta.flat_iter().zip(raw.delta.flat_iter()) {
            assert!((a - b * factor).abs() <= 1e-12 * b.abs().max(1.0), "a={a} b={b}");
        }
        assert!(dp.sanitized);
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].sensitivity, cfg.privacy.clip);
        assert_eq!(entries[0].q, 1.0 / ds.train.len() as f64 * 1.0);
    }

    #[test]
    fn prune_threshold_matches_hand_sorted_magnitudes() {
        let mut g = Gradient::zeros_like(&ModelParams::init(
            &[2, 2],
            &mut stream(0, "init", &[]),
        ));
        let values = [0.1, -0.5, 0.2, 0.9, 0.0, 0.0];
        for (slot, v) in g.flat_iter_mut().zip(values) {
            *slot = v;
        }
        // 6 coords, mu = 50% -> 3 zeroed: 0.0 (ix 4), 0.0 (ix 5), 0.1 (ix 0)
        let pruned = prune_threshold(&g, 50.0);
        let got: Vec<f64> = pruned.flat_iter().collect();
        assert_eq!(got, vec![0.0, -0.5, 0.2, 0.9, 0.0, 0.0]);
        // identity at mu = 0, bit for bit
        let same = prune_threshold(&g, 0.0);
        for (a, b) in same.flat_iter().zip(g.flat_iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // all-equal magnitudes: ties zero the lowest indices first
        for slot in g.flat_iter_mut() {
            *slot = 0.7;
        }
        let tied = prune_threshold(&g, 50.0);
        let got: Vec<f64> = tied.flat_iter().collect();
        assert_eq!(got, vec![0.0, 0.0, 0.0, 0.7, 0.7, 0.7]);
    }

    #[test]
    fn random_pruning_keeps_only_above_threshold_coordinates() {
        let model = ModelParams::init(&[2, 2], &mut stream(0, "init", &[]));
        let mut g = Gradient::zeros_like(&model);
        let values = [0.1, -0.5, 0.2, 0.9, 0.3, -0.05];
        for (slot, v) in g.flat_iter_mut().zip(values) {
            *slot = v;
        }
        let mut rng = stream(2, "noise", &[0]);
        let kept = prune_random_dssgd(&g, 1.0, 0.4, &mut rng);
        let got: Vec<f64> = kept.flat_iter().collect();
        assert_eq!(got, vec![0.0, -0.5, 0.0, 0.9, 0.0, 0.0]);
        // theta = 1, threshold = 0 keeps every nonzero coordinate
        let mut rng = stream(2, "noise", &[1]);
        let all = prune_random_dssgd(&g, 1.0, 0.0, &mut rng);
        for (a, b) in all.flat_iter().zip(g.flat_iter()) {
            assert_eq!(a, b);
        }
        // keep fraction 0.5 of 6 coords -> 3 survivors among the 5 eligible
        let mut rng = stream(2, "noise", &[2]);
        let half = prune_random_dssgd(&g, 0.5, 0.0, &mut rng);
        let survivors = half.flat_iter().filter(|v| *v != 0.0).count();
        assert_eq!(survivors, 3);
        // determinism
        let mut rng = stream(2, "noise", &[2]);
        let again = prune_random_dssgd(&g, 0.5, 0.0, &mut rng);
        assert_eq!(half, again);
    }

    #[test]
    fn additive_noise_variance_is_calibrated() {
        let model = ModelParams::init(&[500, 500], &mut stream(0, "init", &[]));
        let g = Gradient::zeros_like(&model);
        let mut rng = stream(9, "noise", &[]);
        let noised = additive_random_noise(&g, 0.01, &mut rng);
        let n = noised.flat_len() as f64;
        let mean: f64 = noised.flat_iter().sum::<f64>() / n;
        let var: f64 = noised.flat_iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var - 0.01).abs() < 0.01 * 0.01, "var={var}");
        // variance 0 is the identity and leaves the rng untouched
        let mut rng_a = stream(9, "noise", &[1]);
        let untouched = additive_random_noise(&g, 0.0, &mut rng_a);
        assert_eq!(untouched, g);
        let mut rng_b = stream(9, "noise", &[1]);
        assert_eq!(rng_a.gen::<u64>(), rng_b.gen::<u64>());
    }

    #[test]
    fn aggregate_means_the_deltas() {
        let model = ModelParams::init(&[3, 2], &mut stream(0, "init", &[]));
        let mut d = Gradient::zeros_like(&model);
        for v in d.flat_iter_mut() {
            *v = 0.5;
        }
        let mut neg = d.clone();
        neg.scale(-1.0);
        let updates = vec![
            RoundUpdate { client_id: 0, delta: d.clone(), sanitized: false },
            RoundUpdate { client_id: 1, delta: neg, sanitized: false },
        ];
        let agg = aggregate(&model, &updates).unwrap();
        for (la, lb) in agg.layers.iter().zip(&model.layers) {
            assert_eq!(la.weights, lb.weights);
            assert_eq!(la.bias, lb.bias);
        }
        let one = aggregate(&model, &updates[..1]).unwrap();
        for (la, lb) in one.layers.iter().zip(&model.layers) {
            for (va, vb) in la.weights.iter().zip(&lb.weights) {
                assert_eq!(*va, vb + 0.5);
            }
        }
        assert!(matches!(aggregate(&model, &[]).unwrap_err(), FedError::NoUpdates));
        let other = ModelParams::init(&[4, 2], &mut stream(1, "init", &[]));
        let bad = vec![RoundUpdate {
            client_id: 7,
            delta: Gradient::zeros_like(&other),
            sanitized: false,
        }];
        assert!(matches!(
            aggregate(&model, &bad).unwrap_err(),
            FedError::ShapeMismatch { client: 7 }
        ));
    }

    #[test]
    fn ledger_entry_counts_match_the_variant() {
        let ds = tiny_dataset(6);
        let mut cfg = base_config(AlgorithmVariant::FedCdp);
        cfg.privacy.sigma0 = 1.0;
        let report = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        // K_t * L entries per round for per-example DP
        assert_eq!(report.ledger.len() as u64, 4 * 3 * 2);
        assert_eq!(report.summary.rounds_used, 4);
        assert_eq!(report.per_round.len(), 4);

        let mut cfg = base_config(AlgorithmVariant::FedSdpClient);
        cfg.privacy.sigma0 = 0.5;
        let report = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        // K_t entries per round for client-update DP
        assert_eq!(report.ledger.len() as u64, 4 * 3);
        for e in report.ledger.entries() {
            assert_eq!(e.mechanism, Mechanism::PerClient);
            assert_eq!(e.q, 0.5);
        }

        let report =
            run_training(&base_config(AlgorithmVariant::NonPrivate), &ds, &[6], &StopRule::Rounds)
                .unwrap();
        assert!(report.ledger.is_empty());
        assert!(report.summary.spends.iter().all(|s| s.epsilon == 0.0));
    }

    #[test]
    fn sdp_server_and_client_placements_train_identically() {
        let ds = tiny_dataset(7);
        let mut cfg_server = base_config(AlgorithmVariant::FedSdpServer);
        cfg_server.privacy.sigma0 = 0.7;
        let mut cfg_client = base_config(AlgorithmVariant::FedSdpClient);
        cfg_client.privacy.sigma0 = 0.7;
        let a = run_training(&cfg_server, &ds, &[6], &StopRule::Rounds).unwrap();
        let b = run_training(&cfg_client, &ds, &[6], &StopRule::Rounds).unwrap();
        assert_eq!(a.per_round, b.per_round);
        assert_eq!(a.ledger.entries(), b.ledger.entries());
    }

    #[test]
    fn noise_off_dp_variants_reproduce_non_private_training_bitwise() {
        let ds = tiny_dataset(8);
        let baseline =
            run_training(&base_config(AlgorithmVariant::NonPrivate), &ds, &[6], &StopRule::Rounds)
                .unwrap();
        let configure = |algorithm, sensitivity, schedule| {
            let mut cfg = base_config(algorithm);
            cfg.sensitivity = sensitivity;
            cfg.privacy.sigma0 = 0.0;
            cfg.privacy.clip = 1e9;
            cfg.privacy.schedule = schedule;
            cfg
        };
        let cases = vec![
            configure(AlgorithmVariant::FedCdp, SensitivityMode::FixedClip, NoiseSchedule::fixed(4)),
            configure(AlgorithmVariant::FedAlphaCdp, SensitivityMode::L2Max, NoiseSchedule::fixed(4)),
            configure(
                AlgorithmVariant::FedAlphaCdpSigma,
                SensitivityMode::L2Max,
                NoiseSchedule::with_rate(DecayPolicy::Linear, 0.1, 1, 4, 0.0),
            ),
            configure(AlgorithmVariant::FedSdpServer, SensitivityMode::FixedClip, NoiseSchedule::fixed(4)),
            configure(AlgorithmVariant::FedSdpClient, SensitivityMode::FixedClip, NoiseSchedule::fixed(4)),
        ];
        for cfg in cases {
            let report = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
            assert_eq!(
                report.summary.accuracy, baseline.summary.accuracy,
                "{} diverged from the baseline",
                cfg.algorithm.token()
            );
            for (a, b) in report.per_round.iter().zip(&baseline.per_round) {
                assert_eq!(
                    a.val_accuracy.to_bits(),
                    b.val_accuracy.to_bits(),
                    "{} round {} accuracy bits differ",
                    cfg.algorithm.token(),
                    a.round
                );
            }
        }
    }

    #[test]
    fn alpha_sensitivity_never_exceeds_the_clip_bound() {
        let ds = tiny_dataset(9);
        let mut cfg = base_config(AlgorithmVariant::FedAlphaCdp);
        cfg.sensitivity = SensitivityMode::L2Max;
        cfg.privacy.clip = 0.5;
        cfg.privacy.sigma0 = 1.0;
        let report = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        assert!(!report.ledger.is_empty());
        let mut below = 0;
        for e in report.ledger.entries() {
            assert!(e.sensitivity <= cfg.privacy.clip + 1e-12);
            if e.sensitivity < cfg.privacy.clip {
                below += 1;
            }
        }
        assert!(below > 0, "l2-max sensitivity never went below the clip bound");
    }

    #[test]
    fn run_training_is_deterministic_under_the_seed() {
        let ds = tiny_dataset(10);
        let cfg = base_config(AlgorithmVariant::FedAlphaCdp);
        let mut cfg = cfg;
        cfg.sensitivity = SensitivityMode::L2Max;
        let a = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        let b = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        let c = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        assert_ne!(a.summary.accuracy.to_bits(), c.summary.accuracy.to_bits());
    }

    #[test]
    fn budget_stop_fires_after_the_crossing_round() {
        let ds = tiny_dataset(11);
        let mut cfg = base_config(AlgorithmVariant::FedCdp);
        cfg.privacy.sigma0 = 1.0;
        // one round of spending exceeds a tiny budget immediately
        let stop = StopRule::Budget { eps_target: 1e-6, method: AccountingMethod::Zcdp };
        let report = run_training(&cfg, &ds, &[6], &stop).unwrap();
        assert_eq!(report.summary.rounds_used, 1);
        assert!(!report.summary.timed_out);
        // an unreachable budget times out at the 10x cap
        let mut cfg = base_config(AlgorithmVariant::NonPrivate);
        cfg.rounds = 2;
        let stop = StopRule::Budget { eps_target: 1.0, method: AccountingMethod::Zcdp };
        let report = run_training(&cfg, &ds, &[6], &stop).unwrap();
        assert!(report.summary.timed_out);
        assert_eq!(report.summary.rounds_used, 20);
    }

    #[test]
    fn eps_columns_are_monotone_across_rounds() {
        let ds = tiny_dataset(12);
        let mut cfg = base_config(AlgorithmVariant::FedAlphaCdpSigma);
        cfg.sensitivity = SensitivityMode::L2Max;
        cfg.privacy.schedule = NoiseSchedule::linear_endpoints(1.5, 0.8, 4, 0.5).unwrap();
        cfg.privacy.sigma0 = 1.5;
        let report = run_training(&cfg, &ds, &[6], &StopRule::Rounds).unwrap();
        let mut prev = [0.0f64; 4];
        for row in &report.per_round {
            let now = [row.eps_moments, row.eps_zcdp, row.eps_adv, row.eps_base];
            for (p, n) in prev.iter().zip(now) {
                assert!(n >= *p - 1e-12, "eps column decreased: {n} after {p}");
            }
            prev = now;
        }
    }

    #[test]
    fn capture_exposes_raw_and_sanitized_surfaces_per_variant() {
        let ds = tiny_dataset(13);
        let victim = &ds.train[0];
        let mut rng = stream(3, "init", &[]);
        let model = ModelParams::init(&[8, 6, 3], &mut rng);
        let g_raw = example_gradient(&model, victim);

        let cfg = base_config(AlgorithmVariant::NonPrivate);
        let mut noise_rng = stream(3, "capture", &[0]);
        let cap = capture_surfaces(&model, victim, &cfg, &mut noise_rng).unwrap();
        assert_eq!(cap.type0, g_raw);
        assert_eq!(cap.type1, g_raw);
        assert_eq!(cap.type2, g_raw);

        let mut cfg = base_config(AlgorithmVariant::FedSdpClient);
        cfg.privacy.sigma0 = 0.8;
        let mut noise_rng = stream(3, "capture", &[1]);
        let cap = capture_surfaces(&model, victim, &cfg, &mut noise_rng).unwrap();
        assert_ne!(cap.type0, g_raw, "client-side sanitization must change the shared update");
        assert_eq!(cap.type0, cap.type1);
        assert_eq!(cap.type2, g_raw, "per-example surface stays raw for client-update DP");

        let mut cfg = base_config(AlgorithmVariant::FedAlphaCdpSigma);
        cfg.sensitivity = SensitivityMode::L2Max;
        cfg.privacy.schedule = NoiseSchedule::linear_endpoints(1.2, 0.6, 4, 0.5).unwrap();
        cfg.privacy.sigma0 = 1.2;
        let mut noise_rng = stream(3, "capture", &[2]);
        let cap = capture_surfaces(&model, victim, &cfg, &mut noise_rng).unwrap();
        assert_ne!(cap.type2, g_raw, "per-example DP must sanitize the per-example surface");
        assert_eq!(cap.type0, cap.type2);
    }

    #[test]
    fn capture_substitutes_floor_sensitivity_for_a_zero_gradient() {
        // Saturated model: bias drives the true-label logit so far ahead
        // that softmax is exactly one-hot and the example gradient is
        // all-zero. l2-max sensitivity then falls back to 1e-6 * clip
        // instead of aborting.
        let model = ModelParams {
            layers: vec![Layer {
                weights: vec![0.0; 3 * 4],
                bias: vec![2000.0, 0.0, 0.0],
                in_dim: 4,
                out_dim: 3,
                activation: Activation::SoftmaxOutput,
            }],
        };
        let victim = Example { features: vec![0.5; 4], label: 0 };
        assert!(example_gradient(&model, &victim).l2_norm() == 0.0, "setup must yield a zero gradient");

        let mut cfg = base_config(AlgorithmVariant::FedAlphaCdp);
        cfg.sensitivity = SensitivityMode::L2Max;
        let mut noise_rng = stream(3, "capture", &[4]);
        let cap = capture_surfaces(&model, &victim, &cfg, &mut noise_rng).unwrap();
        // noise std is sigma0 * 1e-6 * clip = 4e-6, so every exposed
        // coordinate stays within a few sigma of zero
        for layer in &cap.type0.layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                assert!(v.abs() < 1e-4, "degenerate capture leaked magnitude {v}");
            }
        }
    }
}
