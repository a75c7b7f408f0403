//! TOML experiment configuration: a raw serde schema with strict unknown
//! field rejection, lowered into the typed federation, attack, and dataset
//! configs after validation. One `master_seed` drives every random choice
//! in the experiment.

use crate::accountant::AccountingMethod;
use crate::attack::{AttackConfig, AttackError, SeedKind, Surface};
use crate::data::{self, DataError, Dataset};
use crate::dp::{
    DecayPolicy, DpError, NoiseSchedule, PrivacyParams, SensitivityMode, DEFAULT_SIGMA_FLOOR,
};
use crate::federation::{AlgorithmVariant, FedError, FederationConfig, NoisePlacement, StopRule};
use crate::seed::stream;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("invalid configuration: {reason}")]
    Invalid { reason: String },
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

fn invalid(reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { reason: reason.into() }
}

// raw schema: exactly what the TOML file says, defaults not yet applied

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    master_seed: u64,
    output_dir: Option<String>,
    dataset: RawDataset,
    #[serde(default)]
    model: RawModel,
    federation: RawFederation,
    #[serde(default)]
    privacy: RawPrivacy,
    attack: Option<RawAttack>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    source: String,
    // synthetic_blobs
    classes: Option<usize>,
    dims: Option<usize>,
    n: Option<usize>,
    separation: Option<f64>,
    // csv
    path: Option<String>,
    label_column: Option<String>,
    // idx_images
    image_path: Option<String>,
    label_path: Option<String>,
    subset_n: Option<usize>,
    // shared
    val_n: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Vec<usize>,
}

impl Default for RawModel {
    fn default() -> Self {
        RawModel { hidden: vec![64] }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFederation {
    algorithm: String,
    n_clients: Option<usize>,
    clients_per_round: Option<usize>,
    rounds: u64,
    local_iters: Option<u64>,
    batch_size: Option<usize>,
    learning_rate: f64,
    noise_placement: Option<String>,
    // variant parameters
    mu_percent: Option<f64>,
    keep_fraction: Option<f64>,
    threshold: Option<f64>,
    variance: Option<f64>,
    stop: Option<RawStop>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStop {
    rule: String,
    eps_target: Option<f64>,
    method: Option<String>,
    accuracy: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPrivacy {
    clip: Option<f64>,
    sigma: Option<f64>,
    delta: Option<f64>,
    sensitivity: Option<String>,
    schedule: Option<RawSchedule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    policy: String,
    sigma_end: Option<f64>,
    gamma: Option<f64>,
    period: Option<u64>,
    cycles: Option<f64>,
    sigma_floor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttack {
    surface: String,
    seed_kind: Option<String>,
    max_iterations: Option<u32>,
    attack_lr: Option<f64>,
    success_rmse: Option<f64>,
    victims: Option<usize>,
}

/// Where the experiment's examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    SyntheticBlobs { classes: usize, dims: usize, n: usize, separation: f64, val_n: usize },
    Csv { path: PathBuf, label_column: String, val_n: usize },
    IdxImages { image_path: PathBuf, label_path: PathBuf, subset_n: usize, val_n: usize },
}

impl DatasetSpec {
    /// Materializes the dataset. Synthetic sources draw from the
    /// "dataset" stream of `master_seed`; file sources are deterministic.
    pub fn load(&self, master_seed: u64) -> Result<Dataset, DataError> {
        match self {
            DatasetSpec::SyntheticBlobs { classes, dims, n, separation, val_n } => {
                let mut rng = stream(master_seed, "dataset", &[]);
                data::synthetic_blobs(*classes, *dims, *n, *separation, *val_n, &mut rng)
            }
            DatasetSpec::Csv { path, label_column, val_n } => {
                data::from_csv(path, label_column, *val_n)
            }
            DatasetSpec::IdxImages { image_path, label_path, subset_n, val_n } => {
                data::from_idx(image_path, label_path, *subset_n, *val_n)
            }
        }
    }
}

/// Attack section: per-victim reconstruction settings plus the cohort size.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSpec {
    pub config: AttackConfig,
    pub victims: usize,
}

/// Fully validated experiment, ready to run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub federation: FederationConfig,
    pub stop: StopRule,
    pub attack: Option<AttackSpec>,
}

fn lower_dataset(raw: &RawDataset) -> Result<DatasetSpec, ConfigError> {
    let need = |field: &str, source: &str| {
        invalid(format!("dataset source {source:?} requires the {field:?} field"))
    };
    match raw.source.as_str() {
        "synthetic_blobs" => Ok(DatasetSpec::SyntheticBlobs {
            classes: raw.classes.ok_or_else(|| need("classes", "synthetic_blobs"))?,
            dims: raw.dims.ok_or_else(|| need("dims", "synthetic_blobs"))?,
            n: raw.n.ok_or_else(|| need("n", "synthetic_blobs"))?,
            separation: raw.separation.unwrap_or(3.0),
            val_n: raw.val_n.ok_or_else(|| need("val_n", "synthetic_blobs"))?,
        }),
        "csv" => Ok(DatasetSpec::Csv {
            path: PathBuf::from(raw.path.as_ref().ok_or_else(|| need("path", "csv"))?),
            label_column: raw
                .label_column
                .clone()
                .ok_or_else(|| need("label_column", "csv"))?,
            val_n: raw.val_n.ok_or_else(|| need("val_n", "csv"))?,
        }),
        "idx_images" => Ok(DatasetSpec::IdxImages {
            image_path: PathBuf::from(
                raw.image_path.as_ref().ok_or_else(|| need("image_path", "idx_images"))?,
            ),
            label_path: PathBuf::from(
                raw.label_path.as_ref().ok_or_else(|| need("label_path", "idx_images"))?,
            ),
            subset_n: raw.subset_n.unwrap_or(7000),
            val_n: raw.val_n.unwrap_or(1000),
        }),
        other => Err(invalid(format!(
            "unknown dataset source {other:?} (expected synthetic_blobs, csv, or idx_images)"
        ))),
    }
}

fn lower_algorithm(raw: &RawFederation) -> Result<AlgorithmVariant, ConfigError> {
    let need = |field: &str, alg: &str| {
        invalid(format!("algorithm {alg:?} requires the {field:?} field"))
    };
    match raw.algorithm.as_str() {
        "non_private" => Ok(AlgorithmVariant::NonPrivate),
        "fed_sdp_server" => Ok(AlgorithmVariant::FedSdpServer),
        "fed_sdp_client" => Ok(AlgorithmVariant::FedSdpClient),
        "fed_cdp" => Ok(AlgorithmVariant::FedCdp),
        "fed_alpha_cdp" => Ok(AlgorithmVariant::FedAlphaCdp),
        "fed_alpha_cdp_sigma" => Ok(AlgorithmVariant::FedAlphaCdpSigma),
        "prune_threshold" => Ok(AlgorithmVariant::PruneThreshold {
            mu_percent: raw.mu_percent.ok_or_else(|| need("mu_percent", "prune_threshold"))?,
        }),
        "prune_random_dssgd" => Ok(AlgorithmVariant::PruneRandomDssgd {
            keep_fraction: raw
                .keep_fraction
                .ok_or_else(|| need("keep_fraction", "prune_random_dssgd"))?,
            threshold: raw.threshold.unwrap_or(0.0),
        }),
        "additive_noise" => Ok(AlgorithmVariant::AdditiveNoise {
            variance: raw.variance.ok_or_else(|| need("variance", "additive_noise"))?,
        }),
        other => Err(invalid(format!("unknown algorithm {other:?}"))),
    }
}

fn lower_schedule(
    raw: Option<&RawSchedule>,
    sigma0: f64,
    rounds: u64,
) -> Result<NoiseSchedule, ConfigError> {
    let Some(raw) = raw else {
        return Ok(NoiseSchedule::fixed(rounds));
    };
    let floor = raw.sigma_floor.unwrap_or(DEFAULT_SIGMA_FLOOR);
    let schedule = match raw.policy.as_str() {
        "fixed" => NoiseSchedule::with_rate(DecayPolicy::Fixed, 0.0, 1, rounds, floor),
        "linear" => match (raw.sigma_end, raw.gamma) {
            (Some(end), None) => NoiseSchedule::linear_endpoints(sigma0, end, rounds, floor)?,
            (None, Some(gamma)) => {
                NoiseSchedule::with_rate(DecayPolicy::Linear, gamma, 1, rounds, floor)
            }
            _ => {
                return Err(invalid(
                    "linear schedule needs exactly one of sigma_end or gamma",
                ))
            }
        },
        "exponential" => match (raw.sigma_end, raw.gamma) {
            (Some(end), None) => NoiseSchedule::exponential_endpoints(sigma0, end, rounds, floor)?,
            (None, Some(gamma)) => {
                NoiseSchedule::with_rate(DecayPolicy::Exponential, gamma, 1, rounds, floor)
            }
            _ => {
                return Err(invalid(
                    "exponential schedule needs exactly one of sigma_end or gamma",
                ))
            }
        },
        "staircase" => {
            let gamma = raw
                .gamma
                .ok_or_else(|| invalid("staircase schedule requires the \"gamma\" field"))?;
            let period = raw
                .period
                .ok_or_else(|| invalid("staircase schedule requires the \"period\" field"))?;
            NoiseSchedule::with_rate(DecayPolicy::Staircase, gamma, period, rounds, floor)
        }
        "cyclic" => {
            let cycles = raw
                .cycles
                .ok_or_else(|| invalid("cyclic schedule requires the \"cycles\" field"))?;
            NoiseSchedule::with_rate(DecayPolicy::Cyclic, cycles, 1, rounds, floor)
        }
        other => {
            return Err(invalid(format!(
                "unknown schedule policy {other:?} (expected fixed, linear, staircase, exponential, or cyclic)"
            )))
        }
    };
    Ok(schedule)
}

fn lower_stop(raw: Option<&RawStop>) -> Result<StopRule, ConfigError> {
    let Some(raw) = raw else {
        return Ok(StopRule::Rounds);
    };
    match raw.rule.as_str() {
        "rounds" => Ok(StopRule::Rounds),
        "budget" => {
            let eps_target = raw
                .eps_target
                .ok_or_else(|| invalid("budget stop requires the \"eps_target\" field"))?;
            let method_name = raw
                .method
                .as_deref()
                .ok_or_else(|| invalid("budget stop requires the \"method\" field"))?;
            let method: AccountingMethod = method_name
                .parse()
                .map_err(|e: String| invalid(e))?;
            if method == AccountingMethod::Parallel {
                return Err(invalid("budget stop needs a sequential accounting method"));
            }
            Ok(StopRule::Budget { eps_target, method })
        }
        "target_accuracy" => {
            let accuracy = raw
                .accuracy
                .ok_or_else(|| invalid("target_accuracy stop requires the \"accuracy\" field"))?;
            if !(accuracy > 0.0 && accuracy <= 1.0) {
                return Err(invalid(format!("target accuracy {accuracy} must lie in (0, 1]")));
            }
            Ok(StopRule::TargetAccuracy { accuracy })
        }
        other => Err(invalid(format!(
            "unknown stop rule {other:?} (expected rounds, budget, or target_accuracy)"
        ))),
    }
}

/// Parses and validates a TOML experiment string.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawExperiment = toml::from_str(text)?;

    let dataset = lower_dataset(&raw.dataset)?;
    let algorithm = lower_algorithm(&raw.federation)?;

    let sigma0 = raw.privacy.sigma.unwrap_or(6.0);
    let schedule = lower_schedule(raw.privacy.schedule.as_ref(), sigma0, raw.federation.rounds)?;
    let privacy = PrivacyParams {
        clip: raw.privacy.clip.unwrap_or(4.0),
        sigma0,
        delta: raw.privacy.delta.unwrap_or(1e-5),
        schedule,
    };

    let sensitivity = match raw.privacy.sensitivity.as_deref() {
        Some("fixed_clip") => SensitivityMode::FixedClip,
        Some("l2_max") => SensitivityMode::L2Max,
        Some(other) => {
            return Err(invalid(format!(
                "unknown sensitivity mode {other:?} (expected fixed_clip or l2_max)"
            )))
        }
        // omitted: infer the mode the variant requires
        None => match algorithm {
            AlgorithmVariant::FedAlphaCdp | AlgorithmVariant::FedAlphaCdpSigma => {
                SensitivityMode::L2Max
            }
            _ => SensitivityMode::FixedClip,
        },
    };

    let noise_placement = match raw.federation.noise_placement.as_deref() {
        None | Some("post_average") => NoisePlacement::PostAverage,
        Some("per_example_then_average") => NoisePlacement::PerExampleThenAverage,
        Some(other) => {
            return Err(invalid(format!(
                "unknown noise placement {other:?} (expected post_average or per_example_then_average)"
            )))
        }
    };

    let federation = FederationConfig {
        n_clients: raw.federation.n_clients.unwrap_or(1000),
        clients_per_round: raw.federation.clients_per_round.unwrap_or(100),
        rounds: raw.federation.rounds,
        local_iters: raw.federation.local_iters.unwrap_or(1),
        batch_size: raw.federation.batch_size.unwrap_or(5),
        learning_rate: raw.federation.learning_rate,
        algorithm,
        privacy,
        sensitivity,
        noise_placement,
        seed: raw.master_seed,
    };
    federation.validate()?;

    let stop = lower_stop(raw.federation.stop.as_ref())?;

    let attack = match &raw.attack {
        None => None,
        Some(a) => {
            let surface: Surface = a.surface.parse().map_err(|e: String| invalid(e))?;
            let seed_kind: SeedKind = match a.seed_kind.as_deref() {
                None => SeedKind::Random,
                Some(s) => s.parse().map_err(|e: String| invalid(e))?,
            };
            let config = AttackConfig {
                surface,
                seed_kind,
                max_iterations: a.max_iterations.unwrap_or(300),
                attack_lr: a.attack_lr.unwrap_or(0.05),
                success_rmse: a.success_rmse.unwrap_or(0.1),
                seed: raw.master_seed,
            };
            config.validate()?;
            let victims = a.victims.unwrap_or(20);
            if victims == 0 {
                return Err(invalid("attack needs at least one victim"));
            }
            Some(AttackSpec { config, victims })
        }
    };

    if raw.model.hidden.iter().any(|&h| h == 0) {
        return Err(invalid("hidden layer widths must be >= 1"));
    }

    Ok(ExperimentConfig {
        master_seed: raw.master_seed,
        output_dir: PathBuf::from(raw.output_dir.unwrap_or_else(|| "out".into())),
        dataset,
        hidden: raw.model.hidden,
        federation,
        stop,
        attack,
    })
}

/// Parses an experiment config from a file.
pub fn load_experiment(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_experiment(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::DecayPolicy;

    const MINIMAL: &str = r#"
        master_seed = 7
        [dataset]
        source = "synthetic_blobs"
        classes = 3
        dims = 8
        n = 400
        val_n = 100
        [federation]
        algorithm = "non_private"
        rounds = 5
        learning_rate = 0.1
    "#;

    #[test]
    fn minimal_config_gets_the_documented_defaults() {
        let cfg = parse_experiment(MINIMAL).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.federation.n_clients, 1000);
        assert_eq!(cfg.federation.clients_per_round, 100);
        assert_eq!(cfg.federation.privacy.clip, 4.0);
        assert_eq!(cfg.federation.privacy.sigma0, 6.0);
        assert_eq!(cfg.federation.privacy.delta, 1e-5);
        assert_eq!(cfg.hidden, vec![64]);
        assert_eq!(cfg.stop, StopRule::Rounds);
        assert_eq!(cfg.federation.noise_placement, NoisePlacement::PostAverage);
        assert!(cfg.attack.is_none());
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_fields_are_rejected_with_the_field_name() {
        let bad = MINIMAL.replace("learning_rate = 0.1", "learning_rate = 0.1\nlr_decay = 2");
        let err = parse_experiment(&bad).unwrap_err();
        assert!(err.to_string().contains("lr_decay"), "error was: {err}");
    }

    #[test]
    fn full_config_round_trips_every_section() {
        let text = r#"
            master_seed = 42
            output_dir = "runs/full"
            [dataset]
            source = "idx_images"
            image_path = "data/images"
            label_path = "data/labels"
            [model]
            hidden = [64, 32]
            [federation]
            algorithm = "fed_alpha_cdp_sigma"
            n_clients = 50
            clients_per_round = 10
            rounds = 20
            local_iters = 2
            batch_size = 5
            learning_rate = 0.15
            [federation.stop]
            rule = "budget"
            eps_target = 8.0
            method = "moments"
            [privacy]
            clip = 1.0
            sigma = 2.0
            sensitivity = "l2_max"
            [privacy.schedule]
            policy = "linear"
            sigma_end = 1.0
            [attack]
            surface = "type2"
            seed_kind = "patterned"
            victims = 10
        "#;
        let cfg = parse_experiment(text).unwrap();
        assert_eq!(
            cfg.dataset,
            DatasetSpec::IdxImages {
                image_path: PathBuf::from("data/images"),
                label_path: PathBuf::from("data/labels"),
                subset_n: 7000,
                val_n: 1000,
            }
        );
        assert_eq!(cfg.hidden, vec![64, 32]);
        assert_eq!(cfg.federation.algorithm, AlgorithmVariant::FedAlphaCdpSigma);
        assert_eq!(cfg.federation.sensitivity, SensitivityMode::L2Max);
        assert_eq!(cfg.federation.privacy.schedule.policy, DecayPolicy::Linear);
        assert_eq!(
            cfg.stop,
            StopRule::Budget { eps_target: 8.0, method: AccountingMethod::Moments }
        );
        let attack = cfg.attack.unwrap();
        assert_eq!(attack.victims, 10);
        assert_eq!(attack.config.seed_kind, SeedKind::Patterned);
        assert_eq!(attack.config.max_iterations, 300);
        assert_eq!(attack.config.seed, 42);
    }

    #[test]
    fn variant_and_mode_mismatches_are_validation_errors() {
        let text = MINIMAL
            .replace("algorithm = \"non_private\"", "algorithm = \"fed_cdp\"")
            .replace("[federation]", "[privacy]\nsensitivity = \"l2_max\"\n[federation]");
        let err = parse_experiment(&text).unwrap_err();
        assert!(err.to_string().contains("fixed_clip"), "error was: {err}");

        let text = MINIMAL
            .replace("algorithm = \"non_private\"", "algorithm = \"fed_alpha_cdp_sigma\"");
        let err = parse_experiment(&text).unwrap_err();
        assert!(err.to_string().contains("decaying"), "error was: {err}");
    }

    #[test]
    fn mode_defaults_track_the_variant() {
        let alpha = MINIMAL.replace(
            "algorithm = \"non_private\"",
            "algorithm = \"fed_alpha_cdp\"",
        );
        let cfg = parse_experiment(&alpha).unwrap();
        assert_eq!(cfg.federation.sensitivity, SensitivityMode::L2Max);

        let cdp =
            MINIMAL.replace("algorithm = \"non_private\"", "algorithm = \"fed_cdp\"");
        let cfg = parse_experiment(&cdp).unwrap();
        assert_eq!(cfg.federation.sensitivity, SensitivityMode::FixedClip);
    }

    #[test]
    fn prune_variants_require_their_parameters() {
        let text =
            MINIMAL.replace("algorithm = \"non_private\"", "algorithm = \"prune_threshold\"");
        let err = parse_experiment(&text).unwrap_err();
        assert!(err.to_string().contains("mu_percent"), "error was: {err}");

        let ok = MINIMAL.replace(
            "algorithm = \"non_private\"",
            "algorithm = \"prune_threshold\"\nmu_percent = 10.0",
        );
        let cfg = parse_experiment(&ok).unwrap();
        assert_eq!(cfg.federation.algorithm, AlgorithmVariant::PruneThreshold { mu_percent: 10.0 });
    }

    #[test]
    fn blob_datasets_load_deterministically_from_the_master_seed() {
        let cfg = parse_experiment(MINIMAL).unwrap();
        let a = cfg.dataset.load(cfg.master_seed).unwrap();
        let b = cfg.dataset.load(cfg.master_seed).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = cfg.dataset.load(cfg.master_seed + 1).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
