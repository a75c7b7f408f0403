//! The four subcommand bodies. Every random stream descends from the
//! (possibly overridden) master seed, and no result file contains timing,
//! so a repeated invocation writes byte-identical outputs.

use std::fs;
use std::path::Path;
use std::time::Instant;

use dpfed_core::accountant::{spend, AccountError, AccountingMethod, PrivacyLedger};
use dpfed_core::attack::{attack_campaign, AttackError, Surface};
use dpfed_core::config::{load_experiment, ConfigError, ExperimentConfig};
use dpfed_core::data::{DataError, Dataset};
use dpfed_core::federation::{run_training_full, FedError, StopRule};
use dpfed_core::nn::{Example, ModelParams};
use dpfed_core::report::{
    load_checkpoint, save_checkpoint, write_attack_csvs, ReportError, CHECKPOINT_FILE,
};

use crate::{AccountArgs, CliError, CompareArgs, RunArgs};

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> CliError {
        CliError::io(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> CliError {
        CliError::io(e.to_string())
    }
}

impl From<AccountError> for CliError {
    fn from(e: AccountError) -> CliError {
        CliError::config(e.to_string())
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> CliError {
        match e {
            FedError::Data(d) => d.into(),
            FedError::BadConfig { .. } | FedError::BadClientCount { .. }
            | FedError::BatchTooLarge { .. } => CliError::config(e.to_string()),
            other => CliError::internal(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> CliError {
        match e {
            AttackError::Fed(f) => f.into(),
            other => CliError::config(other.to_string()),
        }
    }
}

/// Loads the config and applies --seed / --out. The master seed feeds both
/// the federation and the attack streams, so an override rewrites all of
/// them together.
fn load_with_overrides(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = load_experiment(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
        cfg.federation.seed = seed;
        if let Some(attack) = &mut cfg.attack {
            attack.config.seed = seed;
        }
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))
}

pub fn train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_with_overrides(args)?;
    let dataset = cfg.dataset.load(cfg.master_seed)?;
    let started = Instant::now();
    let (report, model) = run_training_full(&cfg.federation, &dataset, &cfg.hidden, &cfg.stop)?;
    let wall = started.elapsed().as_secs_f64();

    ensure_dir(&cfg.output_dir)?;
    report.write_to_dir(&cfg.output_dir)?;
    save_checkpoint(&model, &cfg.output_dir.join(CHECKPOINT_FILE))?;

    let eps_moments = report
        .summary
        .spends
        .iter()
        .find(|s| s.method == AccountingMethod::Moments)
        .map(|s| s.epsilon)
        .unwrap_or(0.0);
    let local_iters = report.summary.rounds_used
        * cfg.federation.clients_per_round as u64
        * cfg.federation.local_iters;
    // timing stays on stdout so the result files are run-to-run identical
    println!(
        "algorithm={} accuracy={:.4} eps_moments={:.6} rounds={} seconds_per_local_iteration={:.6}",
        cfg.federation.algorithm.token(),
        report.summary.accuracy,
        eps_moments,
        report.summary.rounds_used,
        wall / local_iters.max(1) as f64,
    );
    Ok(())
}

/// The model under attack: a previously trained checkpoint when one exists
/// in the output directory, otherwise a fresh one-round training run.
fn attack_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ModelParams, CliError> {
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    if ckpt.is_file() {
        return Ok(load_checkpoint(&ckpt)?);
    }
    let mut fed = cfg.federation.clone();
    fed.rounds = 1;
    fed.privacy.schedule.rounds = 1;
    let (_, model) = run_training_full(&fed, dataset, &cfg.hidden, &StopRule::Rounds)?;
    Ok(model)
}

pub fn attack(args: &RunArgs) -> Result<(), CliError> {
    let cfg = load_with_overrides(args)?;
    let spec = cfg
        .attack
        .as_ref()
        .ok_or_else(|| CliError::config("config has no [attack] section"))?;
    let dataset = cfg.dataset.load(cfg.master_seed)?;
    if dataset.train.len() < spec.victims {
        return Err(CliError::config(format!(
            "config asks for {} victims but the training set holds {}",
            spec.victims,
            dataset.train.len()
        )));
    }
    let model = attack_model(&cfg, &dataset)?;
    let victims: Vec<Example> = dataset.train[..spec.victims].to_vec();
    let campaign = attack_campaign(&model, &victims, &cfg.federation, &spec.config)?;

    ensure_dir(&cfg.output_dir)?;
    write_attack_csvs(&cfg.output_dir, &campaign)?;
    println!(
        "algorithm={} surface={} victims={} asr={:.4} mean_distance={:.6} mean_iterations={:.1}",
        cfg.federation.algorithm.token(),
        spec.config.surface,
        spec.victims,
        campaign.asr,
        campaign.mean_distance,
        campaign.mean_iterations,
    );
    Ok(())
}

fn parse_methods(token: &str) -> Result<Vec<AccountingMethod>, CliError> {
    match token {
        "all" => Ok(vec![
            AccountingMethod::Base,
            AccountingMethod::Advanced,
            AccountingMethod::Zcdp,
            AccountingMethod::Moments,
        ]),
        "base" => Ok(vec![AccountingMethod::Base]),
        "advanced" => Ok(vec![AccountingMethod::Advanced]),
        "zcdp" => Ok(vec![AccountingMethod::Zcdp]),
        "moments" => Ok(vec![AccountingMethod::Moments]),
        other => Err(CliError::config(format!(
            "unknown method {other:?} (expected base, advanced, zcdp, moments, or all)"
        ))),
    }
}

pub fn account(args: &AccountArgs) -> Result<(), CliError> {
    if !(args.delta > 0.0 && args.delta < 1.0) {
        return Err(CliError::config(format!("delta must lie in (0, 1), got {}", args.delta)));
    }
    let text = fs::read_to_string(&args.ledger)
        .map_err(|e| CliError::io(format!("cannot read {}: {e}", args.ledger.display())))?;
    let ledger = PrivacyLedger::import(args.delta, &text)?;
    let methods = parse_methods(&args.method)?;

    let mut csv = String::from("method,epsilon,delta\n");
    println!("{:<10} {:>14} {:>10}", "method", "epsilon", "delta");
    for method in methods {
        let s = spend(&ledger, method)?;
        println!("{:<10} {:>14.6} {:>10}", method.to_string(), s.epsilon, s.delta);
        csv.push_str(&format!("{},{},{}\n", method, s.epsilon, s.delta));
    }
    ensure_dir(&args.out)?;
    fs::write(args.out.join("account.csv"), csv)
        .map_err(|e| CliError::io(format!("cannot write account.csv: {e}")))?;
    Ok(())
}

struct CompareRow {
    name: String,
    algorithm: &'static str,
    accuracy: f64,
    rounds_used: u64,
    eps: [f64; 4],
    // per-surface resilience, empty when the config has no attack section
    resilient: Option<[bool; 3]>,
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    if args.configs.len() < 2 {
        return Err(CliError::config("compare needs at least two --config files"));
    }
    let mut rows: Vec<CompareRow> = Vec::new();
    let mut dataset_hash: Option<String> = None;

    for path in &args.configs {
        let run_args = RunArgs { config: path.clone(), seed: args.seed, out: None };
        let cfg = load_with_overrides(&run_args)?;
        let dataset = cfg.dataset.load(cfg.master_seed)?;
        let hash = dataset.hash();
        match &dataset_hash {
            None => dataset_hash = Some(hash),
            Some(expect) if *expect == hash => {}
            Some(expect) => {
                return Err(CliError::config(format!(
                    "{} loads a different dataset (hash {}… vs {}…); compare needs one dataset",
                    path.display(),
                    &hash[..12],
                    &expect[..12],
                )));
            }
        }

        let (report, model) = run_training_full(&cfg.federation, &dataset, &cfg.hidden, &cfg.stop)?;
        let mut eps = [0.0f64; 4];
        for (slot, method) in eps.iter_mut().zip([
            AccountingMethod::Base,
            AccountingMethod::Advanced,
            AccountingMethod::Zcdp,
            AccountingMethod::Moments,
        ]) {
            *slot = report
                .summary
                .spends
                .iter()
                .find(|s| s.method == method)
                .map(|s| s.epsilon)
                .unwrap_or(0.0);
        }

        let resilient = match &cfg.attack {
            None => None,
            Some(spec) => {
                if dataset.train.len() < spec.victims {
                    return Err(CliError::config(format!(
                        "{}: {} victims exceed the training set ({})",
                        path.display(),
                        spec.victims,
                        dataset.train.len()
                    )));
                }
                let victims: Vec<Example> = dataset.train[..spec.victims].to_vec();
                let mut flags = [false; 3];
                for (flag, surface) in
                    flags.iter_mut().zip([Surface::Type0, Surface::Type1, Surface::Type2])
                {
                    let mut attack_cfg = spec.config.clone();
                    attack_cfg.surface = surface;
                    let campaign = attack_campaign(&model, &victims, &cfg.federation, &attack_cfg)?;
                    *flag = campaign.asr == 0.0;
                }
                Some(flags)
            }
        };

        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        rows.push(CompareRow {
            name,
            algorithm: cfg.federation.algorithm.token(),
            accuracy: report.summary.accuracy,
            rounds_used: report.summary.rounds_used,
            eps,
            resilient,
        });
    }

    let hash = dataset_hash.expect("at least two configs ran");
    let mut csv = String::from(
        "config,algorithm,dataset_hash,accuracy,rounds_used,\
         eps_base,eps_advanced,eps_zcdp,eps_moments,\
         resilient_type0,resilient_type1,resilient_type2\n",
    );
    println!(
        "{:<18} {:<20} {:>9} {:>7} {:>12} {:>12} {:>12} {:>12}  resilience(0/1/2)",
        "config", "algorithm", "accuracy", "rounds", "eps_base", "eps_adv", "eps_zcdp", "eps_mom"
    );
    for row in &rows {
        let res_csv = match row.resilient {
            Some(r) => format!("{},{},{}", r[0], r[1], r[2]),
            None => ",,".to_string(),
        };
        let res_term = match row.resilient {
            Some(r) => {
                let mark = |b: bool| if b { "Y" } else { "N" };
                format!("{}/{}/{}", mark(r[0]), mark(r[1]), mark(r[2]))
            }
            None => "-".to_string(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.name,
            row.algorithm,
            hash,
            row.accuracy,
            row.rounds_used,
            row.eps[0],
            row.eps[1],
            row.eps[2],
            row.eps[3],
            res_csv,
        ));
        println!(
            "{:<18} {:<20} {:>9.4} {:>7} {:>12.4} {:>12.4} {:>12.4} {:>12.4}  {}",
            row.name,
            row.algorithm,
            row.accuracy,
            row.rounds_used,
            row.eps[0],
            row.eps[1],
            row.eps[2],
            row.eps[3],
            res_term,
        );
    }
    ensure_dir(&args.out)?;
    fs::write(args.out.join("compare.csv"), csv)
        .map_err(|e| CliError::io(format!("cannot write compare.csv: {e}")))?;
    Ok(())
}
