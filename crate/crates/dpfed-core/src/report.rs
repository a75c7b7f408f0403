//! Results persistence: per-round training CSVs, final summaries, ledger
//! files, attack campaign CSVs, and text model checkpoints.
//!
//! Every file format here round-trips exactly. Floats are written in
//! shortest round-trip decimal form, so re-reading a report reproduces the
//! in-memory values bit for bit and re-running a seeded experiment
//! reproduces its files byte for byte. Nothing time- or host-dependent is
//! ever written.

use std::path::Path;

use crate::accountant::{AccountError, AccountingMethod, PrivacyLedger, PrivacySpend};
use crate::attack::{AttackReport, CampaignSummary};
use crate::nn::{Activation, Layer, ModelParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Csv { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Checkpoint { path: String, line: usize, reason: String },
    #[error(transparent)]
    Ledger(#[from] AccountError),
}

/// One training round's metrics: validation accuracy, the round's noise
/// scale and mean sensitivity, and cumulative ε under all four accountants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u64,
    pub val_accuracy: f64,
    pub sigma_t: f64,
    #[serde(rename = "mean_S")]
    pub mean_s: f64,
    pub eps_moments: f64,
    pub eps_zcdp: f64,
    pub eps_adv: f64,
    pub eps_base: f64,
}

/// Final run outcome. `spends` is ordered base, advanced, zcdp, moments.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub accuracy: f64,
    pub rounds_used: u64,
    pub timed_out: bool,
    pub spends: Vec<PrivacySpend>,
}

/// A full training run: per-round rows, the final summary, and the privacy
/// ledger behind the ε columns.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingReport {
    pub per_round: Vec<RoundRow>,
    pub summary: RunSummary,
    pub ledger: PrivacyLedger,
}

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const FINAL_FILE: &str = "final.csv";
pub const LEDGER_FILE: &str = "ledger.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ATTACK_VICTIMS_FILE: &str = "attack_victims.csv";
pub const ATTACK_SUMMARY_FILE: &str = "attack_summary.csv";

fn io_err(path: &Path, source: std::io::Error) -> ReportError {
    ReportError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Csv { path: path.display().to_string(), reason: e.to_string() }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    let bytes = writer.into_inner().map_err(|e| csv_err(path, e))?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e| csv_err(path, e))?);
    }
    Ok(rows)
}

pub fn write_rounds_csv(path: &Path, rows: &[RoundRow]) -> Result<(), ReportError> {
    write_csv(path, rows)
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>, ReportError> {
    read_csv(path)
}

#[derive(Serialize, Deserialize)]
struct FinalRow {
    accuracy: f64,
    rounds_used: u64,
    timed_out: bool,
    delta: f64,
    eps_base: f64,
    eps_advanced: f64,
    eps_zcdp: f64,
    eps_moments: f64,
}

const SPEND_ORDER: [AccountingMethod; 4] = [
    AccountingMethod::Base,
    AccountingMethod::Advanced,
    AccountingMethod::Zcdp,
    AccountingMethod::Moments,
];

impl TrainingReport {
    /// Writes rounds.csv, final.csv, and ledger.txt into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), ReportError> {
        write_rounds_csv(&dir.join(ROUNDS_FILE), &self.per_round)?;
        let spend_of = |method| {
            self.summary
                .spends
                .iter()
                .find(|s| s.method == method)
                .map(|s| s.epsilon)
                .unwrap_or(0.0)
        };
        let final_row = FinalRow {
            accuracy: self.summary.accuracy,
            rounds_used: self.summary.rounds_used,
            timed_out: self.summary.timed_out,
            delta: self.ledger.delta(),
            eps_base: spend_of(AccountingMethod::Base),
            eps_advanced: spend_of(AccountingMethod::Advanced),
            eps_zcdp: spend_of(AccountingMethod::Zcdp),
            eps_moments: spend_of(AccountingMethod::Moments),
        };
        write_csv(&dir.join(FINAL_FILE), &[final_row])?;
        let ledger_path = dir.join(LEDGER_FILE);
        std::fs::write(&ledger_path, self.ledger.export_to_string())
            .map_err(|e| io_err(&ledger_path, e))
    }

    /// Reads a report previously written by [`write_to_dir`](Self::write_to_dir).
    pub fn read_from_dir(dir: &Path) -> Result<TrainingReport, ReportError> {
        let per_round = read_rounds_csv(&dir.join(ROUNDS_FILE))?;
        let final_path = dir.join(FINAL_FILE);
        let finals: Vec<FinalRow> = read_csv(&final_path)?;
        let row = finals
            .into_iter()
            .next()
            .ok_or_else(|| csv_err(&final_path, "final summary has no data row"))?;
        let ledger_path = dir.join(LEDGER_FILE);
        let text = std::fs::read_to_string(&ledger_path).map_err(|e| io_err(&ledger_path, e))?;
        let ledger = PrivacyLedger::import(row.delta, &text)?;
        let eps = [row.eps_base, row.eps_advanced, row.eps_zcdp, row.eps_moments];
        let spends = SPEND_ORDER
            .iter()
            .zip(eps)
            .map(|(&method, epsilon)| PrivacySpend { epsilon, delta: row.delta, method })
            .collect();
        Ok(TrainingReport {
            per_round,
            summary: RunSummary {
                accuracy: row.accuracy,
                rounds_used: row.rounds_used,
                timed_out: row.timed_out,
                spends,
            },
            ledger,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct VictimRow {
    victim: u64,
    resilient: bool,
    recon_distance: f64,
    iterations_used: u32,
}

#[derive(Serialize, Deserialize)]
struct AttackSummaryRow {
    victims: u64,
    asr: f64,
    mean_distance: f64,
    mean_iterations: f64,
}

/// Writes per-victim rows and the aggregate ASR line for one campaign.
pub fn write_attack_csvs(dir: &Path, campaign: &CampaignSummary) -> Result<(), ReportError> {
    let rows: Vec<VictimRow> = campaign
        .reports
        .iter()
        .enumerate()
        .map(|(ix, r)| VictimRow {
            victim: ix as u64,
            resilient: r.resilient,
            recon_distance: r.recon_distance,
            iterations_used: r.iterations_used,
        })
        .collect();
    write_csv(&dir.join(ATTACK_VICTIMS_FILE), &rows)?;
    let summary = AttackSummaryRow {
        victims: campaign.reports.len() as u64,
        asr: campaign.asr,
        mean_distance: campaign.mean_distance,
        mean_iterations: campaign.mean_iterations,
    };
    write_csv(&dir.join(ATTACK_SUMMARY_FILE), &[summary])
}

/// Reads back (asr, mean_distance, mean_iterations) from a campaign summary
/// file.
pub fn read_attack_summary(path: &Path) -> Result<(f64, f64, f64), ReportError> {
    let rows: Vec<AttackSummaryRow> = read_csv(path)?;
    let row = rows.into_iter().next().ok_or_else(|| csv_err(path, "summary has no data row"))?;
    Ok((row.asr, row.mean_distance, row.mean_iterations))
}

/// Reads back per-victim (resilient, recon_distance, iterations_used) rows.
pub fn read_attack_victims(path: &Path) -> Result<Vec<AttackReport>, ReportError> {
    let rows: Vec<VictimRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| AttackReport {
            resilient: r.resilient,
            recon_distance: r.recon_distance,
            iterations_used: r.iterations_used,
            per_iteration_loss: Vec::new(),
        })
        .collect())
}

const CHECKPOINT_HEADER: &str = "dpfed-checkpoint 1";

fn activation_token(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
        Activation::SoftmaxOutput => "softmax",
    }
}

fn parse_activation(token: &str) -> Option<Activation> {
    match token {
        "relu" => Some(Activation::Relu),
        "identity" => Some(Activation::Identity),
        "softmax" => Some(Activation::SoftmaxOutput),
        _ => None,
    }
}

/// Versioned text checkpoint: a header line, a layer count, then per layer
/// its shape/activation line, `out` weight-row lines prefixed `w`, and one
/// bias line prefixed `b`. Values reload bit-identically.
pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<(), ReportError> {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("layers {}\n", model.layers.len()));
    for (ix, layer) in model.layers.iter().enumerate() {
        out.push_str(&format!(
            "layer {ix} {} {} {}\n",
            activation_token(layer.activation),
            layer.in_dim,
            layer.out_dim
        ));
        for r in 0..layer.out_dim {
            out.push('w');
            for v in &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim] {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        out.push('b');
        for v in &layer.bias {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reloads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ReportError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut cursor = 0usize;
    let fail = |line: usize, reason: String| ReportError::Checkpoint {
        path: display.clone(),
        line,
        reason,
    };
    let mut next = |what: &str| -> Result<(usize, &str), ReportError> {
        let ix = cursor;
        cursor += 1;
        match lines.get(ix) {
            Some(&line) => Ok((ix + 1, line)),
            None => Err(fail(lines.len(), format!("file ended before {what}"))),
        }
    };

    let (line, header) = next("header")?;
    if header != CHECKPOINT_HEADER {
        return Err(fail(line, format!("bad header {header:?}, expected {CHECKPOINT_HEADER:?}")));
    }
    let (line, count_line) = next("layer count")?;
    let n_layers: usize = count_line
        .strip_prefix("layers ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| fail(line, format!("bad layer count line {count_line:?}")))?;

    let parse_values = |line: usize, content: &str, prefix: &str, expect: usize| {
        let body = content
            .strip_prefix(prefix)
            .ok_or_else(|| fail(line, format!("expected a {prefix:?} line, got {content:?}")))?;
        let values: Result<Vec<f64>, ReportError> = body
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|_| fail(line, format!("bad value {tok:?}"))))
            .collect();
        let values = values?;
        if values.len() != expect {
            return Err(fail(line, format!("expected {expect} values, found {}", values.len())));
        }
        Ok(values)
    };

    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (line, shape) = next("layer shape")?;
        let parts: Vec<&str> = shape.split_whitespace().collect();
        let bad = || fail(line, format!("bad layer line {shape:?}"));
        if parts.len() != 5 || parts[0] != "layer" || parts[1] != l.to_string() {
            return Err(bad());
        }
        let activation = parse_activation(parts[2]).ok_or_else(bad)?;
        let in_dim: usize = parts[3].parse().map_err(|_| bad())?;
        let out_dim: usize = parts[4].parse().map_err(|_| bad())?;
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for _ in 0..out_dim {
            let (line, row) = next("weight row")?;
            weights.extend(parse_values(line, row, "w", in_dim)?);
        }
        let (line, bias_line) = next("bias row")?;
        let bias = parse_values(line, bias_line, "b", out_dim)?;
        layers.push(Layer { weights, bias, in_dim, out_dim, activation });
    }
    if let Ok((line, extra)) = next("end of file") {
        return Err(fail(line, format!("trailing content {extra:?}")));
    }
    Ok(ModelParams { layers })
}
