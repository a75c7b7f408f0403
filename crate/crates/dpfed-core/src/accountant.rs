//! Privacy ledger and composition accountants.
//!
//! Every noise injection appends one [`LedgerEntry`]. Entries that share
//! (round, local_iter) come from disjoint clients of the same global step, so
//! accountants first group by (round, local_iter) and charge each group once
//! (parallel composition: the per-step cost is the max over the group), then
//! compose sequentially across groups with one of four methods:
//!
//! - base: naive summation of per-step subsampling-amplified ε,
//! - advanced: the heterogeneous strong-composition bound,
//! - zcdp: zero-concentrated DP with quadratic per-step ρ,
//! - moments: log-moments of the subsampled Gaussian privacy loss, computed
//!   by numerical quadrature at integer orders λ ∈ [1, 64].
//!
//! Entries with σ = 0 short-circuit every method to ε = ∞: zero noise carries
//! no guarantee, and feeding 1/σ² into the quadrature would only manufacture
//! NaNs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::dp::min_epsilon_for_sigma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AccountError {
    #[error("delta {delta} must lie in (0, 1)")]
    BadDelta { delta: f64 },
    #[error("ledger entry has invalid {field}: {value}")]
    BadEntry { field: &'static str, value: f64 },
    #[error("append would break round ordering: round {next} after round {prev}")]
    OutOfOrder { prev: u64, next: u64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("log-moment at order {lambda} is non-finite for sigma={sigma} q={q}")]
    NonFiniteMoment { lambda: usize, sigma: f64, q: f64 },
    #[error("parallel composition needs at least one spend")]
    EmptyComposition,
    #[error("ledger is empty; sequential composition needs at least one entry")]
    EmptyLedger,
    #[error("the parallel method combines disjoint spends, not a single ledger")]
    ParallelOnLedger,
    #[error("advanced composition needs eps > 0, steps >= 1, slack in (0,1); got eps={eps}, steps={steps}, slack={slack}")]
    BadCompositionArgs { eps: f64, steps: u64, slack: f64 },
}

/// Which query a ledger entry protects: one example's gradient inside a local
/// step, or one client's whole round update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    PerExample,
    PerClient,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::PerExample => "per_example",
            Mechanism::PerClient => "per_client",
        })
    }
}

impl FromStr for Mechanism {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_example" => Ok(Mechanism::PerExample),
            "per_client" => Ok(Mechanism::PerClient),
            other => Err(format!("unknown mechanism {other:?}")),
        }
    }
}

/// One noise injection: round t, local iteration l, noise scale σ_t,
/// sensitivity S_t, and the sampling rate q of the protected query.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub round: u64,
    pub local_iter: u64,
    pub sigma: f64,
    pub sensitivity: f64,
    pub q: f64,
    pub mechanism: Mechanism,
}

impl LedgerEntry {
    fn validate(&self) -> Result<(), AccountError> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(AccountError::BadEntry { field: "q", value: self.q });
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(AccountError::BadEntry { field: "sigma", value: self.sigma });
        }
        if !(self.sensitivity.is_finite() && self.sensitivity >= 0.0) {
            return Err(AccountError::BadEntry { field: "sensitivity", value: self.sensitivity });
        }
        Ok(())
    }
}

/// Append-only record of noise injections, single writer. Rounds must be
/// appended in non-decreasing order; within a round, clients are merged in
/// client-id order so (round, local_iter) pairs may repeat.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
    delta: f64,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Result<PrivacyLedger, AccountError> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountError::BadDelta { delta });
        }
        Ok(PrivacyLedger { entries: Vec::new(), delta })
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<(), AccountError> {
        entry.validate()?;
        if let Some(last) = self.entries.last() {
            if entry.round < last.round {
                return Err(AccountError::OutOfOrder { prev: last.round, next: entry.round });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Line-delimited `t,l,sigma,S,q,mechanism`, stable-sorted by (t, l).
    pub fn export_to_string(&self) -> String {
        let mut sorted: Vec<&LedgerEntry> = self.entries.iter().collect();
        sorted.sort_by_key(|e| (e.round, e.local_iter));
        let mut out = String::new();
        for e in sorted {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.round, e.local_iter, e.sigma, e.sensitivity, e.q, e.mechanism
            ));
        }
        out
    }

    /// Parses the [`export_to_string`](Self::export_to_string) format. Blank
    /// lines and `#` comments are skipped; anything else malformed errors
    /// with its 1-based line number.
    pub fn import(delta: f64, text: &str) -> Result<PrivacyLedger, AccountError> {
        let mut ledger = PrivacyLedger::new(delta)?;
        for (ix, raw) in text.lines().enumerate() {
            let line = ix + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if parts.len() != 6 {
                return Err(AccountError::Parse {
                    line,
                    reason: format!("expected 6 comma-separated fields, got {}", parts.len()),
                });
            }
            let parse_u64 = |s: &str, field: &str| {
                s.parse::<u64>()
                    .map_err(|e| AccountError::Parse { line, reason: format!("{field}: {e}") })
            };
            let parse_f64 = |s: &str, field: &str| {
                s.parse::<f64>()
                    .map_err(|e| AccountError::Parse { line, reason: format!("{field}: {e}") })
            };
            let entry = LedgerEntry {
                round: parse_u64(parts[0], "t")?,
                local_iter: parse_u64(parts[1], "l")?,
                sigma: parse_f64(parts[2], "sigma")?,
                sensitivity: parse_f64(parts[3], "S")?,
                q: parse_f64(parts[4], "q")?,
                mechanism: Mechanism::from_str(parts[5])
                    .map_err(|reason| AccountError::Parse { line, reason })?,
            };
            ledger
                .append(entry)
                .map_err(|e| AccountError::Parse { line, reason: e.to_string() })?;
        }
        Ok(ledger)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccountingMethod {
    Base,
    Advanced,
    Zcdp,
    Moments,
    Parallel,
}

impl fmt::Display for AccountingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccountingMethod::Base => "base",
            AccountingMethod::Advanced => "advanced",
            AccountingMethod::Zcdp => "zcdp",
            AccountingMethod::Moments => "moments",
            AccountingMethod::Parallel => "parallel",
        })
    }
}

impl FromStr for AccountingMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(AccountingMethod::Base),
            "advanced" => Ok(AccountingMethod::Advanced),
            "zcdp" => Ok(AccountingMethod::Zcdp),
            "moments" => Ok(AccountingMethod::Moments),
            "parallel" => Ok(AccountingMethod::Parallel),
            other => Err(format!("unknown accounting method {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrivacySpend {
    pub epsilon: f64,
    pub delta: f64,
    pub method: AccountingMethod,
}

/// Accounting steps: entries grouped by (round, local_iter), stable-sorted.
/// Each group holds the parallel contributions of disjoint clients.
fn accounting_steps(ledger: &PrivacyLedger) -> Vec<Vec<&LedgerEntry>> {
    let mut sorted: Vec<&LedgerEntry> = ledger.entries().iter().collect();
    sorted.sort_by_key(|e| (e.round, e.local_iter));
    let mut steps: Vec<Vec<&LedgerEntry>> = Vec::new();
    for e in sorted {
        match steps.last_mut() {
            Some(group) if group[0].round == e.round && group[0].local_iter == e.local_iter => {
                group.push(e)
            }
            _ => steps.push(vec![e]),
        }
    }
    steps
}

fn has_zero_sigma(ledger: &PrivacyLedger) -> bool {
    ledger.entries().iter().any(|e| e.sigma <= 0.0)
}

/// Per-step subsampling-amplified ε of the Gaussian mechanism at the ledger
/// δ: ln(1 + q (e^{ε_L(σ, δ)} − 1)). Reduces to ε_L at q = 1.
fn amplified_step_epsilon(sigma: f64, q: f64, delta: f64) -> f64 {
    (q * min_epsilon_for_sigma(sigma, delta).exp_m1()).ln_1p()
}

/// Naive composition: the sum of per-step amplified ε at the ledger δ. Each
/// step is a (ε_L, δ) guarantee, so the summed statement formally carries
/// T·δ slack; the reported spend keeps the ledger δ, matching how this
/// column is conventionally quoted.
pub fn base_compose(ledger: &PrivacyLedger) -> Result<PrivacySpend, AccountError> {
    if ledger.is_empty() {
        return Err(AccountError::EmptyLedger);
    }
    let epsilon = accounting_steps(ledger)
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|e| amplified_step_epsilon(e.sigma, e.q, ledger.delta()))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(PrivacySpend { epsilon, delta: ledger.delta(), method: AccountingMethod::Base })
}

/// Strong composition of `steps` identical (eps, delta)-steps with slack
/// `slack`: ε' = ε √(2 T ln(1/δ')) + T ε (e^ε − 1), δ_total = T δ + δ'.
/// A δ_total ≥ 1 means the statement is vacuous; it is returned as computed.
pub fn advanced_compose_uniform(
    eps: f64,
    delta_step: f64,
    steps: u64,
    slack: f64,
) -> Result<PrivacySpend, AccountError> {
    if !(eps > 0.0) || steps < 1 || !(slack > 0.0 && slack < 1.0) {
        return Err(AccountError::BadCompositionArgs { eps, steps, slack });
    }
    let t = steps as f64;
    let epsilon = eps * (2.0 * t * -(slack.ln())).sqrt() + t * eps * eps.exp_m1();
    Ok(PrivacySpend {
        epsilon,
        delta: t * delta_step + slack,
        method: AccountingMethod::Advanced,
    })
}

/// Strong composition over the ledger's (possibly heterogeneous) steps with
/// slack δ' = δ: ε' = √(2 ln(1/δ') Σ ε_i²) + Σ ε_i (e^{ε_i} − 1), with ε_i
/// the per-step amplified ε. Reduces to [`advanced_compose_uniform`] when
/// every step is identical. The reported spend keeps the ledger δ.
pub fn advanced_compose(ledger: &PrivacyLedger) -> Result<PrivacySpend, AccountError> {
    if ledger.is_empty() {
        return Err(AccountError::EmptyLedger);
    }
    let delta = ledger.delta();
    let mut sum_sq = 0.0;
    let mut sum_lin = 0.0;
    for group in accounting_steps(ledger) {
        let eps = group
            .iter()
            .map(|e| amplified_step_epsilon(e.sigma, e.q, delta))
            .fold(0.0, f64::max);
        sum_sq += eps * eps;
        sum_lin += eps * eps.exp_m1();
    }
    let epsilon = (2.0 * -(delta.ln()) * sum_sq).sqrt() + sum_lin;
    Ok(PrivacySpend { epsilon, delta, method: AccountingMethod::Advanced })
}

/// Zero-concentrated DP: per-step ρ = min(2q², 1) / (2σ²), summed, then
/// converted with ε = ρ + 2 √(ρ ln(1/δ)). The subsampling factor min(2q², 1)
/// is an approximation (amplification of ρ is not exactly quadratic); the
/// cap keeps the full-batch case q = 1 at the plain Gaussian-mechanism value
/// ρ = 1/(2σ²).
pub fn zcdp_epsilon(ledger: &PrivacyLedger) -> Result<PrivacySpend, AccountError> {
    if ledger.is_empty() {
        return Err(AccountError::EmptyLedger);
    }
    let delta = ledger.delta();
    let rho: f64 = accounting_steps(ledger)
        .iter()
        .map(|group| {
            group
                .iter()
                .map(|e| {
                    if e.sigma <= 0.0 {
                        f64::INFINITY
                    } else {
                        (2.0 * e.q * e.q).min(1.0) / (2.0 * e.sigma * e.sigma)
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum();
    let epsilon = rho + 2.0 * (rho * -(delta.ln())).sqrt();
    Ok(PrivacySpend { epsilon, delta, method: AccountingMethod::Zcdp })
}

/// Number of integer moment orders tracked.
pub const LAMBDA_MAX: usize = 64;

/// ln E_{z ∼ N(0, σ²)}[ r(z)^power ] with r(z) = (1 − q) + q e^{(2z − 1)/(2σ²)},
/// the likelihood ratio of the subsampled Gaussian mechanism. Computed by
/// adaptive Simpson quadrature on an exponent-shifted integrand; public so
/// verification code can cross-check it against closed forms.
pub fn log_mixture_moment(sigma: f64, q: f64, power: f64) -> Result<f64, AccountError> {
    assert!(sigma > 0.0 && q > 0.0 && q <= 1.0);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let ln_1mq = if q < 1.0 { (1.0 - q).ln() } else { f64::NEG_INFINITY };
    let ln_q = q.ln();
    // exponent(z) = −z²/(2σ²) + power·ln r(z) with
    // r(z) = (1−q) + q e^{(2z−1)/(2σ²)}. Near the positive-direction peak
    // (z ≈ power) the two terms are each ~power²/(2σ²) and cancel to O(1),
    // so the naive form loses ~|power|²/σ² · ulp of absolute precision.
    // When the shifted component dominates, completing the square keeps the
    // cancellation analytic: the quadratic pieces combine into
    // −(z−power)²/(2σ²) + (power²−power)/(2σ²) + power·ln q exactly.
    let exponent = move |z: f64| {
        let b = ln_q + (2.0 * z - 1.0) * inv2s2;
        if b >= ln_1mq {
            let zp = z - power;
            -(zp * zp) * inv2s2
                + (power * power - power) * inv2s2
                + power * ln_q
                + power * (ln_1mq - b).exp().ln_1p()
        } else {
            -z * z * inv2s2 + power * (ln_1mq + (b - ln_1mq).exp().ln_1p())
        }
    };

    let half_span = power.abs() + 1.0 + 8.0 * sigma + 2.0;
    let (lo, hi) = (-half_span, half_span);

    // Coarse scan pins the exponent shift; panel pre-split keeps the narrow
    // peak from slipping between Simpson nodes.
    const SCAN: usize = 512;
    let mut peak = f64::NEG_INFINITY;
    for i in 0..=SCAN {
        let z = lo + (hi - lo) * i as f64 / SCAN as f64;
        peak = peak.max(exponent(z));
    }
    if !peak.is_finite() {
        return Err(AccountError::NonFiniteMoment { lambda: power.abs() as usize, sigma, q });
    }

    let f = |z: f64| (exponent(z) - peak).exp();
    const PANELS: usize = 64;
    let mut integral = 0.0;
    let panel_tol = 1e-12 / PANELS as f64;
    for p in 0..PANELS {
        let a = lo + (hi - lo) * p as f64 / PANELS as f64;
        let b = lo + (hi - lo) * (p + 1) as f64 / PANELS as f64;
        integral += adaptive_simpson(&f, a, b, panel_tol);
    }
    let value = peak + integral.ln() - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AccountError::NonFiniteMoment { lambda: power.abs() as usize, sigma, q })
    }
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_recurse(f, a, b, fa, fm, fb, whole, tol, 52)
}

#[allow(clippy::too_many_arguments)]
fn simpson_recurse(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    // the relative check stops refinement at the integrand's fp noise
    // floor, where absolute delta and tol otherwise shrink in lockstep
    if depth == 0 || delta.abs() <= 15.0 * tol || delta.abs() <= 1e-12 * whole.abs() {
        left + right + delta / 15.0
    } else {
        simpson_recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

/// Log moments α(λ) for λ = 1..=64 of one subsampled Gaussian step: the max
/// of both privacy-loss directions, ln E_{μ0}[(μ0/μ)^λ] and
/// ln E_{μ}[(μ/μ0)^λ] = ln E_{μ0}[r^{λ+1}], clamped at 0 (both expectations
/// are ≥ 1 by Jensen; the clamp only removes quadrature jitter).
pub fn log_moments(sigma: f64, q: f64) -> Result<[f64; LAMBDA_MAX], AccountError> {
    let mut alpha = [0.0; LAMBDA_MAX];
    for (ix, slot) in alpha.iter_mut().enumerate() {
        let lambda = (ix + 1) as f64;
        let dir0 = log_mixture_moment(sigma, q, -lambda)?;
        let dir1 = log_mixture_moment(sigma, q, lambda + 1.0)?;
        let a = dir0.max(dir1).max(0.0);
        if !a.is_finite() {
            return Err(AccountError::NonFiniteMoment { lambda: ix + 1, sigma, q });
        }
        *slot = a;
    }
    Ok(alpha)
}

fn moments_with_cache(
    ledger: &PrivacyLedger,
    cache: &mut HashMap<(u64, u64), [f64; LAMBDA_MAX]>,
) -> Result<PrivacySpend, AccountError> {
    let delta = ledger.delta();
    if ledger.is_empty() {
        return Err(AccountError::EmptyLedger);
    }
    if has_zero_sigma(ledger) {
        return Ok(PrivacySpend { epsilon: f64::INFINITY, delta, method: AccountingMethod::Moments });
    }
    let mut total = [0.0; LAMBDA_MAX];
    for group in accounting_steps(ledger) {
        let mut step = [f64::NEG_INFINITY; LAMBDA_MAX];
        for e in group {
            let key = (e.sigma.to_bits(), e.q.to_bits());
            if !cache.contains_key(&key) {
                let alpha = log_moments(e.sigma, e.q)?;
                cache.insert(key, alpha);
            }
            let alpha = &cache[&key];
            for (s, a) in step.iter_mut().zip(alpha) {
                *s = s.max(*a);
            }
        }
        for (t, s) in total.iter_mut().zip(&step) {
            *t += s;
        }
    }
    let ln_inv_delta = -(delta.ln());
    let epsilon = total
        .iter()
        .enumerate()
        .map(|(ix, a)| (a + ln_inv_delta) / (ix + 1) as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(PrivacySpend { epsilon, delta, method: AccountingMethod::Moments })
}

/// Moments-accountant ε: min over λ of (Σ_steps α(λ) + ln(1/δ)) / λ.
pub fn moments_epsilon(ledger: &PrivacyLedger) -> Result<PrivacySpend, AccountError> {
    moments_with_cache(ledger, &mut HashMap::new())
}

/// Reusable moments accountant that memoizes per-(σ, q) moment vectors, for
/// callers that account a growing ledger every round.
#[derive(Default)]
pub struct MomentsAccountant {
    cache: HashMap<(u64, u64), [f64; LAMBDA_MAX]>,
}

impl MomentsAccountant {
    pub fn new() -> MomentsAccountant {
        MomentsAccountant::default()
    }

    pub fn epsilon(&mut self, ledger: &PrivacyLedger) -> Result<PrivacySpend, AccountError> {
        moments_with_cache(ledger, &mut self.cache)
    }
}

/// Dispatches one of the four sequential methods.
pub fn spend(ledger: &PrivacyLedger, method: AccountingMethod) -> Result<PrivacySpend, AccountError> {
    match method {
        AccountingMethod::Base => base_compose(ledger),
        AccountingMethod::Advanced => advanced_compose(ledger),
        AccountingMethod::Zcdp => zcdp_epsilon(ledger),
        AccountingMethod::Moments => moments_epsilon(ledger),
        AccountingMethod::Parallel => Err(AccountError::ParallelOnLedger),
    }
}

/// Parallel composition across disjoint data shards: (max ε, max δ). The
/// inputs should have been produced by one method over non-overlapping data.
pub fn parallel_compose(spends: &[PrivacySpend]) -> Result<PrivacySpend, AccountError> {
    if spends.is_empty() {
        return Err(AccountError::EmptyComposition);
    }
    let epsilon = spends.iter().map(|s| s.epsilon).fold(f64::NEG_INFINITY, f64::max);
    let delta = spends.iter().map(|s| s.delta).fold(f64::NEG_INFINITY, f64::max);
    Ok(PrivacySpend { epsilon, delta, method: AccountingMethod::Parallel })
}

/// Like [`spend`] but reports ε = 0 for an empty ledger instead of erroring:
/// the convention training reports use for runs that never added noise.
pub fn spend_or_zero(
    ledger: &PrivacyLedger,
    method: AccountingMethod,
) -> Result<PrivacySpend, AccountError> {
    if ledger.is_empty() && method != AccountingMethod::Parallel {
        return Ok(PrivacySpend { epsilon: 0.0, delta: ledger.delta(), method });
    }
    spend(ledger, method)
}

/// True once the ledger's spend under `method` strictly exceeds
/// `eps_target`. An empty ledger has spent nothing and is never exhausted.
pub fn budget_exhausted(
    ledger: &PrivacyLedger,
    method: AccountingMethod,
    eps_target: f64,
) -> Result<bool, AccountError> {
    if ledger.is_empty() {
        return Ok(false);
    }
    Ok(spend(ledger, method)?.epsilon > eps_target)
}
