//! Composition-accountant reference values and independent cross-checks.
//!
//! The quadrature-backed moments bound is verified three separate ways: an
//! exact binomial sum for integer powers, seeded Monte Carlo for negative
//! powers (which have no finite closed form), and frozen multi-step workload
//! values computed offline with 50-digit arithmetic. The closed-form
//! accountants (base, advanced, zCDP) are checked against the same frozen
//! workloads plus single-step closed forms. Monotonicity invariants run as
//! property tests.

use dpfed_core::accountant::{
    advanced_compose, base_compose, budget_exhausted, log_mixture_moment, log_moments,
    moments_epsilon, spend, zcdp_epsilon, AccountingMethod, LedgerEntry, Mechanism, PrivacyLedger,
    LAMBDA_MAX,
};
use dpfed_core::dp::min_epsilon_for_sigma;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn assert_close(label: &str, got: f64, want: f64, abs_tol: f64, rel_tol: f64) {
    let diff = (got - want).abs();
    let bound = abs_tol + rel_tol * want.abs();
    assert!(
        diff <= bound,
        "{label}: got {got}, want {want}, |diff| {diff:.3e} > {bound:.3e}"
    );
}

/// Ledger of `steps` identical entries, one accounting step each.
fn uniform_ledger(steps: u64, sigma: f64, q: f64, delta: f64, mech: Mechanism) -> PrivacyLedger {
    let mut ledger = PrivacyLedger::new(delta).expect("valid delta");
    for t in 0..steps {
        ledger
            .append(LedgerEntry {
                round: t,
                local_iter: 0,
                sigma,
                sensitivity: 1.0,
                q,
                mechanism: mech,
            })
            .expect("valid entry");
    }
    ledger
}

// Reference workload: 10000 per-example steps, sigma = 6, q = 0.01,
// delta = 1e-5. Frozen values computed offline at 50-digit precision.
#[test]
fn per_example_workload_matches_frozen_values() {
    let ledger = uniform_ledger(10_000, 6.0, 0.01, 1e-5, Mechanism::PerExample);

    let moments = moments_epsilon(&ledger).unwrap();
    assert_close("moments", moments.epsilon, 0.822734401419, 1e-5, 0.0);

    let zcdp = zcdp_epsilon(&ledger).unwrap();
    assert_close("zcdp", zcdp.epsilon, 1.158801181847, 0.0, 1e-10);

    let adv = advanced_compose(&ledger).unwrap();
    assert_close("advanced", adv.epsilon, 7.457727830431, 0.0, 1e-10);

    let base = base_compose(&ledger).unwrap();
    assert_close("base", base.epsilon, 123.457018411810, 0.0, 1e-10);

    for s in [&moments, &zcdp, &adv, &base] {
        assert_eq!(s.delta, 1e-5, "spend reports the ledger delta");
    }
}

// Reference workload: 100 per-client steps, sigma = 6, q = 0.1.
#[test]
fn per_client_workload_matches_frozen_value() {
    let ledger = uniform_ledger(100, 6.0, 0.1, 1e-5, Mechanism::PerClient);
    let moments = moments_epsilon(&ledger).unwrap();
    assert_close("moments", moments.epsilon, 0.849353202836, 1e-5, 0.0);
}

// q = 1, sigma = 1, one step: rho = min(2q^2, 1)/(2 sigma^2) = 1/2, so
// eps = rho + 2 sqrt(rho ln(1/delta)).
#[test]
fn full_batch_single_step_zcdp_closed_form() {
    let ledger = uniform_ledger(1, 1.0, 1.0, 1e-5, Mechanism::PerExample);
    let got = zcdp_epsilon(&ledger).unwrap().epsilon;
    let want = 0.5 + 2.0 * (0.5 * (1e5f64).ln()).sqrt();
    assert_close("zcdp closed form", got, want, 0.0, 1e-12);
    assert_close("zcdp frozen", got, 5.298525912188, 1e-9, 0.0);
}

#[test]
fn gaussian_step_epsilon_matches_closed_form() {
    let got = min_epsilon_for_sigma(6.0, 1e-5);
    let want = (2.0 * (1.25e5f64).ln()).sqrt() / 6.0;
    assert_close("eps_L closed form", got, want, 0.0, 1e-14);
    assert_close("eps_L frozen", got, 0.807467543768, 1e-9, 0.0);
}

/// ln of sum of exp(terms), stable under large magnitudes.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

// For integer power a, the mixture moment has an exact binomial expansion:
// E[r^a] = sum_k C(a, k) (1-q)^(a-k) q^k e^((k^2 - k) / (2 sigma^2)),
// since E[e^(k (2z - 1) / (2 sigma^2))] = e^((k^2 - k) / (2 sigma^2)) for
// z ~ N(0, sigma^2). Evaluated in log space; independent of the quadrature.
fn log_moment_binomial(sigma: f64, q: f64, a: u32) -> f64 {
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    // ln_fact[k] = ln(k!)
    let mut ln_fact = vec![0.0f64; a as usize + 1];
    for k in 1..=a as usize {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let terms: Vec<f64> = (0..=a)
        .map(|k| {
            let kf = k as f64;
            let ln_binom = ln_fact[a as usize] - ln_fact[k as usize] - ln_fact[(a - k) as usize];
            let ln_pq = if q < 1.0 {
                (a - k) as f64 * (1.0 - q).ln() + kf * q.ln()
            } else if k == a {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            ln_binom + ln_pq + (kf * kf - kf) * inv2s2
        })
        .collect();
    log_sum_exp(&terms)
}

#[test]
fn mixture_moment_matches_binomial_sum() {
    for sigma in [0.8, 1.0, 2.0, 6.0] {
        for q in [0.01, 0.3, 0.7, 1.0] {
            for a in [2u32, 5, 17, 33, 65] {
                let got = log_mixture_moment(sigma, q, a as f64).unwrap();
                let want = log_moment_binomial(sigma, q, a);
                let tol = 1e-9 * want.abs().max(1.0);
                assert!(
                    (got - want).abs() <= tol,
                    "sigma={sigma} q={q} a={a}: quadrature {got} vs binomial {want}"
                );
            }
        }
    }
}

// Negative powers have no finite binomial form; r^(-l) <= (1-q)^(-l) is
// bounded, so plain Monte Carlo converges fast. Seeded draws, so the test
// is deterministic; tolerances sit ~10 standard errors out.
#[test]
fn mixture_moment_matches_monte_carlo() {
    let cases: [(f64, f64, f64, f64); 4] = [
        (1.0, 0.5, -3.0, 5e-3),
        (2.0, 0.1, -5.0, 5e-3),
        (0.8, 0.3, -2.0, 5e-3),
        (1.0, 0.3, 2.0, 8e-3),
    ];
    let mut rng = ChaCha12Rng::seed_from_u64(0x00AC_C0DE);
    for (sigma, q, power, tol) in cases {
        let n = 8_000_000usize;
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        let mut sum = 0.0f64;
        for _ in 0..n {
            let g: f64 = rng.sample(StandardNormal);
            let z = sigma * g;
            let r = (1.0 - q) + q * ((2.0 * z - 1.0) * inv2s2).exp();
            sum += r.powf(power);
        }
        let mc = (sum / n as f64).ln();
        let got = log_mixture_moment(sigma, q, power).unwrap();
        assert!(
            (got - mc).abs() <= tol,
            "sigma={sigma} q={q} power={power}: quadrature {got} vs monte carlo {mc}"
        );
    }
}

// q = 1 collapses the mixture to a pure Gaussian shift, where both loss
// directions give alpha(lambda) = lambda (lambda + 1) / (2 sigma^2) exactly.
#[test]
fn full_batch_moments_match_closed_form() {
    for sigma in [1.0, 2.0] {
        let alpha = log_moments(sigma, 1.0).unwrap();
        for (ix, a) in alpha.iter().enumerate() {
            let lambda = (ix + 1) as f64;
            let want = lambda * (lambda + 1.0) / (2.0 * sigma * sigma);
            assert_close(&format!("alpha({lambda}) sigma={sigma}"), *a, want, 1e-9, 1e-9);
        }
        assert_eq!(alpha.len(), LAMBDA_MAX);
    }
}

// 20-point reference grid on which the four accountants are strictly
// ordered: moments <= zCDP <= advanced <= base. Points with total spend
// below ~0.3 are excluded by construction: the lambda <= 64 cap floors the
// moments bound near ln(1/delta)/64, which can sit above the zCDP value for
// near-zero budgets.
#[test]
fn accountants_are_ordered_on_reference_grid() {
    let mut grid: Vec<(u64, f64, f64)> = Vec::new();
    for q in [0.005, 0.01, 0.05, 0.1] {
        for sigma in [4.0, 6.0, 8.0] {
            grid.push((10_000, q, sigma));
        }
    }
    for q in [0.01, 0.05, 0.1] {
        for sigma in [4.0, 6.0] {
            grid.push((2_000, q, sigma));
        }
    }
    grid.push((500, 0.05, 4.0));
    grid.push((500, 0.1, 4.0));
    assert_eq!(grid.len(), 20);

    for (steps, q, sigma) in grid {
        let ledger = uniform_ledger(steps, sigma, q, 1e-5, Mechanism::PerExample);
        let m = moments_epsilon(&ledger).unwrap().epsilon;
        let z = zcdp_epsilon(&ledger).unwrap().epsilon;
        let a = advanced_compose(&ledger).unwrap().epsilon;
        let b = base_compose(&ledger).unwrap().epsilon;
        assert!(
            m <= z && z <= a && a <= b,
            "ordering violated at steps={steps} q={q} sigma={sigma}: \
             moments={m} zcdp={z} advanced={a} base={b}"
        );
    }
}

#[test]
fn budget_exhaustion_is_strictly_greater_than() {
    let ledger = uniform_ledger(50, 4.0, 0.05, 1e-5, Mechanism::PerExample);
    for method in [
        AccountingMethod::Base,
        AccountingMethod::Advanced,
        AccountingMethod::Zcdp,
        AccountingMethod::Moments,
    ] {
        let eps = spend(&ledger, method).unwrap().epsilon;
        assert!(
            !budget_exhausted(&ledger, method, eps).unwrap(),
            "{method:?}: spend equal to target must not exhaust"
        );
        assert!(
            budget_exhausted(&ledger, method, eps * (1.0 - 1e-12)).unwrap(),
            "{method:?}: spend above target must exhaust"
        );
    }
}

const CHEAP_METHODS: [AccountingMethod; 3] =
    [AccountingMethod::Base, AccountingMethod::Advanced, AccountingMethod::Zcdp];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Appending a step never lowers the spend under any closed-form method.
    #[test]
    fn prop_append_never_decreases_epsilon(
        sigma in 0.5f64..8.0,
        q in 0.001f64..1.0,
        steps in 1u64..40,
    ) {
        let shorter = uniform_ledger(steps, sigma, q, 1e-5, Mechanism::PerExample);
        let longer = uniform_ledger(steps + 1, sigma, q, 1e-5, Mechanism::PerExample);
        for method in CHEAP_METHODS {
            let lo = spend(&shorter, method).unwrap().epsilon;
            let hi = spend(&longer, method).unwrap().epsilon;
            prop_assert!(hi >= lo - 1e-12, "{method:?}: {hi} < {lo}");
        }
    }

    // More noise never costs more budget.
    #[test]
    fn prop_epsilon_nonincreasing_in_sigma(
        sigma in 0.5f64..8.0,
        bump in 0.1f64..4.0,
        q in 0.001f64..1.0,
        steps in 1u64..200,
    ) {
        let noisier = uniform_ledger(steps, sigma + bump, q, 1e-5, Mechanism::PerExample);
        let quieter = uniform_ledger(steps, sigma, q, 1e-5, Mechanism::PerExample);
        for method in CHEAP_METHODS {
            let lo = spend(&noisier, method).unwrap().epsilon;
            let hi = spend(&quieter, method).unwrap().epsilon;
            prop_assert!(lo <= hi + 1e-9, "{method:?}: sigma {sigma}+{bump}: {lo} > {hi}");
        }
    }

    // A smaller sampling rate never costs more budget.
    #[test]
    fn prop_epsilon_nondecreasing_in_q(
        q_lo in 0.001f64..0.5,
        factor in 1.01f64..10.0,
        sigma in 0.5f64..8.0,
        steps in 1u64..200,
    ) {
        let q_hi = (q_lo * factor).min(1.0);
        let small = uniform_ledger(steps, sigma, q_lo, 1e-5, Mechanism::PerExample);
        let large = uniform_ledger(steps, sigma, q_hi, 1e-5, Mechanism::PerExample);
        for method in CHEAP_METHODS {
            let lo = spend(&small, method).unwrap().epsilon;
            let hi = spend(&large, method).unwrap().epsilon;
            prop_assert!(lo <= hi + 1e-9, "{method:?}: q {q_lo}->{q_hi}: {lo} > {hi}");
        }
    }

    // Ledgers survive the text round trip exactly.
    #[test]
    fn prop_export_import_round_trip(
        sigma in 0.1f64..20.0,
        sens in 0.0f64..10.0,
        q in 0.001f64..1.0,
        steps in 1u64..30,
        per_client in any::<bool>(),
    ) {
        let mech = if per_client { Mechanism::PerClient } else { Mechanism::PerExample };
        let mut ledger = PrivacyLedger::new(1e-5).unwrap();
        for t in 0..steps {
            ledger.append(LedgerEntry {
                round: t,
                local_iter: t % 3,
                sigma,
                sensitivity: sens,
                q,
                mechanism: mech,
            }).unwrap();
        }
        let text = ledger.export_to_string();
        let back = PrivacyLedger::import(1e-5, &text).unwrap();
        prop_assert_eq!(ledger, back);
    }
}

proptest! {
    // The moments accountant runs 128 quadratures per distinct (sigma, q),
    // so its property checks use fewer, smaller cases.
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn prop_moments_append_never_decreases_epsilon(
        sigma in 0.8f64..8.0,
        q in 0.005f64..1.0,
        steps in 1u64..8,
    ) {
        let shorter = uniform_ledger(steps, sigma, q, 1e-5, Mechanism::PerExample);
        let longer = uniform_ledger(steps + 1, sigma, q, 1e-5, Mechanism::PerExample);
        let lo = moments_epsilon(&shorter).unwrap().epsilon;
        let hi = moments_epsilon(&longer).unwrap().epsilon;
        prop_assert!(hi >= lo - 1e-9, "moments: {hi} < {lo}");
    }

    #[test]
    fn prop_moments_epsilon_nonincreasing_in_sigma(
        sigma in 0.8f64..6.0,
        bump in 0.1f64..3.0,
        q in 0.005f64..1.0,
        steps in 1u64..200,
    ) {
        let noisier = uniform_ledger(steps, sigma + bump, q, 1e-5, Mechanism::PerExample);
        let quieter = uniform_ledger(steps, sigma, q, 1e-5, Mechanism::PerExample);
        let lo = moments_epsilon(&noisier).unwrap().epsilon;
        let hi = moments_epsilon(&quieter).unwrap().epsilon;
        prop_assert!(lo <= hi + 1e-7, "moments sigma {sigma}+{bump}: {lo} > {hi}");
    }

    #[test]
    fn prop_moments_epsilon_nondecreasing_in_q(
        q_lo in 0.005f64..0.5,
        factor in 1.01f64..5.0,
        sigma in 1.0f64..8.0,
        steps in 1u64..200,
    ) {
        let q_hi = (q_lo * factor).min(1.0);
        let small = uniform_ledger(steps, sigma, q_lo, 1e-5, Mechanism::PerExample);
        let large = uniform_ledger(steps, sigma, q_hi, 1e-5, Mechanism::PerExample);
        let lo = moments_epsilon(&small).unwrap().epsilon;
        let hi = moments_epsilon(&large).unwrap().epsilon;
        prop_assert!(lo <= hi + 1e-7, "moments q {q_lo}->{q_hi}: {lo} > {hi}");
    }
}
