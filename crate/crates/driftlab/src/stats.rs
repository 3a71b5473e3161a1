//! Statistical validation utilities: Wilson score intervals, McNemar's test,
//! exact binomial tails, Pearson correlation, and rank-based AUC.
//!
//! Everything is implemented directly over f64 with the usual special-function
//! machinery (Lanczos log-gamma, regularized incomplete gamma/beta, Acklam's
//! normal quantile) so results are reproducible without a stats dependency.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("no discordant pairs: b + c must be >= 1")]
    NoDiscordantPairs,
    #[error("inputs have zero variance")]
    ZeroVariance,
    #[error("scores contain only a single class")]
    SingleClass,
    #[error("need at least {need} paired observations, got {got}")]
    TooFewObservations { need: usize, got: usize },
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
#[allow(clippy::excessive_precision)]
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = a;
    for _ in 0..500 {
        n += 1.0;
        term *= x / n;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction (Lentz).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Survival function of the chi-squared distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    assert!(x >= 0.0 && df > 0.0);
    if x == 0.0 {
        return 1.0;
    }
    let a = df / 2.0;
    let half = x / 2.0;
    if half < a + 1.0 {
        1.0 - gamma_p_series(a, half)
    } else {
        gamma_q_cf(a, half)
    }
}

/// Continued fraction for the regularized incomplete beta function.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Standard normal quantile (Acklam's rational approximation, |rel err| < 1.2e-9).
#[allow(clippy::excessive_precision)]
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0, 1)");
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

// ---------------------------------------------------------------------------
// Tests and intervals
// ---------------------------------------------------------------------------

/// Wilson score interval for `k` successes out of `n` at the given confidence.
pub fn wilson_ci(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    assert!(n >= 1 && k <= n, "wilson_ci requires 0 <= k <= n, n >= 1");
    assert!(confidence > 0.0 && confidence < 1.0);
    let z = normal_quantile(0.5 + confidence / 2.0);
    let n_f = n as f64;
    let p_hat = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p_hat + z2 / (2.0 * n_f)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    // Exact bounds at the degenerate counts.
    let lo = if k == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if k == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

/// McNemar's chi-squared test over discordant pair counts, without continuity
/// correction: chi2 = (b - c)^2 / (b + c), p from chi2 with 1 df.
pub fn mcnemar(b: u64, c: u64) -> Result<(f64, f64), StatsError> {
    if b + c == 0 {
        return Err(StatsError::NoDiscordantPairs);
    }
    let diff = b as f64 - c as f64;
    let chi2 = diff * diff / (b + c) as f64;
    Ok((chi2, chi2_sf(chi2, 1.0)))
}

/// One-sided lower-tail exact binomial test:
/// sum over i <= successes of C(n, i) p0^i (1 - p0)^(n - i), in log space.
pub fn binomial_exact(successes: u64, n: u64, p0: f64) -> f64 {
    assert!(successes <= n, "successes must be <= n");
    assert!((0.0..=1.0).contains(&p0));
    if successes == n {
        return 1.0;
    }
    if p0 == 0.0 {
        return 1.0;
    }
    if p0 == 1.0 {
        return 0.0;
    }
    let ln_p = p0.ln();
    let ln_q = (1.0 - p0).ln();
    let ln_n1 = ln_gamma(n as f64 + 1.0);
    let log_terms: Vec<f64> = (0..=successes)
        .map(|i| {
            let i_f = i as f64;
            ln_n1 - ln_gamma(i_f + 1.0) - ln_gamma((n - i) as f64 + 1.0)
                + i_f * ln_p
                + (n - i) as f64 * ln_q
        })
        .collect();
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// Sample Pearson correlation with a two-sided p-value from the t-distribution
/// with n - 2 degrees of freedom.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), StatsError> {
    assert_eq!(xs.len(), ys.len(), "paired samples must have equal length");
    let n = xs.len();
    if n < 3 {
        return Err(StatsError::TooFewObservations { need: 3, got: n });
    }
    let n_f = n as f64;
    let mean_x = xs.iter().sum::<f64>() / n_f;
    let mean_y = ys.iter().sum::<f64>() / n_f;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = n_f - 2.0;
    let p = if (1.0 - r * r) <= f64::EPSILON {
        0.0
    } else {
        // Two-sided: I_{df/(df + t^2)}(df/2, 1/2).
        let t2 = r * r * df / (1.0 - r * r);
        incomplete_beta(df / 2.0, 0.5, df / (df + t2))
    };
    Ok((r, p))
}

/// Rank-based (Mann-Whitney) AUC. Ties contribute 0.5 via midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, StatsError> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must pair up");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(StatsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Midranks over tie groups.
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wilson_matches_reported_interval() {
        let (lo, hi) = wilson_ci(65, 70, 0.95);
        assert!((lo - 0.843).abs() < 0.001, "lo = {lo}");
        assert!((hi - 0.969).abs() < 0.001, "hi = {hi}");
    }

    #[test]
    fn wilson_zero_successes_lower_bound_is_zero() {
        for n in [1, 5, 70, 500] {
            let (lo, _) = wilson_ci(0, n, 0.95);
            assert_eq!(lo, 0.0);
            let (_, hi) = wilson_ci(n, n, 0.95);
            assert_eq!(hi, 1.0);
        }
    }

    // Independent oracle: the Wilson bounds are the roots p of
    // (p_hat - p)^2 = z^2 p (1 - p) / n. Solve by bisection.
    fn wilson_oracle(k: u64, n: u64, confidence: f64) -> (f64, f64) {
        let z = normal_quantile(0.5 + confidence / 2.0);
        let p_hat = k as f64 / n as f64;
        let g = |p: f64| (p_hat - p) * (p_hat - p) - z * z * p * (1.0 - p) / n as f64;
        let bisect = |mut lo: f64, mut hi: f64| {
            for _ in 0..200 {
                let mid = (lo + hi) / 2.0;
                if g(lo).signum() == g(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (lo + hi) / 2.0
        };
        // g > 0 far from p_hat, g < 0 at p_hat (for 0 < p_hat < 1).
        let lo = if k == 0 { 0.0 } else { bisect(0.0, p_hat) };
        let hi = if k == n { 1.0 } else { bisect(1.0, p_hat) };
        (lo, hi)
    }

    #[test]
    fn wilson_agrees_with_root_finding_oracle() {
        for (k, n) in [
            (1u64, 10u64),
            (5, 10),
            (65, 70),
            (3, 100),
            (99, 100),
            (35, 70),
        ] {
            let (lo, hi) = wilson_ci(k, n, 0.95);
            let (olo, ohi) = wilson_oracle(k, n, 0.95);
            assert!((lo - olo).abs() < 1e-6, "k={k} n={n}: {lo} vs {olo}");
            assert!((hi - ohi).abs() < 1e-6, "k={k} n={n}: {hi} vs {ohi}");
        }
    }

    #[test]
    fn mcnemar_21_0_is_exactly_21() {
        let (chi2, p) = mcnemar(21, 0).unwrap();
        assert_eq!(chi2, 21.0);
        assert!(p < 1e-5);
    }

    #[test]
    fn mcnemar_symmetric_counts_are_zero() {
        for c in [1u64, 4, 100] {
            let (chi2, p) = mcnemar(c, c).unwrap();
            assert_eq!(chi2, 0.0);
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn mcnemar_hand_computed_case() {
        let (chi2, _) = mcnemar(5, 1).unwrap();
        assert!((chi2 - 16.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn mcnemar_no_discordant_pairs_errors() {
        assert_eq!(mcnemar(0, 0).unwrap_err(), StatsError::NoDiscordantPairs);
    }

    #[test]
    fn binomial_zero_of_64_matches_power_oracle() {
        let p = binomial_exact(0, 64, 0.535);
        let oracle = 0.465f64.powi(64);
        assert!((p / oracle - 1.0).abs() < 1e-9, "{p} vs {oracle}");
        // And the reported magnitude.
        assert!(p / 5.21e-22 < 1.02 && 5.21e-22 / p < 1.02, "p = {p:e}");
    }

    #[test]
    fn binomial_saturated_and_small_cases() {
        assert_eq!(binomial_exact(10, 10, 0.3), 1.0);
        let p = binomial_exact(2, 10, 0.5);
        assert!((p - 0.0546875).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn pearson_perfect_correlations() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (r, p) = pearson_r(&xs, &ys).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(p < 1e-9);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        let (r, _) = pearson_r(&xs, &neg).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_matches_hand_computed_covariance() {
        let xs = [1.0, 2.0, 4.0, 5.0, 8.0];
        let ys = [3.0, 2.0, 7.0, 6.0, 10.0];
        // Hand route: raw-moment formula.
        let n = 5.0;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let (r, _) = pearson_r(&xs, &ys).unwrap();
        assert!((r - want).abs() < 1e-9, "{r} vs {want}");
    }

    #[test]
    fn pearson_zero_variance_errors() {
        let xs = [2.0, 2.0, 2.0, 2.0];
        let ys = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pearson_r(&xs, &ys).unwrap_err(), StatsError::ZeroVariance);
    }

    #[test]
    fn auc_separated_and_tied() {
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1];
        let labels = [true, true, true, false, false];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);

        let flat = [0.5; 6];
        let labels = [true, false, true, false, true, false];
        assert_eq!(auc(&flat, &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_brute_force() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.8, 0.2];
        let labels = [false, true, false, true, false, true];
        // Oracle: direct pairwise comparison.
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (sp, _) in scores.iter().zip(&labels).filter(|(_, &l)| l) {
            for (sn, _) in scores.iter().zip(&labels).filter(|(_, &l)| !l) {
                pairs += 1.0;
                if sp > sn {
                    total += 1.0;
                } else if sp == sn {
                    total += 0.5;
                }
            }
        }
        let want = total / pairs;
        assert_eq!(auc(&scores, &labels).unwrap(), want);
    }

    #[test]
    fn auc_single_class_errors() {
        assert_eq!(
            auc(&[0.4, 0.5], &[true, true]).unwrap_err(),
            StatsError::SingleClass
        );
    }

    proptest! {
        #[test]
        fn wilson_contains_the_point_estimate(k in 0u64..=50, extra in 1u64..50) {
            let n = k + extra;
            let (lo, hi) = wilson_ci(k, n, 0.95);
            let p_hat = k as f64 / n as f64;
            prop_assert!(lo <= p_hat + 1e-12 && p_hat <= hi + 1e-12);
        }

        #[test]
        fn mcnemar_is_symmetric_in_labels(b in 0u64..200, c in 0u64..200) {
            prop_assume!(b + c >= 1);
            let (x1, p1) = mcnemar(b, c).unwrap();
            let (x2, p2) = mcnemar(c, b).unwrap();
            prop_assert_eq!(x1, x2);
            prop_assert_eq!(p1, p2);
        }
    }
}
