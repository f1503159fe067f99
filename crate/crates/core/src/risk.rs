//! Revenue statistics: moments and convex risk measures by quadrature or
//! Monte Carlo, the discriminatory/uniform variance comparison and revenue
//! histograms.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::environment::{AuctionEnvironment, Outcome};
use crate::error::{Error, Result};
use crate::expectation::{ProfileQuadrature, ProfileSampler, MAX_QUADRATURE_DIM};
use crate::par::{pairwise_sum, Execution};
use crate::payment_rules::{wpb_bid, PaymentRule};
use crate::quadrature::Quadrature;

/// Largest exponent passed to `exp`.
const EXP_CAP: f64 = 700.0;

/// Convex loss `g` applied to revenue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RiskMeasure {
    /// `x^p`, `p >= 1`
    Power(f64),
    /// `exp(theta x)`, `theta > 0`, exponent capped at 700
    Exponential(f64),
    /// `max(0, x - t)`
    Hinge(f64),
}

impl RiskMeasure {
    pub fn new_power(p: f64) -> Result<Self> {
        if p >= 1.0 && p.is_finite() {
            Ok(RiskMeasure::Power(p))
        } else {
            Err(Error::Config(format!("power risk needs p >= 1, got {p}")))
        }
    }

    pub fn new_exponential(theta: f64) -> Result<Self> {
        if theta > 0.0 && theta.is_finite() {
            Ok(RiskMeasure::Exponential(theta))
        } else {
            Err(Error::Config(format!(
                "exponential risk needs theta > 0, got {theta}"
            )))
        }
    }

    pub fn new_hinge(t: f64) -> Result<Self> {
        if t.is_finite() {
            Ok(RiskMeasure::Hinge(t))
        } else {
            Err(Error::Config("hinge threshold must be finite".into()))
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            RiskMeasure::Power(p) => {
                if p == 2.0 {
                    x * x
                } else {
                    x.abs().powf(p).copysign(x)
                }
            }
            RiskMeasure::Exponential(theta) => (theta * x).min(EXP_CAP).exp(),
            RiskMeasure::Hinge(t) => (x - t).max(0.0),
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RiskMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RiskMeasure::Power(p) => write!(f, "power:{p}"),
            RiskMeasure::Exponential(t) => write!(f, "exp:{t}"),
            RiskMeasure::Hinge(t) => write!(f, "hinge:{t}"),
        }
    }
}

impl FromStr for RiskMeasure {
    type Err = Error;

    /// `power:2`, `exp:1.0` or `hinge:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!("risk measure '{s}' must look like kind:param"))
        })?;
        let x: f64 = arg
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad risk parameter '{arg}'")))?;
        match kind.trim() {
            "power" => Self::new_power(x),
            "exp" | "exponential" => Self::new_exponential(x),
            "hinge" => Self::new_hinge(x),
            other => Err(Error::Config(format!("unknown risk measure '{other}'"))),
        }
    }
}

/// Parses a comma-separated list of risk measures.
pub fn parse_risk_list(s: &str) -> Result<Vec<RiskMeasure>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RevenueStats {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
    pub risk_values: Vec<(RiskMeasure, f64)>,
    /// Standard errors of mean, second moment, variance and each risk value;
    /// `None` for quadrature.
    pub stderr: Option<StatErrors>,
    pub sample_count: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatErrors {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
    pub risk_values: Vec<f64>,
}

/// Exact statistics by nested quadrature; `n <= 3`.
pub fn quadrature_stats(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    measures: &[RiskMeasure],
) -> Result<RevenueStats> {
    quadrature_stats_with(env, rule, measures, Quadrature::default().with_tol(1e-11))
}

pub fn quadrature_stats_with(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    measures: &[RiskMeasure],
    quad: Quadrature,
) -> Result<RevenueStats> {
    if env.n() > MAX_QUADRATURE_DIM {
        return Err(Error::Unsupported(format!(
            "quadrature over {} bidders is too expensive; use Monte Carlo",
            env.n()
        )));
    }
    let pq = ProfileQuadrature::new(env, quad).with_breaks(&rule.breakpoints());
    let dim = 2 + measures.len();
    let m = pq.expect(None, dim, |values, out| {
        let r = rule.apply(values).revenue();
        out[0] = r;
        out[1] = r * r;
        for (o, g) in out[2..].iter_mut().zip(measures) {
            *o = g.eval(r);
        }
    });
    let (mean, second_moment) = (m[0], m[1]);
    Ok(RevenueStats {
        mean,
        second_moment,
        variance: second_moment - mean * mean,
        risk_values: measures
            .iter()
            .copied()
            .zip(m[2..].iter().copied())
            .collect(),
        stderr: None,
        sample_count: None,
        seed: None,
    })
}

/// Monte Carlo statistics. Two passes over the same draws: the first gives
/// the mean, the second centred moments. Results depend only on
/// `(samples, seed)`.
pub fn mc_stats(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    measures: &[RiskMeasure],
    samples: usize,
    seed: u64,
) -> Result<RevenueStats> {
    mc_stats_with(env, rule, measures, samples, seed, Execution::Parallel)
}

pub fn mc_stats_with(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    measures: &[RiskMeasure],
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<RevenueStats> {
    if samples < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
    }
    let sampler = ProfileSampler::new(env, samples, seed).with_execution(exec);
    let nf = samples as f64;
    let k = measures.len();

    // pass 1: means of R, R^2 and g(R)
    let sums = block_sums(
        &sampler,
        env.n(),
        2 + k,
        |r, out| {
            out[0] = r;
            out[1] = r * r;
            for (o, g) in out[2..].iter_mut().zip(measures) {
                *o = g.eval(r);
            }
        },
        rule,
    );
    let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
    let mean = means[0];
    let second_moment = means[1];

    // pass 2: centred squares; column 1 tracks the variance estimator's
    // influence function (R - mean)^2
    let centred = block_sums(
        &sampler,
        env.n(),
        3 + k,
        |r, out| {
            let d = r - mean;
            out[0] = d * d;
            out[1] = (r * r - second_moment).powi(2);
            let d2 = d * d;
            out[2] = d2 * d2;
            for (j, (o, g)) in out[3..].iter_mut().zip(measures).enumerate() {
                let e = g.eval(r) - means[2 + j];
                *o = e * e;
            }
        },
        rule,
    );
    let var_r = centred[0] / (nf - 1.0);
    let var_r2 = centred[1] / (nf - 1.0);
    let m4 = centred[2] / nf;
    let se = |v: f64| (v.max(0.0) / nf).sqrt();
    let stderr = StatErrors {
        mean: se(var_r),
        second_moment: se(var_r2),
        variance: se(m4 - var_r * var_r),
        risk_values: centred[3..].iter().map(|c| se(c / (nf - 1.0))).collect(),
    };
    Ok(RevenueStats {
        mean,
        second_moment,
        variance: var_r,
        risk_values: measures
            .iter()
            .copied()
            .zip(means[2..].iter().copied())
            .collect(),
        stderr: Some(stderr),
        sample_count: Some(samples),
        seed: Some(seed),
    })
}

/// Per-column totals over all samples of `f(revenue)`, reduced pairwise in
/// block order.
fn block_sums<F>(
    sampler: &ProfileSampler<'_>,
    n: usize,
    dim: usize,
    f: F,
    rule: &dyn PaymentRule,
) -> Vec<f64>
where
    F: Fn(f64, &mut [f64]) + Sync + Send,
{
    let blocks = sampler.run(
        || (vec![0.0; dim], vec![0.0; dim], Outcome::new(n)),
        |acc: &mut (Vec<f64>, Vec<f64>, Outcome), values| {
            rule.apply_into(values, &mut acc.2);
            f(acc.2.revenue(), &mut acc.1);
            for (s, x) in acc.0.iter_mut().zip(&acc.1) {
                *s += x;
            }
        },
    );
    (0..dim)
        .map(|c| pairwise_sum(&blocks.iter().map(|b| b.0[c]).collect::<Vec<_>>()))
        .collect()
}

/// Revenue variances of two formats on common draws. For the
/// discriminatory/uniform comparison `d` is the discriminatory format
/// (winners pay `z/x` of their own value) and `u` the uniform one (`k` times
/// the (k+1)-st value).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceComparison {
    pub var_d: f64,
    pub var_u: f64,
    pub stderr_d: f64,
    pub stderr_u: f64,
    /// Standard error of `var_d - var_u` from the paired draws.
    pub stderr_diff: f64,
    pub mean_d: f64,
    pub mean_u: f64,
    pub samples: usize,
    pub seed: u64,
}

impl VarianceComparison {
    /// `var_d <= var_u` up to `z` joint standard errors.
    pub fn ranking_holds(&self, z: f64) -> bool {
        self.var_d <= self.var_u + z * self.stderr_diff
    }
}

fn revenues_d_u(env: &AuctionEnvironment, values: &[f64], order: &mut Vec<usize>) -> (f64, f64) {
    crate::environment::rank_descending(values, order);
    let k = env.k();
    let rd: f64 = order[..k].iter().map(|&i| wpb_bid(env, i, values[i])).sum();
    let ru = k as f64 * values[order[k]];
    (rd, ru)
}

pub fn compare_discriminatory_uniform(
    env: &AuctionEnvironment,
    samples: usize,
    seed: u64,
) -> Result<VarianceComparison> {
    compare_discriminatory_uniform_with(env, samples, seed, Execution::Parallel)
}

pub fn compare_discriminatory_uniform_with(
    env: &AuctionEnvironment,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<VarianceComparison> {
    if !env.is_iid() {
        return Err(Error::Precondition(
            "the format comparison needs i.i.d. bidders".into(),
        ));
    }
    if env.reserve() > 0.0 {
        return Err(Error::Unsupported(
            "the format comparison does not take a reserve".into(),
        ));
    }
    paired_variances(env, samples, seed, exec, |values, order| {
        revenues_d_u(env, values, order)
    })
}

/// Revenue variances of two rules on the same draws.
pub fn compare_rules(
    env: &AuctionEnvironment,
    left: &dyn PaymentRule,
    right: &dyn PaymentRule,
    samples: usize,
    seed: u64,
) -> Result<VarianceComparison> {
    let n = env.n();
    paired_variances(env, samples, seed, Execution::Parallel, |values, _| {
        let mut out = Outcome::new(n);
        left.apply_into(values, &mut out);
        let a = out.revenue();
        right.apply_into(values, &mut out);
        (a, out.revenue())
    })
}

/// Two passes over common draws of `(R_left, R_right)`: means, then centred
/// squares and their products for the paired standard error.
fn paired_variances<F>(
    env: &AuctionEnvironment,
    samples: usize,
    seed: u64,
    exec: Execution,
    revenues: F,
) -> Result<VarianceComparison>
where
    F: Fn(&[f64], &mut Vec<usize>) -> (f64, f64) + Sync + Send,
{
    if samples < 2 {
        return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
    }
    let sampler = ProfileSampler::new(env, samples, seed).with_execution(exec);
    let nf = samples as f64;
    let n = env.n();
    let totals = |pass: &(dyn Fn(f64, f64, &mut [f64; 5]) + Sync)| -> [f64; 5] {
        let blocks = sampler.run(
            || ([0.0; 5], Vec::with_capacity(n)),
            |acc: &mut ([f64; 5], Vec<usize>), values| {
                let (rd, ru) = revenues(values, &mut acc.1);
                let mut row = [0.0; 5];
                pass(rd, ru, &mut row);
                for (s, x) in acc.0.iter_mut().zip(row) {
                    *s += x;
                }
            },
        );
        let mut out = [0.0; 5];
        for (c, o) in out.iter_mut().enumerate() {
            *o = pairwise_sum(&blocks.iter().map(|b| b.0[c]).collect::<Vec<_>>());
        }
        out
    };
    let first = totals(&|rd, ru, row| {
        row[0] = rd;
        row[1] = ru;
    });
    let (mean_d, mean_u) = (first[0] / nf, first[1] / nf);
    let second = totals(&|rd, ru, row| {
        let (a, b) = ((rd - mean_d).powi(2), (ru - mean_u).powi(2));
        row[0] = a;
        row[1] = b;
        row[2] = a * a;
        row[3] = b * b;
        row[4] = (a - b) * (a - b);
    });
    let var_d = second[0] / (nf - 1.0);
    let var_u = second[1] / (nf - 1.0);
    let se = |m2: f64, m: f64| ((m2 / nf - m * m).max(0.0) / nf).sqrt();
    let diff_mean = (second[0] - second[1]) / nf;
    Ok(VarianceComparison {
        var_d,
        var_u,
        stderr_d: se(second[2], second[0] / nf),
        stderr_u: se(second[3], second[1] / nf),
        stderr_diff: se(second[4], diff_mean),
        mean_d,
        mean_u,
        samples,
        seed,
    })
}

/// Exact variances of both formats by quadrature (`n <= 3`).
pub fn compare_discriminatory_uniform_quadrature(env: &AuctionEnvironment) -> Result<(f64, f64)> {
    if !env.is_iid() || env.n() > MAX_QUADRATURE_DIM {
        return Err(Error::Unsupported(
            "quadrature comparison needs i.i.d. bidders and n <= 3".into(),
        ));
    }
    let pq = ProfileQuadrature::new(env, Quadrature::default().with_tol(1e-11));
    let m = pq.expect(None, 4, |values, out| {
        let mut order = Vec::with_capacity(values.len());
        let (rd, ru) = revenues_d_u(env, values, &mut order);
        out[0] = rd;
        out[1] = rd * rd;
        out[2] = ru;
        out[3] = ru * ru;
    });
    Ok((m[1] - m[0] * m[0], m[3] - m[2] * m[2]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Density: counts / (samples * bin width).
    pub density: Vec<f64>,
    pub counts: Vec<u64>,
    pub samples: usize,
}

/// Histogram of revenue on `[min, max]` of the sample.
pub fn revenue_histogram(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    samples: usize,
    seed: u64,
    bins: usize,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Config("a histogram needs at least 2 bins".into()));
    }
    let revenue = revenue_samples(env, rule, samples, seed, Execution::Parallel);
    if revenue.is_empty() {
        return Err(Error::Config("a histogram needs at least 1 sample".into()));
    }
    let lo = revenue.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = revenue.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for r in &revenue {
        let b = (((r - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|j| lo + width * j as f64).collect();
    let density = counts
        .iter()
        .map(|&c| c as f64 / (revenue.len() as f64 * width))
        .collect();
    Ok(Histogram {
        edges,
        density,
        counts,
        samples: revenue.len(),
    })
}

/// Revenue of each sampled profile, in sample order.
pub fn revenue_samples(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Vec<f64> {
    if samples == 0 {
        return Vec::new();
    }
    let sampler = ProfileSampler::new(env, samples, seed).with_execution(exec);
    sampler
        .run(
            || (Vec::new(), Outcome::new(env.n())),
            |acc: &mut (Vec<f64>, Outcome), values| {
                rule.apply_into(values, &mut acc.1);
                acc.0.push(acc.1.revenue());
            },
        )
        .into_iter()
        .flat_map(|b| b.0)
        .collect()
}

/// Two-sided Kolmogorov–Smirnov test of `sample` against `cdf`:
/// `(D, p-value)` with the asymptotic Kolmogorov distribution.
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (j, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - j as f64 / n).max((j + 1) as f64 / n - f);
    }
    let sqrt_n = n.sqrt();
    let lambda = (sqrt_n + 0.12 + 0.11 / sqrt_n) * d;
    (d, kolmogorov_survival(lambda))
}

/// `P(K > lambda)` for the Kolmogorov distribution.
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * jf * jf * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ValueDistribution;
    use crate::payment_rules::{eso_futo_rule, make_rule, RuleKind};
    use std::sync::Arc;

    fn u2() -> Arc<AuctionEnvironment> {
        Arc::new(AuctionEnvironment::iid(2, 1, ValueDistribution::uniform(1.0).unwrap()).unwrap())
    }

    #[test]
    fn risk_measure_parsing_and_values() {
        let ms = parse_risk_list("power:2,exp:1.0,hinge:0.5").unwrap();
        assert_eq!(
            ms,
            vec![
                RiskMeasure::Power(2.0),
                RiskMeasure::Exponential(1.0),
                RiskMeasure::Hinge(0.5)
            ]
        );
        assert_eq!(ms[0].eval(3.0), 9.0);
        assert!((ms[1].eval(1.0) - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(ms[2].eval(0.2), 0.0);
        assert!(RiskMeasure::Exponential(1.0).eval(1e6).is_finite());
        assert!("power:0.5".parse::<RiskMeasure>().is_err());
        assert!("cubic:2".parse::<RiskMeasure>().is_err());
        assert!("power".parse::<RiskMeasure>().is_err());
    }

    #[test]
    fn canonical_variances_by_quadrature() {
        let e = u2();
        let cases = [
            (RuleKind::SecondPrice, 1.0 / 18.0),
            (RuleKind::Wpb, 1.0 / 72.0),
            (RuleKind::AllPay, 2.0 / 45.0),
        ];
        for (kind, var) in cases {
            let rule = make_rule(&e, kind).unwrap();
            let s = quadrature_stats(&e, rule.as_ref(), &[RiskMeasure::Power(2.0)]).unwrap();
            assert!((s.variance - var).abs() < 1e-8, "{kind}: {}", s.variance);
            assert!((s.mean - 1.0 / 3.0).abs() < 1e-8);
            assert!((s.variance - (s.second_moment - s.mean * s.mean)).abs() < 1e-12);
            assert!((s.risk_values[0].1 - s.second_moment).abs() < 1e-12);
        }
    }

    #[test]
    fn mc_matches_closed_form_and_is_deterministic() {
        let e = u2();
        let rule = make_rule(&e, RuleKind::Wpb).unwrap();
        let a = mc_stats(&e, rule.as_ref(), &[], 200_000, 9).unwrap();
        let se = a.stderr.as_ref().unwrap().variance;
        assert!(
            (a.variance - 1.0 / 72.0).abs() < 4.0 * se,
            "{} {se}",
            a.variance
        );
        let b = mc_stats_with(&e, rule.as_ref(), &[], 200_000, 9, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eso_futo_variance_is_zero() {
        let e = u2();
        let rule = eso_futo_rule(&e);
        let s = mc_stats(&e, &rule, &[], 50_000, 1).unwrap();
        // constant up to rounding in the payment sum
        assert!(s.variance < 1e-26, "{}", s.variance);
        assert!(s.stderr.unwrap().mean < 1e-14);
    }

    #[test]
    fn varcomp_closed_form() {
        let (vd, vu) = compare_discriminatory_uniform_quadrature(&u2()).unwrap();
        assert!((vd - 1.0 / 72.0).abs() < 1e-8 && (vu - 1.0 / 18.0).abs() < 1e-8);
        let c = compare_discriminatory_uniform(&u2(), 100_000, 4).unwrap();
        assert!(c.ranking_holds(3.0));
        assert!((c.var_d - 1.0 / 72.0).abs() < 5.0 * c.stderr_d);
    }

    #[test]
    fn histogram_support_and_ks() {
        let e = u2();
        let fp = make_rule(&e, RuleKind::Wpb).unwrap();
        let h = revenue_histogram(&e, fp.as_ref(), 20_000, 2, 40).unwrap();
        assert!(h.edges[0] >= 0.0 && *h.edges.last().unwrap() <= 0.5 + 1e-12);
        let total: f64 = h
            .density
            .iter()
            .zip(h.edges.windows(2))
            .map(|(d, w)| d * (w[1] - w[0]))
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        let sp = make_rule(&e, RuleKind::SecondPrice).unwrap();
        let r = revenue_samples(&e, sp.as_ref(), 20_000, 5, Execution::Parallel);
        let (_, p) = ks_test(&r, |x| 1.0 - (1.0 - x).powi(2));
        assert!(p > 0.01, "{p}");
        let (_, p_bad) = ks_test(&r, |x| x);
        assert!(p_bad < 1e-6);
        assert!(revenue_histogram(&e, sp.as_ref(), 10, 0, 1).is_err());
    }
}
