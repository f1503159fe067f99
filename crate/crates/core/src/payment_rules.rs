//! BIC payment rules for the efficient allocation, and numerical
//! revenue-equivalence checks.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::environment::{AuctionEnvironment, Outcome};
use crate::error::{Error, Result};
use crate::expectation::{ProfileQuadrature, ProfileSampler, MAX_QUADRATURE_DIM};
use crate::par::{pairwise_sum, Execution};
use crate::quadrature::Quadrature;

/// Participation and sign properties a rule claims to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleFlags {
    pub ex_post_ir: bool,
    pub nonneg_payments: bool,
    pub losers_pay_zero: bool,
}

impl RuleFlags {
    pub const WINNER_PAYS: RuleFlags = RuleFlags {
        ex_post_ir: true,
        nonneg_payments: true,
        losers_pay_zero: true,
    };
}

/// A direct-revelation payment rule: value profile to allocation and payments.
///
/// Implementations are pure; the Monte Carlo and quadrature engines call
/// `apply_into` concurrently.
pub trait PaymentRule: Send + Sync {
    fn name(&self) -> &str;

    fn flags(&self) -> RuleFlags;

    fn env(&self) -> &AuctionEnvironment;

    /// Writes allocation and payments for `values` into `out`.
    fn apply_into(&self, values: &[f64], out: &mut Outcome);

    fn apply(&self, values: &[f64]) -> Outcome {
        let mut out = Outcome::new(values.len());
        self.apply_into(values, &mut out);
        out
    }

    /// Value coordinates where payments kink or jump, beyond the allocation
    /// boundaries. Quadrature splits there.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `Some` when only the two highest bidders pay, as functions of the two
    /// highest values.
    fn order_stat_form(&self) -> Option<&dyn OrderStatRule> {
        None
    }
}

/// Payments of the top two bidders as functions of the top two values
/// `v1 >= v2`.
pub trait OrderStatRule: Sync {
    fn p1(&self, v1: f64, v2: f64) -> f64;
    fn p2(&self, v1: f64, v2: f64) -> f64;
}

/// Rule names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    SecondPrice,
    AllPay,
    Wpb,
    UniformKPlus1,
    EsoFuto,
    CustomB1B2,
    PiRule,
    PsiRule,
    QpRule,
}

impl RuleKind {
    pub const ALL: [RuleKind; 9] = [
        RuleKind::Wpb,
        RuleKind::SecondPrice,
        RuleKind::AllPay,
        RuleKind::UniformKPlus1,
        RuleKind::EsoFuto,
        RuleKind::CustomB1B2,
        RuleKind::PiRule,
        RuleKind::PsiRule,
        RuleKind::QpRule,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::SecondPrice => "second_price",
            RuleKind::AllPay => "all_pay",
            RuleKind::Wpb => "wpb",
            RuleKind::UniformKPlus1 => "uniform_kplus1",
            RuleKind::EsoFuto => "eso_futo",
            RuleKind::CustomB1B2 => "custom_b1b2",
            RuleKind::PiRule => "pi_rule",
            RuleKind::PsiRule => "psi_rule",
            RuleKind::QpRule => "qp_rule",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown rule '{s}'")))
    }
}

impl<'de> serde::Deserialize<'de> for RuleKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Winner-pays-bid bid `z(v) / x(v)`; zero where `x(v) = 0`.
pub fn wpb_bid(env: &AuctionEnvironment, i: usize, v: f64) -> f64 {
    let x = env.x(i, v);
    if x <= 0.0 {
        0.0
    } else {
        env.z(i, v) / x
    }
}

/// Builds one of the closed-form rules.
pub fn make_rule(env: &Arc<AuctionEnvironment>, kind: RuleKind) -> Result<Arc<dyn PaymentRule>> {
    match kind {
        RuleKind::SecondPrice => {
            if env.k() != 1 {
                return Err(Error::Unsupported(
                    "second_price is single-item; use uniform_kplus1 for k > 1".into(),
                ));
            }
            Ok(Arc::new(SecondPrice { env: env.clone() }))
        }
        RuleKind::AllPay => Ok(Arc::new(AllPay { env: env.clone() })),
        RuleKind::Wpb => {
            if env.k() > 1 && !env.is_iid() {
                return Err(Error::Unsupported(
                    "multi-unit wpb requires i.i.d. bidders".into(),
                ));
            }
            Ok(Arc::new(WinnerPaysBid { env: env.clone() }))
        }
        RuleKind::UniformKPlus1 => {
            if env.k() > 1 && !env.is_iid() {
                return Err(Error::Unsupported(
                    "uniform_kplus1 requires i.i.d. bidders".into(),
                ));
            }
            Ok(Arc::new(UniformKPlus1 { env: env.clone() }))
        }
        RuleKind::EsoFuto => Ok(Arc::new(eso_futo_rule(env))),
        RuleKind::CustomB1B2 => Ok(Arc::new(crate::expost_qp::custom_b1b2_rule(env)?)),
        other => Err(Error::Unsupported(format!(
            "{other} is built by its solver, not by make_rule"
        ))),
    }
}

/// Winner pays the highest competing value (or the reserve).
pub struct SecondPrice {
    env: Arc<AuctionEnvironment>,
}

impl PaymentRule for SecondPrice {
    fn name(&self) -> &str {
        "second_price"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags::WINNER_PAYS
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        out.payments.iter_mut().for_each(|p| *p = 0.0);
        let winner = out.order[0];
        if out.allocation[winner] {
            let runner_up = out.order.get(1).map_or(0.0, |&j| values[j]);
            out.payments[winner] = runner_up.max(self.env.reserve());
        }
    }
}

/// Every bidder pays her interim payment `z_i(v_i)`.
pub struct AllPay {
    env: Arc<AuctionEnvironment>,
}

impl PaymentRule for AllPay {
    fn name(&self) -> &str {
        "all_pay"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags {
            ex_post_ir: false,
            nonneg_payments: true,
            losers_pay_zero: false,
        }
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        for (i, (p, &v)) in out.payments.iter_mut().zip(values).enumerate() {
            *p = self.env.z(i, v);
        }
    }
}

/// Each winner pays `z_i(v_i) / x_i(v_i)`.
pub struct WinnerPaysBid {
    env: Arc<AuctionEnvironment>,
}

impl PaymentRule for WinnerPaysBid {
    fn name(&self) -> &str {
        "wpb"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags::WINNER_PAYS
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        for i in 0..values.len() {
            out.payments[i] = if out.allocation[i] {
                wpb_bid(&self.env, i, values[i])
            } else {
                0.0
            };
        }
    }
}

/// Every winner pays the (k+1)-st highest value.
pub struct UniformKPlus1 {
    env: Arc<AuctionEnvironment>,
}

impl PaymentRule for UniformKPlus1 {
    fn name(&self) -> &str {
        "uniform_kplus1"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags::WINNER_PAYS
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        let price = values[out.order[self.env.k()]].max(self.env.reserve());
        for i in 0..values.len() {
            out.payments[i] = if out.allocation[i] { price } else { 0.0 };
        }
    }
}

/// Constant-revenue rule with transfers:
/// `P_i = z_i(v_i) + (1/(n-1)) sum_{j != i} (zbar_j - z_j(v_j))`.
pub struct EsoFuto {
    env: Arc<AuctionEnvironment>,
}

pub fn eso_futo_rule(env: &Arc<AuctionEnvironment>) -> EsoFuto {
    EsoFuto { env: env.clone() }
}

impl EsoFuto {
    /// The constant revenue `sum_i zbar_i`.
    pub fn constant_revenue(&self) -> f64 {
        self.env.expected_revenue()
    }
}

impl PaymentRule for EsoFuto {
    fn name(&self) -> &str {
        "eso_futo"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags {
            ex_post_ir: false,
            nonneg_payments: false,
            losers_pay_zero: false,
        }
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        let n = values.len();
        // reuse payments as z_i(v_i), then transform in place
        let mut slack_total = 0.0;
        for i in 0..n {
            let z = self.env.z(i, values[i]);
            out.payments[i] = z;
            slack_total += self.env.zbar(i) - z;
        }
        let scale = 1.0 / (n - 1) as f64;
        for i in 0..n {
            let z = out.payments[i];
            let own_slack = self.env.zbar(i) - z;
            out.payments[i] = z + scale * (slack_total - own_slack);
        }
    }
}

/// How a revenue-equivalence residual was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetMethod {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone)]
pub struct RetReport {
    pub max_residual: f64,
    /// Largest Monte Carlo standard error among grid points (0 for quadrature).
    pub max_stderr: f64,
    /// Residual at the grid point with the largest `residual / stderr`.
    pub worst_z_score: f64,
    pub method: RetMethod,
    /// (bidder, v, E[P_i | v_i = v], z_i(v)) for every grid point.
    pub rows: Vec<(usize, f64, f64, f64)>,
}

/// `max_i max_v |E[P_i | v_i = v] - z_i(v)|` over `grid_size` points per bidder.
pub fn verify_ret(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    grid_size: usize,
    mc_samples: usize,
    seed: u64,
) -> f64 {
    verify_ret_report(env, rule, grid_size, mc_samples, seed).max_residual
}

pub fn verify_ret_report(
    env: &AuctionEnvironment,
    rule: &dyn PaymentRule,
    grid_size: usize,
    mc_samples: usize,
    seed: u64,
) -> RetReport {
    let grid_size = grid_size.max(2);
    let points: Vec<(usize, f64)> = (0..env.n())
        .flat_map(|i| {
            let hi = env.dist(i).support_hi();
            (0..grid_size).map(move |j| (i, hi * j as f64 / (grid_size - 1) as f64))
        })
        .collect();
    let use_quadrature = env.n() - 1 < MAX_QUADRATURE_DIM;
    let quad = Quadrature::default().with_tol(1e-11);
    let rule_breaks = rule.breakpoints();
    let top_two = rule
        .order_stat_form()
        .filter(|_| env.n() == 3 && env.k() == 2 && env.is_iid() && env.reserve() == 0.0);
    let rows: Vec<(usize, f64, f64, f64, f64)> =
        Execution::Parallel.map_slice(&points, |&(i, v)| {
            let z = env
                .interim_payment(i, v)
                .expect("grid points lie inside the support");
            if let Some(form) = top_two {
                let m = top_two_interim_payment(env, form, v, &rule_breaks, &quad);
                (i, v, m, z, 0.0)
            } else if use_quadrature {
                let pq = ProfileQuadrature::new(env, quad.clone())
                    .with_breaks(&rule_breaks)
                    .with_execution(Execution::Sequential);
                let m = pq.expect(Some((i, v)), 1, |vals, o| {
                    let out = rule.apply(vals);
                    o[0] = out.payments[i];
                });
                (i, v, m[0], z, 0.0)
            } else {
                let sampler = ProfileSampler::new(env, mc_samples.max(2), seed)
                    .with_execution(Execution::Sequential);
                // moments around z keep the running sums small
                let blocks = sampler.run(
                    || ([0.0f64; 2], Outcome::new(env.n()), vec![0.0; env.n()]),
                    |acc: &mut ([f64; 2], Outcome, Vec<f64>), vals| {
                        acc.2.copy_from_slice(vals);
                        acc.2[i] = v;
                        rule.apply_into(&acc.2, &mut acc.1);
                        let d = acc.1.payments[i] - z;
                        acc.0[0] += d;
                        acc.0[1] += d * d;
                    },
                );
                let s1: Vec<f64> = blocks.iter().map(|b| b.0[0]).collect();
                let s2: Vec<f64> = blocks.iter().map(|b| b.0[1]).collect();
                let nf = sampler.samples() as f64;
                let shift = pairwise_sum(&s1) / nf;
                let mean = z + shift;
                let var = ((pairwise_sum(&s2) / nf - shift * shift) * nf / (nf - 1.0)).max(0.0);
                (i, v, mean, z, (var / nf).sqrt())
            }
        });
    let max_residual = rows.iter().map(|r| (r.2 - r.3).abs()).fold(0.0, f64::max);
    let max_stderr = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    let worst_z_score = rows
        .iter()
        .map(|r| {
            let d = (r.2 - r.3).abs();
            if r.4 > 0.0 {
                d / r.4
            } else if d > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    RetReport {
        max_residual,
        max_stderr,
        worst_z_score,
        method: if use_quadrature {
            RetMethod::Quadrature
        } else {
            RetMethod::MonteCarlo
        },
        rows: rows.into_iter().map(|r| (r.0, r.1, r.2, r.3)).collect(),
    }
}

/// `E[P_i | v_i = v]` for a top-two rule with three i.i.d. bidders:
/// `∫_0^v P1(v, u) 2 f(u) F(u) du + 2 F(v) ∫_v^hi P2(u, v) f(u) du`.
pub fn top_two_interim_payment(
    env: &AuctionEnvironment,
    rule: &dyn OrderStatRule,
    v: f64,
    breaks: &[f64],
    quad: &Quadrature,
) -> f64 {
    let dist = env.dist(0);
    let mut cuts = breaks.to_vec();
    cuts.extend(env.breakpoints());
    let as_top = quad.integrate_with_breaks(
        |u| 2.0 * rule.p1(v, u) * dist.pdf(u) * dist.cdf(u),
        0.0,
        v,
        &cuts,
    );
    let as_second =
        quad.integrate_with_breaks(|u| rule.p2(u, v) * dist.pdf(u), v, dist.support_hi(), &cuts);
    as_top + 2.0 * dist.cdf(v) * as_second
}

/// Wraps a rule and multiplies all payments by a constant.
pub struct ScaledRule {
    pub inner: Arc<dyn PaymentRule>,
    pub factor: f64,
}

impl PaymentRule for ScaledRule {
    fn name(&self) -> &str {
        "scaled"
    }
    fn flags(&self) -> RuleFlags {
        self.inner.flags()
    }
    fn env(&self) -> &AuctionEnvironment {
        self.inner.env()
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.inner.apply_into(values, out);
        out.payments.iter_mut().for_each(|p| *p *= self.factor);
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.inner.breakpoints()
    }
}
