//! Constant-revenue, interim-IR multi-unit rule for i.i.d. bidders.
//!
//! The k-th highest bidder pays `psi(v_(k))` and the other `k - 1` winners
//! split `R - psi(v_(k))`, where `R` is the expected revenue of the efficient
//! allocation and `psi = N / D` with
//!
//! ```text
//! N(v) = ∫_0^v [z'(u) - R G(u)] (1 - F(u)) du
//! D(v) = C(n-1, k-1) F(v)^(n-k) (1 - F(v))^k
//! ```

use std::sync::Arc;

use crate::distributions::FamilyTag;
use crate::environment::{binomial, AuctionEnvironment, Outcome};
use crate::error::{Error, Result};
use crate::payment_rules::{PaymentRule, RuleFlags};
use crate::quadrature::Quadrature;

/// Below this `D(v)` the ratio is replaced by its cancelled form.
const SMALL_DENOM: f64 = 1e-10;
/// Smallest usable denominator of the cancelled form.
const SMALL_CANCELLED: f64 = 1e-8;
const BOUND_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PsiSolution {
    env: Arc<AuctionEnvironment>,
    pub rbar: f64,
    pub grid: Vec<f64>,
    pub psi_vals: Vec<f64>,
    pub numer_vals: Vec<f64>,
    pub denom_vals: Vec<f64>,
}

/// Endpoint and bound diagnostics for a [`PsiSolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct PsiBoundsReport {
    pub min_psi: f64,
    pub max_psi: f64,
    pub rbar: f64,
    pub v0: f64,
    pub k_v0: f64,
    pub psi_in_range: bool,
    pub revenue_bound: bool,
}

impl PsiBoundsReport {
    pub fn passed(&self) -> bool {
        self.psi_in_range && self.revenue_bound
    }
}

/// Diagnostic curves from the `psi <= R` argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiDiagnostics {
    pub h: f64,
    pub k: f64,
    pub y: f64,
}

fn check_env(env: &AuctionEnvironment) -> Result<()> {
    if env.k() < 2 {
        return Err(Error::Precondition(format!(
            "the psi rule needs 2 <= k < n, got k = {}",
            env.k()
        )));
    }
    if !env.is_iid() {
        return Err(Error::Precondition(
            "the psi rule needs i.i.d. bidders".into(),
        ));
    }
    if env.reserve() > 0.0 {
        return Err(Error::Unsupported(
            "the psi rule does not take a reserve".into(),
        ));
    }
    let dist = env.dist(0);
    if dist.family_tag() == FamilyTag::Tabulated {
        return Err(Error::Unsupported(
            "the psi rule needs a continuously differentiable density; tabulated input refused"
                .into(),
        ));
    }
    if !dist.check_regular(1000) {
        return Err(Error::Precondition(
            "the psi rule needs a regular distribution".into(),
        ));
    }
    Ok(())
}

/// Evaluates `psi` on `grid_size` equally spaced points of the support.
pub fn compute_psi(env: &Arc<AuctionEnvironment>, grid_size: usize) -> Result<PsiSolution> {
    check_env(env)?;
    let grid_size = grid_size.max(3);
    let (n, k) = (env.n(), env.k());
    let dist = env.dist(0);
    let hi = dist.support_hi();
    let rbar = env.expected_revenue();
    let c = binomial(n - 1, k - 1);
    let integrand = |u: f64| {
        let f = dist.cdf(u);
        let dens = dist.pdf(u);
        if dens == 0.0 {
            return 0.0;
        }
        c * f.powi((n - k - 1) as i32)
            * (1.0 - f).powi((k - 1) as i32)
            * dens
            * (u * (n - k) as f64 * (1.0 - f) - rbar * f)
    };
    let grid: Vec<f64> = (0..grid_size)
        .map(|j| {
            if j + 1 == grid_size {
                hi
            } else {
                hi * j as f64 / (grid_size - 1) as f64
            }
        })
        .collect();
    let quad = Quadrature::default().with_tol(1e-15).with_max_depth(50);
    let cells: Vec<f64> = grid
        .windows(2)
        .map(|w| quad.integrate(integrand, w[0], w[1]))
        .collect();

    // forward from N(0) = 0 on the lower half, backward from N(hi) = 0 on the
    // upper half
    let mid = grid_size / 2;
    let mut numer = vec![0.0; grid_size];
    for j in 1..=mid {
        numer[j] = numer[j - 1] + cells[j - 1];
    }
    for j in (mid + 1..grid_size - 1).rev() {
        numer[j] = numer[j + 1] - cells[j];
    }
    numer[grid_size - 1] = 0.0;

    let denom: Vec<f64> = grid
        .iter()
        .map(|&v| {
            let f = dist.cdf(v);
            c * f.powi((n - k) as i32) * (1.0 - f).powi(k as i32)
        })
        .collect();

    let cancelled = |v: f64| -> Option<f64> {
        let f = dist.cdf(v);
        let den = (n - k) as f64 - n as f64 * f;
        (den.abs() > SMALL_CANCELLED).then(|| (v * (n - k) as f64 * (1.0 - f) - rbar * f) / den)
    };

    let mut psi: Vec<Option<f64>> = grid
        .iter()
        .zip(numer.iter().zip(&denom))
        .map(|(&v, (&num, &den))| {
            if den >= SMALL_DENOM {
                Some(num / den)
            } else {
                cancelled(v)
            }
        })
        .collect();
    psi[0] = Some(0.0);
    psi[grid_size - 1] = Some(rbar / k as f64);
    let psi_vals = fill_by_linear_extension(&grid, &psi);

    Ok(PsiSolution {
        env: env.clone(),
        rbar,
        grid,
        psi_vals,
        numer_vals: numer,
        denom_vals: denom,
    })
}

/// Fills gaps from the nearest two known points on the same side, or by
/// interpolation when bracketed.
fn fill_by_linear_extension(grid: &[f64], vals: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<usize> = (0..vals.len()).filter(|&j| vals[j].is_some()).collect();
    (0..vals.len())
        .map(|j| {
            if let Some(v) = vals[j] {
                return v;
            }
            let right = known.partition_point(|&idx| idx < j);
            let (a, b) = if right == 0 {
                (known[0], known[1])
            } else if right == known.len() {
                (known[right - 2], known[right - 1])
            } else {
                (known[right - 1], known[right])
            };
            let (ya, yb) = (vals[a].unwrap(), vals[b].unwrap());
            ya + (grid[j] - grid[a]) / (grid[b] - grid[a]) * (yb - ya)
        })
        .collect()
}

impl PsiSolution {
    pub fn env(&self) -> &Arc<AuctionEnvironment> {
        &self.env
    }

    /// `psi(v)` by linear interpolation on the grid.
    pub fn psi(&self, v: f64) -> f64 {
        let last = self.grid.len() - 1;
        if v <= 0.0 {
            return self.psi_vals[0];
        }
        if v >= self.grid[last] {
            return self.psi_vals[last];
        }
        let j = self
            .grid
            .partition_point(|&x| x <= v)
            .saturating_sub(1)
            .min(last - 1);
        let t = (v - self.grid[j]) / (self.grid[j + 1] - self.grid[j]);
        self.psi_vals[j] + t * (self.psi_vals[j + 1] - self.psi_vals[j])
    }

    pub fn diagnostics(&self, v: f64) -> PsiDiagnostics {
        let (n, k) = (self.env.n() as f64, self.env.k() as f64);
        let dist = self.env.dist(0);
        let f = dist.cdf(v);
        let dens = dist.pdf(v);
        let inv_hazard = (1.0 - f) / dens;
        PsiDiagnostics {
            h: (v * (n - k) * (1.0 - f) - self.rbar * f) / (n - k - n * f),
            k: inv_hazard * (n - k - n * f) + k * v - self.rbar,
            y: v * (n - k) * (1.0 - f) / (n - k - (n - 1.0) * f),
        }
    }
}

/// Checks `0 <= psi <= R` on the grid and `R <= k v0` with `F(v0) = (n-k)/n`.
pub fn verify_psi_bounds(sol: &PsiSolution) -> PsiBoundsReport {
    let env = &sol.env;
    let (n, k) = (env.n(), env.k());
    let min_psi = sol.psi_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_psi = sol
        .psi_vals
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let v0 = env.dist(0).inverse_cdf((n - k) as f64 / n as f64);
    let k_v0 = k as f64 * v0;
    PsiBoundsReport {
        min_psi,
        max_psi,
        rbar: sol.rbar,
        v0,
        k_v0,
        psi_in_range: min_psi >= -BOUND_TOL && max_psi <= sol.rbar + BOUND_TOL,
        revenue_bound: sol.rbar <= k_v0 + BOUND_TOL,
    }
}

/// The constant-revenue rule; refuses solutions that fail the bound checks.
pub fn zero_variance_rule(sol: Arc<PsiSolution>) -> Result<PsiRule> {
    let report = verify_psi_bounds(&sol);
    if !report.passed() {
        return Err(Error::BoundViolation(format!(
            "psi in [{}, {}], R = {}, k v0 = {}",
            report.min_psi, report.max_psi, report.rbar, report.k_v0
        )));
    }
    Ok(PsiRule { sol })
}

pub struct PsiRule {
    sol: Arc<PsiSolution>,
}

impl PsiRule {
    pub fn solution(&self) -> &PsiSolution {
        &self.sol
    }
}

impl PaymentRule for PsiRule {
    fn name(&self) -> &str {
        "psi_rule"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags {
            ex_post_ir: false,
            nonneg_payments: true,
            losers_pay_zero: true,
        }
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.sol.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        let env = &self.sol.env;
        env.allocate(values, out);
        out.payments.iter_mut().for_each(|p| *p = 0.0);
        let k = env.k();
        let kth = out.order[k - 1];
        let psi = self.sol.psi(values[kth]);
        let share = (self.sol.rbar - psi) / (k - 1) as f64;
        for &i in &out.order[..k - 1] {
            out.payments[i] = share;
        }
        out.payments[kth] = psi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ValueDistribution;

    fn env(n: usize, k: usize, d: ValueDistribution) -> Arc<AuctionEnvironment> {
        Arc::new(AuctionEnvironment::iid(n, k, d).unwrap())
    }

    fn uniform32() -> Arc<AuctionEnvironment> {
        env(3, 2, ValueDistribution::uniform(1.0).unwrap())
    }

    #[test]
    fn uniform_three_two_is_quarter_value() {
        let sol = compute_psi(&uniform32(), 4096).unwrap();
        let err = sol
            .grid
            .iter()
            .zip(&sol.psi_vals)
            .map(|(v, p)| (p - v / 4.0).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert_eq!(sol.psi(0.0), 0.0);
        assert!((sol.psi(1.0) - 0.25).abs() < 1e-12);
        for (j, &v) in sol.grid.iter().enumerate().step_by(97) {
            let n_exact = v * v * (1.0 - v).powi(2) / 2.0;
            let d_exact = 2.0 * v * (1.0 - v).powi(2);
            assert!((sol.numer_vals[j] - n_exact).abs() < 1e-12);
            assert!((sol.denom_vals[j] - d_exact).abs() < 1e-12);
        }
    }

    #[test]
    fn bounds_report() {
        let sol = compute_psi(&uniform32(), 1024).unwrap();
        let r = verify_psi_bounds(&sol);
        assert!(r.passed());
        assert!((r.v0 - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.k_v0 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.max_psi - 0.25).abs() < 1e-9);
        let p = compute_psi(
            &env(4, 2, ValueDistribution::power(2.0, 1.0).unwrap()),
            2048,
        )
        .unwrap();
        assert!(
            verify_psi_bounds(&p).passed(),
            "{:?}",
            verify_psi_bounds(&p)
        );
    }

    #[test]
    fn rule_examples() {
        let sol = Arc::new(compute_psi(&uniform32(), 4096).unwrap());
        let rule = zero_variance_rule(sol).unwrap();
        let out = rule.apply(&[0.9, 0.6, 0.1]);
        assert!((out.payments[0] - 0.35).abs() < 1e-9);
        assert!((out.payments[1] - 0.15).abs() < 1e-9);
        assert_eq!(out.payments[2], 0.0);
        assert!((out.revenue() - 0.5).abs() < 1e-12);
        let out = rule.apply(&[0.3, 0.0, 0.0]);
        assert_eq!(out.allocation, vec![true, true, false]);
        assert_eq!(out.payments[1], 0.0);
        assert!((out.payments[0] - 0.5).abs() < 1e-12);
        // the top winner pays more than her value
        let out = rule.apply(&[0.2, 0.1, 0.05]);
        assert!(out.payments[0] > 0.2);
    }

    #[test]
    fn preconditions() {
        let k1 = env(3, 1, ValueDistribution::uniform(1.0).unwrap());
        let e = compute_psi(&k1, 100).unwrap_err();
        assert!(e.to_string().contains("2 <= k"));
        let irregular = env(3, 2, ValueDistribution::power(0.5, 1.0).unwrap());
        assert!(compute_psi(&irregular, 100).is_err());
        let tab = env(
            3,
            2,
            ValueDistribution::tabulated(&[[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]).unwrap(),
        );
        assert!(compute_psi(&tab, 100).is_err());
    }

    #[test]
    fn diagnostics_are_finite_away_from_singular_points() {
        let sol = compute_psi(&uniform32(), 256).unwrap();
        let d = sol.diagnostics(0.7);
        assert!(d.h.is_finite() && d.k.is_finite() && d.y.is_finite());
        // uniform n = 3, k = 2: H(v) = (v(1-v) - v/2) / (1 - 3v)
        assert!((d.h - (0.7 * 0.3 - 0.35) / (1.0 - 2.1)).abs() < 1e-12);
    }

    #[test]
    fn fill_extends_linearly() {
        let g = [0.0, 1.0, 2.0, 3.0, 4.0];
        let v = [None, Some(1.0), Some(2.0), None, Some(4.0)];
        assert_eq!(
            fill_by_linear_extension(&g, &v),
            vec![0.0, 1.0, 2.0, 3.0, 4.0]
        );
    }
}
