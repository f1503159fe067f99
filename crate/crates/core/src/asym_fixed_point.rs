//! Variance-minimizing single-item rule for asymmetric bidders.
//!
//! Looks for indices `pi_i` with `z_i(v) = pi_i(v) prod_{j != i} G_j(pi_i(v))`,
//! where `G_j` is the law of `pi_j(v_j)`. The state of the iteration is one
//! CDF per bidder on a shared grid over `[0, M]`; a step maps the current
//! CDFs to the law of `H_i^{-1}(z_i(v_i))` and mixes it in with a damping
//! factor.

use std::sync::Arc;

use crate::environment::{AuctionEnvironment, Outcome};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::payment_rules::{PaymentRule, RuleFlags};

/// A probability measure on `[0, M]`, stored as its CDF on a uniform grid
/// and linearly interpolated between grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizedMeasure {
    m_cap: f64,
    grid: Vec<f64>,
    cdf_vals: Vec<f64>,
}

impl DiscretizedMeasure {
    pub fn point_mass_at_zero(m_cap: f64, size: usize) -> Self {
        let grid = uniform_grid(m_cap, size);
        let cdf_vals = vec![1.0; grid.len()];
        Self {
            m_cap,
            grid,
            cdf_vals,
        }
    }

    /// Measure with CDF `cdf` sampled on a uniform grid of `size` points.
    pub fn from_cdf(m_cap: f64, size: usize, cdf: impl Fn(f64) -> f64) -> Result<Self> {
        let grid = uniform_grid(m_cap, size);
        let cdf_vals = grid.iter().map(|&s| cdf(s)).collect();
        Self::from_values(m_cap, grid, cdf_vals)
    }

    pub fn from_values(m_cap: f64, grid: Vec<f64>, mut cdf_vals: Vec<f64>) -> Result<Self> {
        if !(m_cap > 0.0) || grid.len() < 2 || grid.len() != cdf_vals.len() {
            return Err(Error::Precondition(
                "measure needs M > 0 and a grid of size >= 2".into(),
            ));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition(
                "measure grid must be strictly increasing".into(),
            ));
        }
        if cdf_vals.windows(2).any(|w| w[1] < w[0])
            || cdf_vals.iter().any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::Precondition(
                "CDF values must be non-decreasing in [0, 1]".into(),
            ));
        }
        *cdf_vals.last_mut().expect("non-empty") = 1.0;
        Ok(Self {
            m_cap,
            grid,
            cdf_vals,
        })
    }

    pub fn m_cap(&self) -> f64 {
        self.m_cap
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn cdf_vals(&self) -> &[f64] {
        &self.cdf_vals
    }

    /// `G(s)`, with `G(s) = 0` for `s < 0` and `G(s) = 1` for `s >= M`.
    pub fn cdf(&self, s: f64) -> f64 {
        if s < 0.0 {
            return 0.0;
        }
        let last = self.grid.len() - 1;
        if s >= self.grid[last] {
            return 1.0;
        }
        let j = self
            .grid
            .partition_point(|&x| x <= s)
            .saturating_sub(1)
            .min(last - 1);
        let (a, b) = (self.grid[j], self.grid[j + 1]);
        let t = (s - a) / (b - a);
        self.cdf_vals[j] + t * (self.cdf_vals[j + 1] - self.cdf_vals[j])
    }

    /// Kolmogorov distance on the shared grid.
    pub fn kolmogorov(&self, other: &Self) -> f64 {
        self.cdf_vals
            .iter()
            .zip(&other.cdf_vals)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn uniform_grid(hi: f64, size: usize) -> Vec<f64> {
    let size = size.max(2);
    (0..size)
        .map(|j| hi * j as f64 / (size - 1) as f64)
        .collect()
}

/// `H_i(s) = s prod_{j != i} G_j(s)`.
pub fn h_map(measures: &[DiscretizedMeasure], i: usize, s: f64) -> f64 {
    measures
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, m)| m.cdf(s))
        .product::<f64>()
        * s
}

/// `inf { s in [0, m_cap] : h(s) >= y }` for non-decreasing `h` with
/// `h(m_cap) >= y`, by bisection. Returns 0 for `y <= 0`.
pub fn generalized_inverse(h: impl Fn(f64) -> f64, m_cap: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let (mut a, mut b) = (0.0, m_cap);
    if h(a) >= y {
        return 0.0;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if h(m) >= y {
            b = m;
        } else {
            a = m;
        }
    }
    b
}

/// `H_i` tabulated on the measure grid; linear in between.
#[derive(Debug, Clone)]
struct HTable {
    grid: Vec<f64>,
    vals: Vec<f64>,
}

impl HTable {
    fn new(measures: &[DiscretizedMeasure], i: usize) -> Self {
        let grid = measures[0].grid().to_vec();
        let vals = (0..grid.len())
            .map(|g| {
                grid[g]
                    * measures
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, m)| m.cdf_vals[g])
                        .product::<f64>()
            })
            .collect();
        Self { grid, vals }
    }

    fn eval(&self, s: f64) -> f64 {
        let last = self.grid.len() - 1;
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.grid[last] {
            return self.vals[last];
        }
        let j = self
            .grid
            .partition_point(|&x| x <= s)
            .saturating_sub(1)
            .min(last - 1);
        let t = (s - self.grid[j]) / (self.grid[j + 1] - self.grid[j]);
        self.vals[j] + t * (self.vals[j + 1] - self.vals[j])
    }

    /// Exact generalized inverse of the piecewise-linear interpolant.
    fn inverse(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let last = self.grid.len() - 1;
        if y >= self.vals[last] {
            return self.grid[last];
        }
        let j = self.vals.partition_point(|&h| h < y);
        if j == 0 {
            return 0.0;
        }
        let (h0, h1) = (self.vals[j - 1], self.vals[j]);
        let (s0, s1) = (self.grid[j - 1], self.grid[j]);
        s0 + (y - h0) / (h1 - h0) * (s1 - s0)
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy)]
pub struct FixedPointOptions {
    pub grid_size: usize,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub execution: Execution,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            grid_size: 2048,
            damping: 0.5,
            tol: 1e-6,
            max_iter: 500,
            execution: Execution::Parallel,
        }
    }
}

/// Result of the fixed-point iteration.
#[derive(Debug, Clone)]
pub struct PiProfile {
    env: Arc<AuctionEnvironment>,
    m_cap: f64,
    value_grids: Vec<Vec<f64>>,
    pi_vals: Vec<Vec<f64>>,
    /// `H_i` of the final iterate; `pi_i = H_i^{-1} o z_i`.
    h_tables: Vec<HTable>,
    /// Law of each returned `pi_i`, on the measure grid.
    measures: Vec<DiscretizedMeasure>,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Kolmogorov distance of the final step.
    pub last_step: f64,
}

impl PiProfile {
    pub fn env(&self) -> &Arc<AuctionEnvironment> {
        &self.env
    }

    pub fn m_cap(&self) -> f64 {
        self.m_cap
    }

    pub fn measures(&self) -> &[DiscretizedMeasure] {
        &self.measures
    }

    pub fn value_grid(&self, i: usize) -> &[f64] {
        &self.value_grids[i]
    }

    pub fn pi_values(&self, i: usize) -> &[f64] {
        &self.pi_vals[i]
    }

    /// `pi_i(v) = H_i^{-1}(z_i(v))`.
    pub fn pi(&self, i: usize, v: f64) -> f64 {
        self.h_tables[i].inverse(self.env.z(i, v))
    }

    /// `H_i(s)` of the final iterate.
    pub fn h(&self, i: usize, s: f64) -> f64 {
        self.h_tables[i].eval(s)
    }

    /// `prod_{j != i} G_j(pi_i(v))` under the stored measures.
    pub fn g_at_pi(&self, i: usize, v: f64) -> f64 {
        let p = self.pi(i, v);
        self.measures
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, m)| m.cdf(p))
            .product()
    }

    /// `|z_i(v) - pi_i(v) prod_{j != i} G_j(pi_i(v))|` with `G_j` the stored
    /// law of `pi_j`.
    pub fn residual_at(&self, i: usize, v: f64) -> f64 {
        (self.env.z(i, v) - self.pi(i, v) * self.g_at_pi(i, v)).abs()
    }
}

/// Damped fixed-point iteration for the `pi` indices, started from the point
/// mass at 0 for every bidder.
pub fn solve_fixed_point(
    env: &Arc<AuctionEnvironment>,
    opts: FixedPointOptions,
) -> Result<PiProfile> {
    if env.k() != 1 {
        return Err(Error::Precondition(
            "the pi rule is single-item (k = 1)".into(),
        ));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::Config(format!(
            "damping {} not in (0, 1]",
            opts.damping
        )));
    }
    if opts.grid_size < 2 {
        return Err(Error::Config("grid size must be at least 2".into()));
    }
    let n = env.n();
    for i in 0..n {
        let t = env.payment_table(i);
        if env.reserve() > 0.0 || !t.is_strictly_increasing() {
            return Err(Error::Precondition(format!(
                "interim payment of bidder {i} is not strictly increasing"
            )));
        }
    }
    let m_cap = (0..n)
        .map(|i| env.z(i, env.dist(i).support_hi()))
        .fold(0.0, f64::max);
    let g = opts.grid_size;
    let mut measures: Vec<DiscretizedMeasure> = (0..n)
        .map(|_| DiscretizedMeasure::point_mass_at_zero(m_cap, g))
        .collect();

    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = push_forward(env, &measures, opts.execution);
        let mut step: f64 = 0.0;
        for (m, t) in measures.iter_mut().zip(next) {
            let mut prev_mixed = 0.0;
            for (c, tc) in m.cdf_vals.iter_mut().zip(t) {
                let mixed = ((1.0 - opts.damping) * *c + opts.damping * tc).max(prev_mixed);
                step = step.max((mixed - *c).abs());
                *c = mixed;
                prev_mixed = mixed;
            }
            *m.cdf_vals.last_mut().expect("non-empty") = 1.0;
        }
        last_step = step;
        if step < opts.tol {
            converged = true;
            break;
        }
    }

    let h_tables: Vec<HTable> = (0..n).map(|i| HTable::new(&measures, i)).collect();
    let laws = push_forward(env, &measures, opts.execution);
    let measures = laws
        .into_iter()
        .map(|vals| {
            DiscretizedMeasure::from_values(m_cap, measures[0].grid.clone(), monotone(vals))
        })
        .collect::<Result<Vec<_>>>()?;
    let value_grids: Vec<Vec<f64>> = (0..n)
        .map(|i| uniform_grid(env.dist(i).support_hi(), g))
        .collect();
    let pi_vals: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut prev: f64 = 0.0;
            value_grids[i]
                .iter()
                .map(|&v| {
                    prev = prev.max(h_tables[i].inverse(env.z(i, v)));
                    prev
                })
                .collect()
        })
        .collect();
    let mut profile = PiProfile {
        env: env.clone(),
        m_cap,
        value_grids,
        pi_vals,
        h_tables,
        measures,
        residual: 0.0,
        converged,
        iterations,
        last_step,
    };
    profile.residual = verification_residual(&profile, 4 * g, opts.execution);
    Ok(profile)
}

fn monotone(mut vals: Vec<f64>) -> Vec<f64> {
    let mut prev: f64 = 0.0;
    for v in vals.iter_mut() {
        *v = v.clamp(prev, 1.0);
        prev = *v;
    }
    vals
}

/// One undamped step: the law of `H_i^{-1}(z_i(v_i))` on the grid, i.e.
/// `F_i(z_i^{-1}(H_i(s)))`.
fn push_forward(
    env: &AuctionEnvironment,
    measures: &[DiscretizedMeasure],
    exec: Execution,
) -> Vec<Vec<f64>> {
    (0..env.n())
        .map(|i| {
            let h = HTable::new(measures, i);
            let table = env.payment_table(i);
            let dist = env.dist(i);
            exec.map_slice(&h.vals, |&y| dist.cdf(table.inverse(y)))
        })
        .collect()
}

fn verification_residual(profile: &PiProfile, points: usize, exec: Execution) -> f64 {
    let n = profile.env.n();
    let rows: Vec<(usize, f64)> = (0..n)
        .flat_map(|i| {
            let hi = profile.env.dist(i).support_hi();
            (0..points).map(move |j| (i, hi * j as f64 / (points - 1) as f64))
        })
        .collect();
    exec.map_slice(&rows, |&(i, v)| profile.residual_at(i, v))
        .into_iter()
        .fold(0.0, f64::max)
}

/// Highest `pi_i(v_i)` pays it; everybody else pays 0. The item still goes
/// to the highest value.
pub struct PiRule {
    profile: Arc<PiProfile>,
}

impl PiRule {
    pub fn profile(&self) -> &PiProfile {
        &self.profile
    }
}

/// Wraps a solved profile as a payment rule; rejects residuals above `threshold`.
pub fn pi_payment_rule(profile: Arc<PiProfile>, threshold: f64) -> Result<PiRule> {
    if !(profile.residual <= threshold) {
        return Err(Error::ResidualTooLarge {
            residual: profile.residual,
            threshold,
        });
    }
    Ok(PiRule { profile })
}

impl PaymentRule for PiRule {
    fn name(&self) -> &str {
        "pi_rule"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags {
            ex_post_ir: false,
            nonneg_payments: true,
            losers_pay_zero: false,
        }
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.profile.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.profile.env.allocate(values, out);
        let mut payer = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in values.iter().enumerate() {
            let p = self.profile.pi(i, v);
            out.payments[i] = 0.0;
            if p > best {
                best = p;
                payer = i;
            }
        }
        out.payments[payer] = best;
    }
}
