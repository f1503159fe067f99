//! Auction environments and the interim allocation / payment curves of the
//! efficient allocation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distributions::{DistSpec, ValueDistribution};
use crate::error::{Error, Result};
use crate::quadrature::Quadrature;

/// Environment as written in config files. A single `dists` entry means i.i.d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub n: usize,
    pub k: usize,
    pub dists: Vec<DistSpec>,
    #[serde(default)]
    pub reserve: f64,
}

/// Segments of the quadratically graded part of every payment table.
const TABLE_SEGMENTS: usize = 4096;
/// Dyadic refinement below the first uniform node, down to `hi * 2^-DYADIC_DEPTH`.
const DYADIC_DEPTH: i32 = 48;

/// Buffers reused across calls to [`AuctionEnvironment::allocate`] and rule evaluation.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub allocation: Vec<bool>,
    pub payments: Vec<f64>,
    /// Bidder indices by decreasing value (ties: lower index first).
    pub order: Vec<usize>,
}

impl Outcome {
    pub fn new(n: usize) -> Self {
        Self {
            allocation: vec![false; n],
            payments: vec![0.0; n],
            order: (0..n).collect(),
        }
    }

    pub fn revenue(&self) -> f64 {
        self.payments.iter().sum()
    }

    pub fn winners(&self) -> usize {
        self.allocation.iter().filter(|&&a| a).count()
    }
}

/// Tabulated interim payment `z(v)` for one bidder: cubic Hermite interpolation
/// through exact node values with exact slopes `z'(v) = v x'(v)`.
#[derive(Debug, Clone)]
pub struct PaymentTable {
    lo: f64,
    nodes: Vec<f64>,
    z: Vec<f64>,
    /// Per segment: (slope at left end, slope at right end).
    slopes: Vec<(f64, f64)>,
}

impl PaymentTable {
    pub fn eval(&self, v: f64) -> f64 {
        if v < self.lo {
            return 0.0;
        }
        let last = self.nodes.len() - 1;
        if v >= self.nodes[last] {
            return self.z[last];
        }
        let j = self
            .nodes
            .partition_point(|&x| x <= v)
            .saturating_sub(1)
            .min(last - 1);
        let (a, b) = (self.nodes[j], self.nodes[j + 1]);
        let h = b - a;
        let t = (v - a) / h;
        let (sa, sb) = self.slopes[j];
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.z[j] + h10 * h * sa + h01 * self.z[j + 1] + h11 * h * sb
    }

    /// `inf { v : z(v) >= y }` restricted to the table range.
    pub fn inverse(&self, y: f64) -> f64 {
        let last = self.nodes.len() - 1;
        if y <= self.z[0] {
            return self.nodes[0];
        }
        if y >= self.z[last] {
            return self.nodes[last];
        }
        let j = self.z.partition_point(|&z| z < y);
        let (mut a, mut b) = (self.nodes[j - 1], self.nodes[j]);
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if self.eval(m) >= y {
                b = m;
            } else {
                a = m;
            }
            if b - a <= f64::EPSILON * b.abs() {
                break;
            }
        }
        b
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node_values(&self) -> &[f64] {
        &self.z
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.z.windows(2).all(|w| w[1] > w[0])
    }
}

/// Per-bidder interim curves: `x` is evaluated exactly, `z` through a table
/// built eagerly at construction, `zbar = E[z(v)]`.
#[derive(Debug, Clone)]
pub struct InterimCurves {
    pub tables: Vec<Arc<PaymentTable>>,
    pub zbar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AuctionEnvironment {
    n: usize,
    k: usize,
    dists: Vec<ValueDistribution>,
    iid: bool,
    reserve: f64,
    curves: InterimCurves,
    quad: Quadrature,
    /// Tight-tolerance integrator for the reference Myerson integral and `zbar`.
    precise: Quadrature,
}

impl AuctionEnvironment {
    /// i.i.d. environment with `n` bidders and `k` items.
    pub fn iid(n: usize, k: usize, dist: ValueDistribution) -> Result<Self> {
        Self::build(n, k, vec![dist; n], 0.0)
    }

    /// Single-item environment with one distribution per bidder.
    pub fn asymmetric(dists: Vec<ValueDistribution>) -> Result<Self> {
        let n = dists.len();
        Self::build(n, 1, dists, 0.0)
    }

    /// Single-item environment whose allocation excludes values below `reserve`.
    pub fn with_reserve(dists: Vec<ValueDistribution>, reserve: f64) -> Result<Self> {
        let n = dists.len();
        Self::build(n, 1, dists, reserve)
    }

    pub fn from_spec(spec: &EnvSpec) -> Result<Self> {
        let dists = match spec.dists.len() {
            0 => {
                return Err(Error::InvalidEnvironment(
                    "at least one distribution required".into(),
                ))
            }
            1 => vec![ValueDistribution::from_spec(&spec.dists[0])?; spec.n],
            len if len == spec.n => spec
                .dists
                .iter()
                .map(ValueDistribution::from_spec)
                .collect::<Result<Vec<_>>>()?,
            len => {
                return Err(Error::InvalidEnvironment(format!(
                    "expected 1 or n = {} distributions, got {len}",
                    spec.n
                )))
            }
        };
        Self::build(spec.n, spec.k, dists, spec.reserve)
    }

    pub fn to_spec(&self) -> EnvSpec {
        let dists = if self.iid {
            vec![self.dists[0].to_spec()]
        } else {
            self.dists.iter().map(|d| d.to_spec()).collect()
        };
        EnvSpec {
            n: self.n,
            k: self.k,
            dists,
            reserve: self.reserve,
        }
    }

    fn build(n: usize, k: usize, dists: Vec<ValueDistribution>, reserve: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidEnvironment(format!(
                "need n >= 2 bidders, got {n}"
            )));
        }
        if k < 1 || k >= n {
            return Err(Error::InvalidEnvironment(format!(
                "need 1 <= k < n, got k = {k}, n = {n}"
            )));
        }
        if dists.len() != n {
            return Err(Error::InvalidEnvironment(format!(
                "expected {n} distributions, got {}",
                dists.len()
            )));
        }
        let iid = dists.windows(2).all(|w| w[0] == w[1]);
        if !iid && k > 1 {
            return Err(Error::InvalidEnvironment(
                "asymmetric distributions are only supported for single-item (k = 1) environments"
                    .into(),
            ));
        }
        if !(reserve.is_finite() && reserve >= 0.0) {
            return Err(Error::InvalidEnvironment(format!(
                "invalid reserve {reserve}"
            )));
        }
        if reserve > 0.0 && k > 1 {
            return Err(Error::InvalidEnvironment(
                "reserve prices are only supported for k = 1".into(),
            ));
        }
        if dists.iter().any(|d| reserve >= d.support_hi()) {
            return Err(Error::InvalidEnvironment(
                "reserve must lie below every support upper bound".into(),
            ));
        }
        let mut env = Self {
            n,
            k,
            dists,
            iid,
            reserve,
            curves: InterimCurves {
                tables: Vec::new(),
                zbar: Vec::new(),
            },
            quad: Quadrature::default(),
            precise: Quadrature::default().with_tol(1e-14).with_max_depth(50),
        };
        env.curves = env.build_curves();
        Ok(env)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_iid(&self) -> bool {
        self.iid
    }

    pub fn reserve(&self) -> f64 {
        self.reserve
    }

    pub fn dist(&self, i: usize) -> &ValueDistribution {
        &self.dists[i]
    }

    pub fn dists(&self) -> &[ValueDistribution] {
        &self.dists
    }

    pub fn curves(&self) -> &InterimCurves {
        &self.curves
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quad
    }

    /// Points where some bidder's interim curves or densities may kink.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self
            .dists
            .iter()
            .flat_map(|d| {
                let mut pts = d.breakpoints();
                pts.push(d.support_hi());
                pts
            })
            .collect();
        if self.reserve > 0.0 {
            b.push(self.reserve);
        }
        b.sort_by(f64::total_cmp);
        b.dedup();
        b
    }

    fn check_support(&self, i: usize, v: f64) -> Result<()> {
        let hi = self.dists[i].support_hi();
        if (0.0..=hi).contains(&v) {
            Ok(())
        } else {
            Err(Error::Domain { value: v, hi })
        }
    }

    /// Interim allocation probability of bidder `i` at value `v`.
    pub fn interim_allocation(&self, i: usize, v: f64) -> Result<f64> {
        self.check_support(i, v)?;
        Ok(self.x(i, v))
    }

    /// Unchecked interim allocation.
    pub fn x(&self, i: usize, v: f64) -> f64 {
        if v < self.reserve {
            return 0.0;
        }
        if self.k == 1 {
            (0..self.n)
                .filter(|&j| j != i)
                .map(|j| self.dists[j].cdf(v))
                .product()
        } else {
            let f = self.dists[i].cdf(v);
            let m = self.n - 1;
            (self.n - self.k..=m)
                .map(|j| binomial(m, j) * f.powi(j as i32) * (1.0 - f).powi((m - j) as i32))
                .sum()
        }
    }

    /// Derivative of the interim allocation above the reserve.
    pub fn x_prime(&self, i: usize, v: f64) -> f64 {
        if v < self.reserve {
            return 0.0;
        }
        if self.k == 1 {
            let mut total = 0.0;
            for j in (0..self.n).filter(|&j| j != i) {
                let fj = self.dists[j].pdf(v);
                if fj == 0.0 {
                    continue;
                }
                let rest: f64 = (0..self.n)
                    .filter(|&l| l != i && l != j)
                    .map(|l| self.dists[l].cdf(v))
                    .product();
                total += fj * rest;
            }
            total
        } else {
            let d = &self.dists[i];
            let f = d.cdf(v);
            let (n, k) = (self.n, self.k);
            (n - k) as f64
                * binomial(n - 1, k - 1)
                * f.powi((n - k - 1) as i32)
                * (1.0 - f).powi((k - 1) as i32)
                * d.pdf(v)
        }
    }

    /// Myerson integral `v x(v) - ∫_0^v x(u) du`, by direct quadrature.
    pub fn interim_payment(&self, i: usize, v: f64) -> Result<f64> {
        self.check_support(i, v)?;
        if v < self.reserve {
            return Ok(0.0);
        }
        let area = self.precise.integrate_with_breaks(
            |u| self.x(i, u),
            self.reserve,
            v,
            &self.breakpoints(),
        );
        Ok(v * self.x(i, v) - area)
    }

    /// Tabulated interim payment (fast path used by payment rules).
    #[inline]
    pub fn z(&self, i: usize, v: f64) -> f64 {
        self.curves.tables[i].eval(v)
    }

    pub fn payment_table(&self, i: usize) -> &PaymentTable {
        &self.curves.tables[i]
    }

    /// Ex-ante expected payment of bidder `i`.
    pub fn zbar(&self, i: usize) -> f64 {
        self.curves.zbar[i]
    }

    /// `R = sum_i E[z_i(v_i)]`.
    pub fn expected_revenue(&self) -> f64 {
        self.curves.zbar.iter().sum()
    }

    /// Probability `Q` that a bidder at `v` is exactly k-th highest, and the
    /// per-rival density factor `G`.
    pub fn order_stat_densities(&self, v: f64) -> Result<(f64, f64)> {
        if !self.iid || self.k < 2 {
            return Err(Error::Precondition(
                "order-statistic densities need an i.i.d. environment with k >= 2".into(),
            ));
        }
        self.check_support(0, v)?;
        let d = &self.dists[0];
        let f = d.cdf(v);
        let (n, k) = (self.n, self.k);
        let c = binomial(n - 1, k - 1);
        let q = c * (1.0 - f).powi((k - 1) as i32) * f.powi((n - k) as i32);
        let g = c * (1.0 - f).powi((k - 2) as i32) * f.powi((n - k) as i32) * d.pdf(v);
        Ok((q, g))
    }

    /// Checks `R < -(n - k) phi(0)` for i.i.d. regular environments with `2 <= k < n`.
    pub fn revenue_upper_bound_check(&self) -> Result<bool> {
        if !self.iid || self.k < 2 {
            return Err(Error::Precondition(
                "revenue bound needs an i.i.d. environment with 2 <= k < n".into(),
            ));
        }
        let phi0 = self.dists[0].virtual_value_limit(0.0);
        Ok(self.expected_revenue() < -((self.n - self.k) as f64) * phi0)
    }

    /// Efficient allocation: top `k` values at or above the reserve win,
    /// ties broken by lowest index. Fills `out.order` and `out.allocation`.
    pub fn allocate(&self, values: &[f64], out: &mut Outcome) {
        rank_descending(values, &mut out.order);
        out.allocation.iter_mut().for_each(|a| *a = false);
        for &i in out.order.iter().take(self.k) {
            if values[i] >= self.reserve {
                out.allocation[i] = true;
            }
        }
    }

    fn build_curves(&self) -> InterimCurves {
        let mut tables: Vec<Arc<PaymentTable>> = Vec::with_capacity(self.n);
        let mut zbar = Vec::with_capacity(self.n);
        for i in 0..self.n {
            if self.iid && i > 0 {
                tables.push(tables[0].clone());
                zbar.push(zbar[0]);
                continue;
            }
            tables.push(Arc::new(self.build_table(i)));
            zbar.push(self.compute_zbar(i));
        }
        InterimCurves { tables, zbar }
    }

    fn build_table(&self, i: usize) -> PaymentTable {
        let lo = self.reserve;
        let hi = self.dists[i].support_hi();
        let width = hi - lo;
        let mut nodes: Vec<f64> = (0..=TABLE_SEGMENTS)
            .map(|j| {
                let t = j as f64 / TABLE_SEGMENTS as f64;
                lo + width * t * t
            })
            .collect();
        let first = width / (TABLE_SEGMENTS * TABLE_SEGMENTS) as f64;
        let mut h = first;
        for _ in 0..DYADIC_DEPTH {
            h *= 0.5;
            if h < width * 2f64.powi(-DYADIC_DEPTH) {
                break;
            }
            nodes.push(lo + h);
        }
        nodes.extend(self.breakpoints().into_iter().filter(|&b| b > lo && b < hi));
        nodes.sort_by(f64::total_cmp);
        nodes.dedup();
        *nodes.last_mut().unwrap() = hi;

        // cumulative ∫ x over each segment
        let fine = Quadrature::new(16, 1e-15).with_max_depth(20);
        let mut area = 0.0;
        let mut z = Vec::with_capacity(nodes.len());
        z.push(lo * self.x(i, lo));
        for w in nodes.windows(2) {
            area += fine.integrate(|u| self.x(i, u), w[0], w[1]);
            z.push(w[1] * self.x(i, w[1]) - area);
        }
        let slopes = nodes
            .windows(2)
            .map(|w| {
                let eps = 1e-9 * (w[1] - w[0]);
                (
                    w[0] * self.x_prime(i, w[0] + eps),
                    w[1] * self.x_prime(i, w[1] - eps),
                )
            })
            .collect();
        PaymentTable {
            lo,
            nodes,
            z,
            slopes,
        }
    }

    /// `E[z(v)] = z(r)(1 - F(r)) + ∫_r^hi v x'(v) (1 - F(v)) dv`.
    fn compute_zbar(&self, i: usize) -> f64 {
        let d = &self.dists[i];
        let lo = self.reserve;
        let jump = lo * self.x(i, lo) * (1.0 - d.cdf(lo));
        let body = self.precise.integrate_with_breaks(
            |v| v * self.x_prime(i, v) * (1.0 - d.cdf(v)),
            lo,
            d.support_hi(),
            &self.breakpoints(),
        );
        jump + body
    }
}

/// Fills `order` with indices sorted by decreasing value, ties by index.
pub fn rank_descending(values: &[f64], order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..values.len());
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}
