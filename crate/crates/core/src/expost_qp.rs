//! Ex-post IR variance minimization for three i.i.d. bidders and two items.
//!
//! With payments depending only on the top two values, the program is
//!
//! ```text
//! min  E[(P1 + P2)^2]
//! s.t. E[P1 | top at v] P(top | v) + E[P2 | second at v] P(second | v) = z(v)
//!      0 <= P1(v1, v2) <= v1,  0 <= P2(v1, v2) <= v2
//! ```
//!
//! over the triangle `v1 >= v2`. Each triangle cell carries one node; each
//! value bin carries one RET row, integrated over the bin against `f`.

use std::sync::Arc;

use crate::distributions::{FamilyTag, ValueDistribution};
use crate::environment::{AuctionEnvironment, Outcome};
use crate::error::{Error, Result};
use crate::par::{pairwise_sum, Execution};
use crate::payment_rules::{wpb_bid, OrderStatRule, PaymentRule, RuleFlags};
use crate::quadrature::{GaussLegendre, Quadrature};

fn check_env(env: &AuctionEnvironment) -> Result<()> {
    if env.n() != 3 || env.k() != 2 || !env.is_iid() || env.reserve() > 0.0 {
        return Err(Error::Unsupported(
            "the ex-post program is formulated for 3 i.i.d. bidders and 2 items".into(),
        ));
    }
    Ok(())
}

/// Cells of `{0 <= v2 <= v1 <= hi}` on an `m x m` grid. Off-diagonal cells
/// are squares with the node at the centre; diagonal cells are half squares
/// with the node at the centroid.
#[derive(Debug, Clone)]
pub struct TriangularGrid {
    m: usize,
    hi: f64,
    /// Bin edges in value space.
    edges: Vec<f64>,
    nodes: Vec<(f64, f64)>,
    cells: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl TriangularGrid {
    /// Weights are the exact mass of each cell under the joint density
    /// `6 f(v1) f(v2) F(v2)` of the top two of three values.
    pub fn new(dist: &ValueDistribution, m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        let hi = dist.support_hi();
        let h = hi / m as f64;
        let edges: Vec<f64> = (0..=m)
            .map(|j| if j == m { hi } else { j as f64 * h })
            .collect();
        let cdf: Vec<f64> = edges.iter().map(|&e| dist.cdf(e)).collect();
        let len = m * (m + 1) / 2;
        let mut nodes = Vec::with_capacity(len);
        let mut cells = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        for a in 0..m {
            for b in 0..=a {
                let (fa0, fa1) = (cdf[a], cdf[a + 1]);
                let (fb0, fb1) = (cdf[b], cdf[b + 1]);
                if a > b {
                    nodes.push((edges[a] + 0.5 * h, edges[b] + 0.5 * h));
                    weights.push(3.0 * (fa1 - fa0) * (fb1 * fb1 - fb0 * fb0));
                } else {
                    nodes.push((edges[a] + 2.0 * h / 3.0, edges[b] + h / 3.0));
                    weights.push(fa1.powi(3) - fa0.powi(3) - 3.0 * fa0 * fa0 * (fa1 - fa0));
                }
                cells.push((a, b));
            }
        }
        Ok(Self {
            m,
            hi,
            edges,
            nodes,
            cells,
            weights,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    /// `(a, b)` bin indices of each node, `a >= b`.
    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn index(a: usize, b: usize) -> usize {
        a * (a + 1) / 2 + b
    }

    pub fn bin(&self, v: f64) -> usize {
        ((v / self.hi * self.m as f64) as usize).min(self.m - 1)
    }

    /// Node of the cell containing `(v1, v2)`, `v1 >= v2`.
    pub fn locate(&self, v1: f64, v2: f64) -> usize {
        let a = self.bin(v1);
        let b = self.bin(v2).min(a);
        Self::index(a, b)
    }
}

/// The discretized program.
#[derive(Debug, Clone)]
pub struct QPProblem {
    pub grid: TriangularGrid,
    /// `3 ∫_{bin r} z f dv` per RET row.
    pub rhs: Vec<f64>,
    /// Total node weight touching each row.
    pub row_weights: Vec<f64>,
    /// WPB node values, used as the starting point.
    pub start: (Vec<f64>, Vec<f64>),
}

impl QPProblem {
    pub fn variable_count(&self) -> usize {
        2 * self.grid.len()
    }

    pub fn constraint_rows(&self) -> usize {
        self.rhs.len()
    }

    /// `sum_nodes w (P1 + P2)^2`.
    pub fn objective(&self, p1: &[f64], p2: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .grid
            .weights
            .iter()
            .zip(p1.iter().zip(p2))
            .map(|(w, (a, b))| w * (a + b) * (a + b))
            .collect();
        pairwise_sum(&terms)
    }

    /// `A x - c` per row.
    pub fn ret_rows(&self, p1: &[f64], p2: &[f64]) -> Vec<f64> {
        let mut lhs = vec![0.0; self.rhs.len()];
        for (j, &(a, b)) in self.grid.cells.iter().enumerate() {
            let w = self.grid.weights[j];
            lhs[a] += w * p1[j];
            lhs[b] += w * p2[j];
        }
        lhs.iter().zip(&self.rhs).map(|(l, r)| l - r).collect()
    }

    /// `max_r |A_r x - c_r| / W_r`: the RET violation as an average payment.
    pub fn ret_residual(&self, p1: &[f64], p2: &[f64]) -> f64 {
        self.ret_rows(p1, p2)
            .iter()
            .zip(&self.row_weights)
            .map(|(g, w)| if *w > 0.0 { g.abs() / w } else { g.abs() })
            .fold(0.0, f64::max)
    }

    pub fn upper_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        self.grid.nodes.iter().map(|&(v1, v2)| (v1, v2)).unzip()
    }
}

/// Assembles the program for the given environment at resolution `m`.
pub fn build_qp(env: &AuctionEnvironment, m: usize) -> Result<QPProblem> {
    check_env(env)?;
    if m < 10 {
        return Err(Error::Config(format!(
            "QP resolution must be at least 10, got {m}"
        )));
    }
    let dist = env.dist(0);
    let grid = TriangularGrid::new(dist, m)?;
    let quad = Quadrature::default().with_tol(1e-14);
    let rhs: Vec<f64> = (0..m)
        .map(|r| {
            3.0 * quad.integrate(
                |v| env.z(0, v) * dist.pdf(v),
                grid.edges[r],
                grid.edges[r + 1],
            )
        })
        .collect();
    let mut row_weights = vec![0.0; m];
    for (j, &(a, b)) in grid.cells.iter().enumerate() {
        row_weights[a] += grid.weights[j];
        row_weights[b] += grid.weights[j];
    }
    let start = grid
        .nodes
        .iter()
        .map(|&(v1, v2)| (wpb_bid(env, 0, v1), wpb_bid(env, 0, v2)))
        .unzip();
    Ok(QPProblem {
        grid,
        rhs,
        row_weights,
        start,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Augmented-Lagrangian penalty on the normalized rows.
    pub rho: f64,
    pub execution: Execution,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
            rho: 4.0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QPSolution {
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub objective_value: f64,
    pub kkt_residual: f64,
    pub ret_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Augmented Lagrangian outer loop with FISTA on the box for the inner
/// problems. Gradients use the metric `diag(w)`, in which the normalized
/// rows are orthonormal and the objective Hessian has norm 4.
pub fn solve_qp(problem: &QPProblem, opts: QpOptions) -> QPSolution {
    let grid = &problem.grid;
    let len = grid.len();
    let rows = problem.rhs.len();
    let (ub1, ub2) = problem.upper_bounds();
    let inv_sqrt_w: Vec<f64> = problem
        .row_weights
        .iter()
        .map(|w| if *w > 0.0 { 1.0 / w.sqrt() } else { 0.0 })
        .collect();
    let lipschitz = 4.0 + opts.rho;
    let step = 1.0 / lipschitz;

    let clip = |x: &mut [f64], ub: &[f64]| {
        x.iter_mut()
            .zip(ub)
            .for_each(|(v, u)| *v = v.clamp(0.0, *u));
    };
    let scaled_rows = |p1: &[f64], p2: &[f64]| -> Vec<f64> {
        problem
            .ret_rows(p1, p2)
            .iter()
            .zip(&inv_sqrt_w)
            .map(|(g, s)| g * s)
            .collect()
    };
    // metric gradient of the Lagrangian with multipliers `mult` (per row,
    // already including the penalty term)
    let gradient = |p1: &[f64], p2: &[f64], mult: &[f64], g1: &mut [f64], g2: &mut [f64]| {
        for j in 0..len {
            let (a, b) = grid.cells[j];
            let s = 2.0 * (p1[j] + p2[j]);
            g1[j] = s + mult[a] * inv_sqrt_w[a];
            g2[j] = s + mult[b] * inv_sqrt_w[b];
        }
    };
    let kkt = |p1: &[f64], p2: &[f64], lambda: &[f64]| -> f64 {
        let mut g1 = vec![0.0; len];
        let mut g2 = vec![0.0; len];
        gradient(p1, p2, lambda, &mut g1, &mut g2);
        let mut stat: f64 = 0.0;
        for j in 0..len {
            let q1 = (p1[j] - g1[j]).clamp(0.0, ub1[j]);
            let q2 = (p2[j] - g2[j]).clamp(0.0, ub2[j]);
            stat = stat.max((p1[j] - q1).abs()).max((p2[j] - q2).abs());
        }
        stat.max(problem.ret_residual(p1, p2))
    };

    let (mut p1, mut p2) = problem.start.clone();
    clip(&mut p1, &ub1);
    clip(&mut p2, &ub2);
    let mut lambda = vec![0.0; rows];
    let mut iterations = 0;
    let mut converged = false;
    let mut g1 = vec![0.0; len];
    let mut g2 = vec![0.0; len];
    let mut inner_tol = 1e-3_f64.max(opts.tol);

    while iterations < opts.max_iter {
        // FISTA on the augmented Lagrangian
        let (mut y1, mut y2) = (p1.clone(), p2.clone());
        let mut t = 1.0_f64;
        loop {
            iterations += 1;
            let g = scaled_rows(&y1, &y2);
            let mult: Vec<f64> = lambda
                .iter()
                .zip(&g)
                .map(|(l, gi)| l + opts.rho * gi)
                .collect();
            gradient(&y1, &y2, &mult, &mut g1, &mut g2);
            let mut n1: Vec<f64> = y1.iter().zip(&g1).map(|(y, g)| y - step * g).collect();
            let mut n2: Vec<f64> = y2.iter().zip(&g2).map(|(y, g)| y - step * g).collect();
            clip(&mut n1, &ub1);
            clip(&mut n2, &ub2);
            let moved = n1
                .iter()
                .zip(&p1)
                .chain(n2.iter().zip(&p2))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for j in 0..len {
                y1[j] = n1[j] + beta * (n1[j] - p1[j]);
                y2[j] = n2[j] + beta * (n2[j] - p2[j]);
            }
            p1 = n1;
            p2 = n2;
            t = t_next;
            // gradient-mapping norm, in payment units
            if moved * lipschitz < inner_tol || iterations >= opts.max_iter {
                break;
            }
        }
        let g = scaled_rows(&p1, &p2);
        for (l, gi) in lambda.iter_mut().zip(&g) {
            *l += opts.rho * gi;
        }
        if kkt(&p1, &p2, &lambda) < opts.tol {
            converged = true;
            break;
        }
        inner_tol = (inner_tol * 0.3).max(0.1 * opts.tol);
    }
    let kkt_residual = kkt(&p1, &p2, &lambda);
    QPSolution {
        objective_value: problem.objective(&p1, &p2),
        ret_residual: problem.ret_residual(&p1, &p2),
        kkt_residual,
        iterations,
        converged,
        p1,
        p2,
    }
}

/// The hand-built rule: the top bidder pays `b1` of her value, the second
/// `b2` of hers.
pub struct CustomB1B2 {
    env: Arc<AuctionEnvironment>,
}

pub const CUSTOM_BREAK: f64 = 0.6;

pub fn custom_b1b2_rule(env: &Arc<AuctionEnvironment>) -> Result<CustomB1B2> {
    check_env(env)?;
    let d = env.dist(0);
    if d.family_tag() != FamilyTag::Uniform || d.support_hi() != 1.0 {
        return Err(Error::Unsupported(
            "custom_b1b2 is defined for uniform values on [0, 1]".into(),
        ));
    }
    Ok(CustomB1B2 { env: env.clone() })
}

impl CustomB1B2 {
    pub fn b1(&self, v: f64) -> f64 {
        if v <= CUSTOM_BREAK {
            v
        } else {
            self.env.z(0, v) / (v * v)
        }
    }

    pub fn b2(&self, v: f64) -> f64 {
        if v <= 0.0 || v > CUSTOM_BREAK {
            0.0
        } else {
            (self.env.z(0, v) - v.powi(3)) / (2.0 * v * (1.0 - v))
        }
    }
}

impl OrderStatRule for CustomB1B2 {
    fn p1(&self, v1: f64, _v2: f64) -> f64 {
        self.b1(v1)
    }
    fn p2(&self, _v1: f64, v2: f64) -> f64 {
        self.b2(v2)
    }
}

impl PaymentRule for CustomB1B2 {
    fn name(&self) -> &str {
        "custom_b1b2"
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
        let (top, second) = (out.order[0], out.order[1]);
        out.payments[top] = self.b1(values[top]);
        out.payments[second] = self.b2(values[second]);
    }
    fn breakpoints(&self) -> Vec<f64> {
        vec![CUSTOM_BREAK]
    }
    fn order_stat_form(&self) -> Option<&dyn OrderStatRule> {
        Some(self)
    }
}

fn apply_order_stat<R: OrderStatRule + ?Sized>(
    rule: &R,
    env: &AuctionEnvironment,
    values: &[f64],
    out: &mut Outcome,
) {
    env.allocate(values, out);
    out.payments.iter_mut().for_each(|p| *p = 0.0);
    let (top, second) = (out.order[0], out.order[1]);
    let (v1, v2) = (values[top], values[second]);
    out.payments[top] = rule.p1(v1, v2);
    out.payments[second] = rule.p2(v1, v2);
}

/// A rule replaced by its conditional expectation given the top two values,
/// averaging over the lowest value and over bidder identities.
pub struct ProjectedRule {
    env: Arc<AuctionEnvironment>,
    inner: Arc<dyn PaymentRule>,
    breaks: Vec<f64>,
    gl: GaussLegendre,
    node_p1: Vec<f64>,
    node_p2: Vec<f64>,
}

const ASSIGNMENTS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

impl ProjectedRule {
    /// `(E[P_top | v1, v2], E[P_second | v1, v2])`.
    pub fn conditional(&self, v1: f64, v2: f64) -> (f64, f64) {
        let dist = self.env.dist(0);
        let mass = dist.cdf(v2);
        let mut out = Outcome::new(3);
        let mut values = [0.0; 3];
        let mut eval = |v3: f64, acc: &mut (f64, f64), w: f64| {
            for roles in ASSIGNMENTS {
                values[roles[0]] = v1;
                values[roles[1]] = v2;
                values[roles[2]] = v3;
                self.inner.apply_into(&values, &mut out);
                acc.0 += w * out.payments[roles[0]];
                acc.1 += w * out.payments[roles[1]];
            }
        };
        let mut acc = (0.0, 0.0);
        if mass <= 0.0 {
            eval(0.0, &mut acc, 1.0);
        } else {
            let mut cuts = vec![0.0];
            cuts.extend(self.breaks.iter().copied().filter(|&b| b > 0.0 && b < v2));
            cuts.push(v2);
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let half = 0.5 * (b - a);
                let mid = 0.5 * (a + b);
                for (x, gw) in self.gl.nodes().iter().zip(self.gl.weights()) {
                    let v3 = mid + half * x;
                    eval(v3, &mut acc, gw * half * dist.pdf(v3) / mass);
                }
            }
        }
        (acc.0 / 6.0, acc.1 / 6.0)
    }

    pub fn node_values(&self) -> (&[f64], &[f64]) {
        (&self.node_p1, &self.node_p2)
    }
}

impl OrderStatRule for ProjectedRule {
    fn p1(&self, v1: f64, v2: f64) -> f64 {
        self.conditional(v1, v2).0
    }
    fn p2(&self, v1: f64, v2: f64) -> f64 {
        self.conditional(v1, v2).1
    }
}

impl PaymentRule for ProjectedRule {
    fn name(&self) -> &str {
        "projected"
    }
    fn flags(&self) -> RuleFlags {
        self.inner.flags()
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        self.env.allocate(values, out);
        out.payments.iter_mut().for_each(|p| *p = 0.0);
        let (top, second) = (out.order[0], out.order[1]);
        let (p1, p2) = self.conditional(values[top], values[second]);
        out.payments[top] = p1;
        out.payments[second] = p2;
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.breaks.clone()
    }
    fn order_stat_form(&self) -> Option<&dyn OrderStatRule> {
        Some(self)
    }
}

/// Projects `rule` onto rules that depend only on the top two values.
/// Interim expected payments are unchanged; the conditional expectation over
/// the lowest value uses 16-point Gauss-Legendre per smooth piece.
pub fn project_to_order_stats(
    env: &Arc<AuctionEnvironment>,
    rule: Arc<dyn PaymentRule>,
    grid: &TriangularGrid,
) -> Result<ProjectedRule> {
    check_env(env)?;
    let mut breaks = rule.breakpoints();
    breaks.extend(env.breakpoints());
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut projected = ProjectedRule {
        env: env.clone(),
        inner: rule,
        breaks,
        gl: GaussLegendre::new(16),
        node_p1: Vec::new(),
        node_p2: Vec::new(),
    };
    let vals =
        Execution::Parallel.map_slice(grid.nodes(), |&(v1, v2)| projected.conditional(v1, v2));
    (projected.node_p1, projected.node_p2) = vals.into_iter().unzip();
    Ok(projected)
}

/// The QP solution as a rule.
///
/// Node values are held constant on each cell and capped at the own value.
/// The remaining RET deficit `d(v)` of that piecewise-constant rule is then
/// removed exactly by moving each winner's payment toward her value (when
/// `d > 0`) or toward zero (when `d < 0`) by a factor depending only on her
/// own value. Both moves stay within `[0, v]`, and the available room,
/// `v x(v) - z(v) + d` upward or `z(v) - d` downward, always exceeds `|d|`.
pub struct QpRule {
    env: Arc<AuctionEnvironment>,
    grid: TriangularGrid,
    solution: QPSolution,
    edge_cdf: Vec<f64>,
}

pub fn qp_rule(
    env: &Arc<AuctionEnvironment>,
    problem: &QPProblem,
    solution: QPSolution,
) -> Result<QpRule> {
    check_env(env)?;
    if solution.p1.len() != problem.grid.len() {
        return Err(Error::Precondition(
            "solution does not match the grid".into(),
        ));
    }
    let dist = env.dist(0);
    let edge_cdf = problem.grid.edges.iter().map(|&e| dist.cdf(e)).collect();
    Ok(QpRule {
        env: env.clone(),
        grid: problem.grid.clone(),
        solution,
        edge_cdf,
    })
}

impl QpRule {
    pub fn solution(&self) -> &QPSolution {
        &self.solution
    }

    pub fn grid(&self) -> &TriangularGrid {
        &self.grid
    }

    fn base1(&self, v1: f64, v2: f64) -> f64 {
        self.solution.p1[self.grid.locate(v1, v2)].min(v1)
    }

    fn base2(&self, v1: f64, v2: f64) -> f64 {
        self.solution.p2[self.grid.locate(v1, v2)].min(v2)
    }

    /// Interim payment of the capped piecewise-constant rule at `v`.
    pub fn base_interim_payment(&self, v: f64) -> f64 {
        let dist = self.env.dist(0);
        let fv = dist.cdf(v);
        if fv <= 0.0 {
            return 0.0;
        }
        let bin = self.grid.bin(v);
        let cdf = &self.edge_cdf;
        let mut total = 0.0;
        // as the top bidder: the second value u ranges over [0, v]
        for b in 0..=bin {
            let hi = if b == bin { fv } else { cdf[b + 1] };
            let mass = hi * hi - cdf[b] * cdf[b];
            if mass > 0.0 {
                total += self.solution.p1[TriangularGrid::index(bin, b)].min(v) * mass;
            }
        }
        // as the second bidder: the top value u ranges over [v, hi]
        for a in bin..self.grid.m {
            let lo = if a == bin { fv } else { cdf[a] };
            let mass = 2.0 * fv * (cdf[a + 1] - lo);
            if mass > 0.0 {
                total += self.solution.p2[TriangularGrid::index(a, bin)].min(v) * mass;
            }
        }
        total
    }

    /// Signed correction factor at own value `v`: positive moves toward `v`,
    /// negative toward 0.
    pub fn correction(&self, v: f64) -> f64 {
        let fv = self.env.dist(0).cdf(v);
        if fv <= 0.0 {
            return 0.0;
        }
        let base = self.base_interim_payment(v);
        let deficit = self.env.z(0, v) - base;
        if deficit > 0.0 {
            let x = fv * fv + 2.0 * fv * (1.0 - fv);
            let room = v * x - base;
            if room > 0.0 {
                (deficit / room).min(1.0)
            } else {
                0.0
            }
        } else if base > 0.0 {
            (deficit / base).max(-1.0)
        } else {
            0.0
        }
    }

    fn adjust(&self, base: f64, own: f64) -> f64 {
        let c = self.correction(own);
        if c >= 0.0 {
            base + c * (own - base)
        } else {
            base * (1.0 + c)
        }
    }
}

impl OrderStatRule for QpRule {
    fn p1(&self, v1: f64, v2: f64) -> f64 {
        self.adjust(self.base1(v1, v2), v1)
    }
    fn p2(&self, v1: f64, v2: f64) -> f64 {
        self.adjust(self.base2(v1, v2), v2)
    }
}

impl PaymentRule for QpRule {
    fn name(&self) -> &str {
        "qp_rule"
    }
    fn flags(&self) -> RuleFlags {
        RuleFlags::WINNER_PAYS
    }
    fn env(&self) -> &AuctionEnvironment {
        &self.env
    }
    fn apply_into(&self, values: &[f64], out: &mut Outcome) {
        apply_order_stat(self, &self.env, values, out);
    }
    fn breakpoints(&self) -> Vec<f64> {
        self.grid.edges.clone()
    }
    fn order_stat_form(&self) -> Option<&dyn OrderStatRule> {
        Some(self)
    }
}

/// `E[(P1 + P2)^2]` for an order-statistic rule, by 2-d quadrature over the
/// triangle against `6 f(v1) f(v2) F(v2)`.
pub fn order_stat_second_moment<R: OrderStatRule + Sync + ?Sized>(
    env: &AuctionEnvironment,
    rule: &R,
    breaks: &[f64],
    quad: &Quadrature,
) -> f64 {
    let dist = env.dist(0);
    let hi = dist.support_hi();
    let mut cuts = breaks.to_vec();
    cuts.extend(env.breakpoints());
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    quad.integrate_with_breaks(
        |v1| {
            let f1 = dist.pdf(v1);
            if f1 == 0.0 {
                return 0.0;
            }
            let inner = quad.integrate_with_breaks(
                |v2| {
                    let s = rule.p1(v1, v2) + rule.p2(v1, v2);
                    6.0 * f1 * dist.pdf(v2) * dist.cdf(v2) * s * s
                },
                0.0,
                v1,
                &cuts,
            );
            inner
        },
        0.0,
        hi,
        &cuts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payment_rules::{make_rule, verify_ret, RuleKind};

    fn u32_env() -> Arc<AuctionEnvironment> {
        Arc::new(AuctionEnvironment::iid(3, 2, ValueDistribution::uniform(1.0).unwrap()).unwrap())
    }

    #[test]
    fn grid_shape_and_weights() {
        let env = u32_env();
        let p = build_qp(&env, 10).unwrap();
        assert_eq!(p.variable_count(), 110);
        assert_eq!(p.constraint_rows(), 10);
        let total: f64 = p.grid.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(p.grid.weights().iter().all(|&w| w >= 0.0));
        assert!(p.grid.nodes().iter().all(|&(a, b)| a > b));
        let power = ValueDistribution::power(2.0, 1.0).unwrap();
        let g = TriangularGrid::new(&power, 17).unwrap();
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(build_qp(&env, 9).is_err());
        assert_eq!(g.locate(0.99, 0.99), TriangularGrid::index(16, 16));
    }

    #[test]
    fn wpb_rows_shrink_with_resolution() {
        let env = u32_env();
        let r: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|&m| {
                let p = build_qp(&env, m).unwrap();
                p.ret_residual(&p.start.0, &p.start.1)
            })
            .collect();
        assert!(r[1] < 0.6 * r[0] && r[2] < 0.6 * r[1], "{r:?}");
    }

    #[test]
    fn custom_rule_shape() {
        let env = u32_env();
        let c = custom_b1b2_rule(&env).unwrap();
        let z = env.z(0, 0.6);
        assert!((z - 0.216).abs() < 1e-12);
        assert!(((z - 0.216) / (2.0 * 0.6 * 0.4)).abs() < 1e-12);
        assert!(c.b2(0.6).abs() < 1e-12);
        for j in 1..100 {
            let v = j as f64 / 100.0;
            assert!(c.b1(v) <= v + 1e-12 && c.b2(v) <= v + 1e-12 && c.b2(v) >= -1e-12);
        }
        let out = c.apply(&[0.9, 0.3, 0.5]);
        assert_eq!(out.allocation, vec![true, false, true]);
        assert_eq!(out.payments[1], 0.0);
        assert!(verify_ret(&env, &c, 11, 0, 0) < 1e-8);
        let other = Arc::new(
            AuctionEnvironment::iid(3, 2, ValueDistribution::power(2.0, 1.0).unwrap()).unwrap(),
        );
        assert!(custom_b1b2_rule(&other).is_err());
    }

    #[test]
    fn small_qp_improves_on_start() {
        let env = u32_env();
        let p = build_qp(&env, 20).unwrap();
        let s = solve_qp(&p, QpOptions::default());
        assert!(s.converged);
        assert!(s.kkt_residual <= 1e-7);
        assert!(s.objective_value < p.objective(&p.start.0, &p.start.1));
        let (u1, u2) = p.upper_bounds();
        for j in 0..p.grid.len() {
            assert!(s.p1[j] >= 0.0 && s.p1[j] <= u1[j]);
            assert!(s.p2[j] >= 0.0 && s.p2[j] <= u2[j]);
        }
        let rule = qp_rule(&env, &p, s).unwrap();
        assert!(verify_ret(&env, &rule, 21, 0, 0) < 1e-9);
        for j in 0..=40 {
            for l in 0..=j {
                let (v1, v2) = (j as f64 / 40.0, l as f64 / 40.0);
                let (a, b) = (rule.p1(v1, v2), rule.p2(v1, v2));
                assert!((0.0..=v1).contains(&a) && (0.0..=v2).contains(&b));
            }
        }
    }

    #[test]
    fn projection_of_uniform_price() {
        let env = u32_env();
        let grid = TriangularGrid::new(env.dist(0), 10).unwrap();
        let up = make_rule(&env, RuleKind::UniformKPlus1).unwrap();
        let proj = project_to_order_stats(&env, up, &grid).unwrap();
        for (&(_, v2), (&a, &b)) in grid
            .nodes()
            .iter()
            .zip(proj.node_p1.iter().zip(&proj.node_p2))
        {
            assert!((a - v2 / 2.0).abs() < 1e-12 && (b - v2 / 2.0).abs() < 1e-12);
        }
        // idempotent on top-two rules
        let custom: Arc<dyn PaymentRule> = Arc::new(custom_b1b2_rule(&env).unwrap());
        let again = project_to_order_stats(&env, custom.clone(), &grid).unwrap();
        for (j, &(v1, v2)) in grid.nodes().iter().enumerate() {
            let c = custom_b1b2_rule(&env).unwrap();
            assert!((again.node_p1[j] - c.b1(v1)).abs() < 1e-12);
            assert!((again.node_p2[j] - c.b2(v2)).abs() < 1e-12);
        }
    }
}
