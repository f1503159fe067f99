//! Composite Gauss–Legendre quadrature with adaptive panel bisection.
//!
//! Every integral in the crate goes through [`Quadrature`]. A panel is
//! accepted when the one-panel estimate and the two-half-panel estimate agree
//! to `tol * max(1, |I|)`; otherwise both halves are refined independently.
//! Nodes never touch the panel endpoints, so integrable endpoint singularities
//! (power densities with `alpha < 1`) are handled without special cases.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Builds an `order`-point rule by Newton iteration on `P_order`.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let mut nodes = vec![0.0; order];
        let mut weights = vec![0.0; order];
        let m = order.div_ceil(2);
        let nf = order as f64;
        for i in 0..m {
            let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(order, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(order, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[order - 1 - i] = x;
            weights[i] = w;
            weights[order - 1 - i] = w;
        }
        if order % 2 == 1 {
            nodes[m - 1] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Single-panel estimate of `∫_a^b f`.
    pub fn apply<F: FnMut(f64) -> f64>(&self, f: &mut F, a: f64, b: f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Single-panel estimate for a vector-valued integrand, written into `out`.
    pub fn apply_vec<F: FnMut(f64, &mut [f64])>(
        &self,
        f: &mut F,
        a: f64,
        b: f64,
        scratch: &mut [f64],
        out: &mut [f64],
    ) {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            f(mid + half * x, scratch);
            for (o, s) in out.iter_mut().zip(scratch.iter()) {
                *o += w * s;
            }
        }
        out.iter_mut().for_each(|o| *o *= half);
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

pub const DEFAULT_ORDER: usize = 64;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_DEPTH: u32 = 40;

fn default_rule() -> Arc<GaussLegendre> {
    static RULE: OnceLock<Arc<GaussLegendre>> = OnceLock::new();
    RULE.get_or_init(|| Arc::new(GaussLegendre::new(DEFAULT_ORDER)))
        .clone()
}

/// Adaptive composite Gauss–Legendre integrator.
#[derive(Debug, Clone)]
pub struct Quadrature {
    rule: Arc<GaussLegendre>,
    tol: f64,
    max_depth: u32,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            rule: default_rule(),
            tol: DEFAULT_TOL,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl Quadrature {
    pub fn new(order: usize, tol: f64) -> Self {
        let rule = if order == DEFAULT_ORDER {
            default_rule()
        } else {
            Arc::new(GaussLegendre::new(order))
        };
        Self {
            rule,
            tol,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_depth(mut self, depth: u32) -> Self {
        self.max_depth = depth;
        self
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn rule(&self) -> &GaussLegendre {
        &self.rule
    }

    /// `∫_a^b f`. Returns 0 for empty or reversed intervals.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, a: f64, b: f64) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        let mut total = 0.0;
        let whole = self.rule.apply(&mut f, a, b);
        let mut stack = vec![(a, b, whole, 0u32)];
        while let Some((lo, hi, whole, depth)) = stack.pop() {
            let mid = 0.5 * (lo + hi);
            let left = self.rule.apply(&mut f, lo, mid);
            let right = self.rule.apply(&mut f, mid, hi);
            let halves = left + right;
            let err = (halves - whole).abs();
            if err <= self.tol * halves.abs().max(1.0)
                || depth >= self.max_depth
                || mid <= lo
                || mid >= hi
            {
                total += halves;
            } else {
                stack.push((lo, mid, left, depth + 1));
                stack.push((mid, hi, right, depth + 1));
            }
        }
        total
    }

    /// `∫_a^b f` split at the interior `breaks` (unsorted input is fine).
    pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
        &self,
        mut f: F,
        a: f64,
        b: f64,
        breaks: &[f64],
    ) -> f64 {
        let pts = split_points(a, b, breaks);
        pts.windows(2)
            .map(|w| self.integrate(&mut f, w[0], w[1]))
            .sum()
    }

    /// Vector-valued `∫_a^b f`, where `f(x, out)` writes `dim` components.
    pub fn integrate_vec<F: FnMut(f64, &mut [f64])>(
        &self,
        mut f: F,
        a: f64,
        b: f64,
        dim: usize,
    ) -> Vec<f64> {
        let mut total = vec![0.0; dim];
        if !(b > a) {
            return total;
        }
        let mut scratch = vec![0.0; dim];
        let mut whole = vec![0.0; dim];
        self.rule.apply_vec(&mut f, a, b, &mut scratch, &mut whole);
        let mut stack = vec![(a, b, whole, 0u32)];
        let mut left = vec![0.0; dim];
        let mut right = vec![0.0; dim];
        while let Some((lo, hi, whole, depth)) = stack.pop() {
            let mid = 0.5 * (lo + hi);
            self.rule
                .apply_vec(&mut f, lo, mid, &mut scratch, &mut left);
            self.rule
                .apply_vec(&mut f, mid, hi, &mut scratch, &mut right);
            let converged = (0..dim).all(|c| {
                let halves = left[c] + right[c];
                (halves - whole[c]).abs() <= self.tol * halves.abs().max(1.0)
            });
            if converged || depth >= self.max_depth || mid <= lo || mid >= hi {
                for c in 0..dim {
                    total[c] += left[c] + right[c];
                }
            } else {
                stack.push((lo, mid, left.clone(), depth + 1));
                stack.push((mid, hi, right.clone(), depth + 1));
            }
        }
        total
    }

    /// Vector-valued integral split at interior `breaks`.
    pub fn integrate_vec_with_breaks<F: FnMut(f64, &mut [f64])>(
        &self,
        mut f: F,
        a: f64,
        b: f64,
        breaks: &[f64],
        dim: usize,
    ) -> Vec<f64> {
        let pts = split_points(a, b, breaks);
        let mut total = vec![0.0; dim];
        for w in pts.windows(2) {
            let part = self.integrate_vec(&mut f, w[0], w[1], dim);
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        total
    }
}

/// `[a, breaks ∩ (a, b)..., b]`, sorted and deduplicated.
pub fn split_points(a: f64, b: f64, breaks: &[f64]) -> Vec<f64> {
    let mut pts = Vec::with_capacity(breaks.len() + 2);
    pts.push(a);
    pts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    pts.sort_by(|x, y| x.total_cmp(y));
    pts.dedup();
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for order in [1, 2, 5, 16, 64] {
            let gl = GaussLegendre::new(order);
            let s: f64 = gl.weights().iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "order {order}: {s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let gl = GaussLegendre::new(8);
        // ∫_0^1 x^15 = 1/16
        let v = gl.apply(&mut |x: f64| x.powi(15), 0.0, 1.0);
        assert!((v - 1.0 / 16.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_handles_jump_and_sqrt_singularity() {
        let q = Quadrature::default();
        let v = q.integrate(|x| if x < 0.3 { 1.0 } else { 2.0 }, 0.0, 1.0);
        assert!((v - 1.7).abs() < 1e-8, "{v}");
        let s = q.integrate(|x| 1.0 / x.sqrt(), 0.0, 1.0);
        assert!((s - 2.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn breaks_make_jumps_exact() {
        let q = Quadrature::default();
        let v = q.integrate_with_breaks(|x| if x < 0.3 { 1.0 } else { 2.0 }, 0.0, 1.0, &[0.3]);
        assert!((v - 1.7).abs() < 1e-14);
    }

    #[test]
    fn vector_integrand_matches_scalar() {
        let q = Quadrature::default();
        let v = q.integrate_vec(
            |x, out| {
                out[0] = x;
                out[1] = x.exp();
            },
            0.0,
            2.0,
            2,
        );
        assert!((v[0] - 2.0).abs() < 1e-13);
        assert!((v[1] - (2f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn empty_interval_is_zero() {
        let q = Quadrature::default();
        assert_eq!(q.integrate(|_| 1.0, 1.0, 1.0), 0.0);
        assert_eq!(q.integrate(|_| 1.0, 2.0, 1.0), 0.0);
    }
}
