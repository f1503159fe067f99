//! Expectations over value profiles: nested adaptive quadrature for small `n`
//! and block-seeded Monte Carlo for everything else.
//!
//! Quadrature splits the profile space into ordering regions
//! (`v_σ(0) >= v_σ(1) >= ...`) so allocation discontinuities sit on region
//! boundaries, and splits every coordinate at the supplied breakpoints.
//!
//! Monte Carlo draws profiles in fixed-size blocks; block `b` uses a ChaCha8
//! stream `b` keyed by the seed. Two computations with the same seed see the
//! same profiles (common random numbers), and results do not depend on how
//! blocks are distributed over threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::environment::AuctionEnvironment;
use crate::par::Execution;
use crate::quadrature::Quadrature;

/// Profiles per Monte Carlo block.
pub const BLOCK_SIZE: usize = 8192;

/// Largest number of free coordinates integrated by quadrature.
pub const MAX_QUADRATURE_DIM: usize = 3;

/// Nested quadrature over the free coordinates of a value profile.
pub struct ProfileQuadrature<'a> {
    env: &'a AuctionEnvironment,
    quad: Quadrature,
    breaks: Vec<f64>,
    exec: Execution,
}

impl<'a> ProfileQuadrature<'a> {
    pub fn new(env: &'a AuctionEnvironment, quad: Quadrature) -> Self {
        Self {
            env,
            quad,
            breaks: env.breakpoints(),
            exec: Execution::Parallel,
        }
    }

    /// Adds coordinate breakpoints (kinks or jumps of the integrand).
    pub fn with_breaks(mut self, extra: &[f64]) -> Self {
        self.breaks.extend_from_slice(extra);
        self.breaks.sort_by(f64::total_cmp);
        self.breaks.dedup();
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// `E[f(v)]` with bidder `fixed.0` pinned at value `fixed.1` (conditional
    /// expectation) or unconditional when `fixed` is `None`. `f` writes `dim`
    /// components.
    pub fn expect<F>(&self, fixed: Option<(usize, f64)>, dim: usize, f: F) -> Vec<f64>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        let n = self.env.n();
        let free: Vec<usize> = (0..n).filter(|&i| Some(i) != fixed.map(|p| p.0)).collect();
        assert!(
            free.len() <= MAX_QUADRATURE_DIM,
            "quadrature over {} coordinates is not supported",
            free.len()
        );
        let mut breaks = self.breaks.clone();
        if let Some((_, v)) = fixed {
            breaks.push(v);
        }
        let perms = permutations(&free);
        let parts = self.exec.map_slice(&perms, |perm| {
            let mut values = vec![0.0; n];
            if let Some((i, v)) = fixed {
                values[i] = v;
            }
            self.nested(perm, 0, f64::INFINITY, &mut values, &breaks, dim, &f)
        });
        let mut total = vec![0.0; dim];
        for p in parts {
            for (t, x) in total.iter_mut().zip(p) {
                *t += x;
            }
        }
        total
    }

    #[allow(clippy::too_many_arguments)]
    fn nested<F>(
        &self,
        perm: &[usize],
        level: usize,
        upper: f64,
        values: &mut [f64],
        breaks: &[f64],
        dim: usize,
        f: &F,
    ) -> Vec<f64>
    where
        F: Fn(&[f64], &mut [f64]),
    {
        if perm.is_empty() {
            let mut out = vec![0.0; dim];
            f(values, &mut out);
            return out;
        }
        let j = perm[level];
        let dist = self.env.dist(j);
        let hi = dist.support_hi().min(upper);
        let last = level + 1 == perm.len();
        self.quad.integrate_vec_with_breaks(
            |x, out| {
                values[j] = x;
                let w = dist.pdf(x);
                if w == 0.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    return;
                }
                if last {
                    f(values, out);
                } else {
                    let inner = self.nested(perm, level + 1, x, values, breaks, dim, f);
                    out.copy_from_slice(&inner);
                }
                out.iter_mut().for_each(|o| *o *= w);
            },
            0.0,
            hi,
            breaks,
            dim,
        )
    }
}

/// All orderings of `items`.
pub fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (idx, &first) in items.iter().enumerate() {
        let rest: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != idx)
            .map(|(_, &x)| x)
            .collect();
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Block-seeded Monte Carlo sampler over value profiles.
#[derive(Debug, Clone, Copy)]
pub struct ProfileSampler<'a> {
    env: &'a AuctionEnvironment,
    samples: usize,
    seed: u64,
    exec: Execution,
}

impl<'a> ProfileSampler<'a> {
    pub fn new(env: &'a AuctionEnvironment, samples: usize, seed: u64) -> Self {
        Self {
            env,
            samples,
            seed,
            exec: Execution::Parallel,
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn blocks(&self) -> usize {
        self.samples.div_ceil(BLOCK_SIZE)
    }

    /// Runs `body` on every profile; returns one accumulator per block, in
    /// block order.
    pub fn run<A, I, B>(&self, init: I, body: B) -> Vec<A>
    where
        A: Send,
        I: Fn() -> A + Sync + Send,
        B: Fn(&mut A, &[f64]) + Sync + Send,
    {
        let n = self.env.n();
        let dists = self.env.dists();
        self.exec.map_indexed(self.blocks(), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(b as u64);
            let start = b * BLOCK_SIZE;
            let len = BLOCK_SIZE.min(self.samples - start);
            let mut acc = init();
            let mut values = vec![0.0; n];
            for _ in 0..len {
                for (v, d) in values.iter_mut().zip(dists) {
                    *v = d.inverse_cdf(rng.random::<f64>());
                }
                body(&mut acc, &values);
            }
            acc
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::ValueDistribution;

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(&[]).len(), 1);
        assert_eq!(permutations(&[0, 1, 2]).len(), 6);
    }

    #[test]
    fn quadrature_moments_of_order_statistics() {
        let env = AuctionEnvironment::iid(3, 2, ValueDistribution::uniform(1.0).unwrap()).unwrap();
        let pq = ProfileQuadrature::new(&env, Quadrature::default());
        let m = pq.expect(None, 2, |v, out| {
            let mx = v.iter().cloned().fold(0.0, f64::max);
            out[0] = 1.0;
            out[1] = mx;
        });
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((m[1] - 0.75).abs() < 1e-12);
        // E[max(v_0, v_1, v_2) | v_0 = 0.5] = 0.5 * 0.25 + ∫_{0.5}^1 ... = 0.5^3 + (1 - 0.5^3) * 2/3
        let c = pq.expect(Some((0, 0.5)), 1, |v, out| {
            out[0] = v.iter().cloned().fold(0.0, f64::max);
        });
        let exact = 0.5 * 0.25 + (2.0 / 3.0) * (1.0 - 0.125);
        assert!((c[0] - exact).abs() < 1e-12, "{}", c[0]);
    }

    #[test]
    fn sampler_is_deterministic_and_thread_independent() {
        let env = AuctionEnvironment::iid(2, 1, ValueDistribution::uniform(1.0).unwrap()).unwrap();
        let run = |exec| {
            ProfileSampler::new(&env, 20_000, 9)
                .with_execution(exec)
                .run(|| 0.0, |acc: &mut f64, v| *acc += v[0] * v[1])
        };
        let a = run(Execution::Parallel);
        let b = run(Execution::Sequential);
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let mean = a.iter().sum::<f64>() / 20_000.0;
        assert!((mean - 0.25).abs() < 0.01);
    }
}
