//! Bidder value distributions on bounded supports `[0, hi]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn one() -> f64 {
    1.0
}

/// Serializable description of a distribution, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum DistSpec {
    Uniform {
        #[serde(default = "one")]
        hi: f64,
    },
    Power {
        alpha: f64,
        #[serde(default = "one")]
        hi: f64,
    },
    Tabulated {
        points: Vec<[f64; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Family {
    Uniform,
    Power {
        alpha: f64,
    },
    /// Strictly increasing abscissae with non-decreasing CDF values.
    Tabulated {
        v: Vec<f64>,
        cdf: Vec<f64>,
    },
}

/// Family discriminant without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyTag {
    Uniform,
    Power,
    Tabulated,
}

/// A value distribution on `[0, hi]`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueDistribution {
    hi: f64,
    family: Family,
}

impl ValueDistribution {
    pub fn uniform(hi: f64) -> Result<Self> {
        check_hi(hi)?;
        Ok(Self {
            hi,
            family: Family::Uniform,
        })
    }

    /// `F(v) = (v / hi)^alpha`.
    pub fn power(alpha: f64, hi: f64) -> Result<Self> {
        check_hi(hi)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "power exponent must be positive, got {alpha}"
            )));
        }
        Ok(Self {
            hi,
            family: Family::Power { alpha },
        })
    }

    /// Piecewise-linear CDF through `(v, F(v))` points; must start at `(0, 0)`
    /// and end at `(hi, 1)`.
    pub fn tabulated(points: &[[f64; 2]]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidDistribution(
                "tabulated CDF needs at least two points".into(),
            ));
        }
        let (v, cdf): (Vec<f64>, Vec<f64>) = points.iter().map(|p| (p[0], p[1])).unzip();
        if v[0] != 0.0 || cdf[0] != 0.0 {
            return Err(Error::InvalidDistribution(
                "tabulated CDF must start at (0, 0)".into(),
            ));
        }
        if (cdf[cdf.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(
                "tabulated CDF must end at F = 1".into(),
            ));
        }
        if v.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidDistribution(
                "tabulated abscissae must be strictly increasing".into(),
            ));
        }
        if cdf.windows(2).any(|w| w[1] < w[0]) || cdf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidDistribution(
                "tabulated CDF values must be non-decreasing in [0, 1]".into(),
            ));
        }
        let hi = v[v.len() - 1];
        check_hi(hi)?;
        let mut cdf = cdf;
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self {
            hi,
            family: Family::Tabulated { v, cdf },
        })
    }

    pub fn from_spec(spec: &DistSpec) -> Result<Self> {
        match spec {
            DistSpec::Uniform { hi } => Self::uniform(*hi),
            DistSpec::Power { alpha, hi } => Self::power(*alpha, *hi),
            DistSpec::Tabulated { points } => Self::tabulated(points),
        }
    }

    pub fn to_spec(&self) -> DistSpec {
        match &self.family {
            Family::Uniform => DistSpec::Uniform { hi: self.hi },
            Family::Power { alpha } => DistSpec::Power {
                alpha: *alpha,
                hi: self.hi,
            },
            Family::Tabulated { v, cdf } => DistSpec::Tabulated {
                points: v.iter().zip(cdf).map(|(a, b)| [*a, *b]).collect(),
            },
        }
    }

    pub fn support_hi(&self) -> f64 {
        self.hi
    }

    pub fn family_tag(&self) -> FamilyTag {
        match self.family {
            Family::Uniform => FamilyTag::Uniform,
            Family::Power { .. } => FamilyTag::Power,
            Family::Tabulated { .. } => FamilyTag::Tabulated,
        }
    }

    /// Interior kinks of the CDF (tabulated breakpoints); empty for analytic families.
    pub fn breakpoints(&self) -> Vec<f64> {
        match &self.family {
            Family::Tabulated { v, .. } => v[1..v.len() - 1].to_vec(),
            _ => Vec::new(),
        }
    }

    pub fn cdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        if v >= self.hi {
            return 1.0;
        }
        match &self.family {
            Family::Uniform => v / self.hi,
            Family::Power { alpha } => (v / self.hi).powf(*alpha),
            Family::Tabulated { v: xs, cdf } => {
                let j = segment_index(xs, v);
                let t = (v - xs[j]) / (xs[j + 1] - xs[j]);
                cdf[j] + t * (cdf[j + 1] - cdf[j])
            }
        }
    }

    /// Density; zero outside `[0, hi]`. Tabulated densities are the
    /// right-continuous finite-difference slopes of the CDF.
    pub fn pdf(&self, v: f64) -> f64 {
        if v < 0.0 || v > self.hi {
            return 0.0;
        }
        match &self.family {
            Family::Uniform => 1.0 / self.hi,
            Family::Power { alpha } => {
                let t = v / self.hi;
                if *alpha == 1.0 {
                    1.0 / self.hi
                } else {
                    alpha / self.hi * t.powf(alpha - 1.0)
                }
            }
            Family::Tabulated { v: xs, cdf } => {
                let j = segment_index(xs, v);
                (cdf[j + 1] - cdf[j]) / (xs[j + 1] - xs[j])
            }
        }
    }

    /// Quantile function `inf { v : F(v) >= u }`, clamped to `[0, 1]` input.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match &self.family {
            Family::Uniform => u * self.hi,
            Family::Power { alpha } => self.hi * u.powf(1.0 / alpha),
            Family::Tabulated { v: xs, cdf } => {
                if u <= 0.0 {
                    return 0.0;
                }
                // first node with cdf >= u
                let j = cdf.partition_point(|&c| c < u);
                if j == 0 {
                    return xs[0];
                }
                let (c0, c1) = (cdf[j - 1], cdf[j]);
                let t = (u - c0) / (c1 - c0);
                xs[j - 1] + t * (xs[j] - xs[j - 1])
            }
        }
    }

    /// Myerson virtual value `v - (1 - F(v)) / f(v)`.
    pub fn virtual_value(&self, v: f64) -> Result<f64> {
        if !(0.0..=self.hi).contains(&v) {
            return Err(Error::Domain {
                value: v,
                hi: self.hi,
            });
        }
        let f = self.pdf(v);
        if f <= 0.0 {
            return Err(Error::Singular(v));
        }
        Ok(v - (1.0 - self.cdf(v)) / f)
    }

    /// Virtual value with limiting conventions: `-inf` where the density
    /// vanishes with mass remaining above, `v` where the density is infinite.
    pub fn virtual_value_limit(&self, v: f64) -> f64 {
        let f = self.pdf(v);
        let tail = 1.0 - self.cdf(v);
        if f <= 0.0 {
            if tail > 0.0 {
                f64::NEG_INFINITY
            } else {
                v
            }
        } else if f.is_infinite() {
            v
        } else {
            v - tail / f
        }
    }

    /// `phi(v) f(v) = v f(v) - (1 - F(v))`, finite wherever `v f(v)` is.
    pub fn virtual_value_density(&self, v: f64) -> f64 {
        let f = self.pdf(v);
        let vf = if v == 0.0 { 0.0 } else { v * f };
        vf - (1.0 - self.cdf(v))
    }

    /// Grid-scan regularity test: the virtual value on `grid_size` equally
    /// spaced points of `[0, hi]` must be strictly increasing.
    pub fn check_regular(&self, grid_size: usize) -> bool {
        let grid_size = grid_size.max(2);
        let step = self.hi / (grid_size - 1) as f64;
        let mut prev: Option<f64> = None;
        for j in 0..grid_size {
            let v = if j + 1 == grid_size {
                self.hi
            } else {
                j as f64 * step
            };
            let f = self.pdf(v);
            if f <= 0.0 && v > 0.0 && v < self.hi {
                return false;
            }
            let phi = self.virtual_value_limit(v);
            if let Some(p) = prev {
                if !(phi - p > 1e-12) {
                    return false;
                }
            }
            prev = Some(phi);
        }
        true
    }

    /// Inverse-CDF sampling; deterministic in `seed`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| self.inverse_cdf(rng.random::<f64>()))
            .collect()
    }
}

fn check_hi(hi: f64) -> Result<()> {
    if hi.is_finite() && hi > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDistribution(format!(
            "support upper bound must be positive and finite, got {hi}"
        )))
    }
}

/// Index `j` with `xs[j] <= v < xs[j+1]`, clamped to the last segment.
fn segment_index(xs: &[f64], v: f64) -> usize {
    let j = xs.partition_point(|&x| x <= v);
    j.saturating_sub(1).min(xs.len() - 2)
}
