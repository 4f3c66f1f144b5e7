//! Scalar distribution helpers: normal and logistic CDFs, their inverses and
//! derivatives, Student-t quantiles, and a truncated-normal sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc_inv;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() * INV_SQRT_2PI
}

#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        1.0
    } else if z == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
    }
}

/// Standard normal quantile. Returns ±∞ at the endpoints.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        let x = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
        // one Halley step polishes the series inverse to full precision
        let e = if x > 0.0 {
            (1.0 - p) - normal_cdf(-x)
        } else {
            normal_cdf(x) - p
        };
        let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
        x - u / (1.0 + 0.5 * x * u)
    }
}

#[inline]
pub fn logistic_cdf(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logistic_pdf(z: f64) -> f64 {
    let p = logistic_cdf(z);
    p * (1.0 - p)
}

/// Two-sided Student-t quantile `t_{df, q}`; `df = ∞` gives the normal quantile.
pub fn t_quantile(q: f64, df: f64) -> f64 {
    if !df.is_finite() || df > 1e7 {
        return normal_quantile(q);
    }
    StudentsT::new(0.0, 1.0, df)
        .map(|t| t.inverse_cdf(q))
        .unwrap_or_else(|_| normal_quantile(q))
}

/// Two-sided p-value of a t (or normal, `df = ∞`) statistic.
pub fn two_sided_p(stat: f64, df: f64) -> f64 {
    let a = stat.abs();
    if !df.is_finite() || df > 1e7 {
        return 2.0 * normal_cdf(-a);
    }
    match StudentsT::new(0.0, 1.0, df) {
        Ok(t) => 2.0 * t.cdf(-a),
        Err(_) => 2.0 * normal_cdf(-a),
    }
}

/// Link function of a cumulative-link model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Probit,
    Logit,
}

impl Link {
    #[inline]
    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Link::Probit => normal_cdf(z),
            Link::Logit => logistic_cdf(z),
        }
    }

    /// `P(Z > z)` computed without cancellation in the upper tail.
    #[inline]
    pub fn sf(self, z: f64) -> f64 {
        self.cdf(-z)
    }

    #[inline]
    pub fn pdf(self, z: f64) -> f64 {
        if !z.is_finite() {
            return 0.0;
        }
        match self {
            Link::Probit => normal_pdf(z),
            Link::Logit => logistic_pdf(z),
        }
    }

    /// Derivative of the density.
    #[inline]
    pub fn dpdf(self, z: f64) -> f64 {
        if !z.is_finite() {
            return 0.0;
        }
        match self {
            Link::Probit => -z * normal_pdf(z),
            Link::Logit => {
                let p = logistic_cdf(z);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
        }
    }

    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Link::Probit => normal_quantile(p),
            Link::Logit => {
                if p <= 0.0 {
                    f64::NEG_INFINITY
                } else if p >= 1.0 {
                    f64::INFINITY
                } else {
                    (p / (1.0 - p)).ln()
                }
            }
        }
    }

    /// Mass of the interval `(lo, hi]`, evaluated on whichever tail keeps precision.
    #[inline]
    pub fn interval_mass(self, lo: f64, hi: f64) -> f64 {
        if lo > 0.0 {
            self.sf(lo) - self.sf(hi)
        } else {
            self.cdf(hi) - self.cdf(lo)
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Probit => "probit",
            Link::Logit => "logit",
        }
    }
}

impl std::str::FromStr for Link {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probit" => Ok(Link::Probit),
            "logit" => Ok(Link::Logit),
            other => Err(format!("unknown link `{other}` (expected probit or logit)")),
        }
    }
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw from `N(mean, sd²)` restricted to `(lower, upper)`; either bound may be infinite.
pub fn truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    sd: f64,
    lower: f64,
    upper: f64,
) -> f64 {
    let a = (lower - mean) / sd;
    let b = (upper - mean) / sd;
    mean + sd * std_truncated(rng, a, b)
}

fn std_truncated<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    if !(a < b) {
        return if a.is_finite() { a } else { b };
    }
    if b <= 0.0 {
        return -std_truncated(rng, -b, -a);
    }
    if a < 0.0 {
        // interval straddles zero: plain inverse CDF is accurate here
        let pa = normal_cdf(a);
        let pb = normal_cdf(b);
        let u = pa + rng.random::<f64>() * (pb - pa);
        return normal_quantile(u).clamp(a, b);
    }
    if a < 5.0 {
        let qa = normal_cdf(-a);
        let qb = normal_cdf(-b);
        let u = qb + rng.random::<f64>() * (qa - qb);
        return (-normal_quantile(u)).clamp(a, b);
    }
    // far upper tail: exponential rejection, or uniform rejection for short intervals
    let alpha = 0.5 * (a + (a * a + 4.0).sqrt());
    if b - a < 1.0 / alpha {
        loop {
            let z = a + rng.random::<f64>() * (b - a);
            if rng.random::<f64>() <= (-0.5 * (z * z - a * a)).exp() {
                return z;
            }
        }
    }
    loop {
        let u: f64 = rng.random::<f64>();
        let z = a - (1.0 - u).ln() / alpha;
        if z > b {
            continue;
        }
        if rng.random::<f64>() <= (-0.5 * (z - alpha) * (z - alpha)).exp() {
            return z;
        }
    }
}
