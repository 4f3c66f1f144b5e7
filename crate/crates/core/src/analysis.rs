//! Outcome models fitted on completed data, and Rubin's rules.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutcomeKind};
use crate::design::{outcome_design, Design, References};
use crate::dist::{normal_quantile, t_quantile, two_sided_p};
use crate::error::{Error, Result};
use crate::linalg::{matrix_serde, spd_inverse, symmetrize};
use crate::optim::{bfgs, numeric_hessian, BfgsOptions};
use crate::quadrature::gauss_hermite;

pub const IRLS_TOL: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 50;
pub const QUADRATURE_NODES: usize = 15;
/// Logistic coefficients beyond this magnitude signal separation.
pub const LOGIT_SEPARATION_BOUND: f64 = 30.0;
/// Random-intercept SD below this is reported as the boundary value 0.
const SD_BOUNDARY: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GlmLogit,
    GlmmLogitRi,
    Linear,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glm-logit" | "logistic" => Ok(Self::GlmLogit),
            "glmm-logit-ri" | "glmm" => Ok(Self::GlmmLogitRi),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown model kind `{s}`"))),
        }
    }
}

impl ModelKind {
    /// Natural model for a dataset: linear for continuous outcomes, otherwise
    /// logistic, with a random intercept when a cluster column exists.
    pub fn for_dataset(ds: &Dataset) -> Self {
        match (ds.outcome_kind(), ds.cluster().is_some()) {
            (OutcomeKind::Continuous, _) => Self::Linear,
            (OutcomeKind::Binary, true) => Self::GlmmLogitRi,
            (OutcomeKind::Binary, false) => Self::GlmLogit,
        }
    }

    pub fn is_logit(self) -> bool {
        !matches!(self, Self::Linear)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(with = "matrix_serde")]
    pub vcov: DMatrix<f64>,
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_sd: Option<f64>,
    /// Random-intercept SD estimate sits at the zero boundary.
    #[serde(default)]
    pub sd_at_boundary: bool,
    pub loglik: f64,
    pub iterations: usize,
    pub n_obs: usize,
}

fn finish(
    names: Vec<String>,
    beta: Vec<f64>,
    vcov: DMatrix<f64>,
    kind: ModelKind,
    loglik: f64,
    iterations: usize,
    n: usize,
) -> OutcomeFit {
    let se = vcov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    OutcomeFit {
        names,
        coefficients: beta,
        se,
        vcov,
        kind,
        random_sd: None,
        sd_at_boundary: false,
        loglik,
        iterations,
        n_obs: n,
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn expit(x: f64) -> f64 {
    crate::dist::logistic_cdf(x)
}

fn check_binary(y: &[f64]) -> Result<()> {
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidData(
            "logistic model needs a 0/1 outcome".into(),
        ));
    }
    Ok(())
}

fn logistic_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yy)| yy * e - softplus(e))
        .sum()
}

/// Logistic regression by iteratively reweighted least squares.
pub fn fit_logistic(design: &Design, y: &[f64]) -> Result<OutcomeFit> {
    check_binary(y)?;
    if y.len() != design.n {
        return Err(Error::InvalidData(
            "outcome length differs from design rows".into(),
        ));
    }
    let x = design.to_matrix();
    let p = design.p;
    let mut beta = DVector::<f64>::zeros(p);
    let mut ll = logistic_loglik(&x, y, &beta);
    let info = |beta: &DVector<f64>| -> (DMatrix<f64>, DVector<f64>) {
        let eta = &x * beta;
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut score = DVector::<f64>::zeros(p);
        for i in 0..design.n {
            let mu = expit(eta[i]);
            let w = mu * (1.0 - mu);
            let row = design.row(i);
            for a in 0..p {
                score[a] += row[a] * (y[i] - mu);
                for b in 0..=a {
                    xtwx[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        (xtwx, score)
    };
    let mut iterations = 0;
    loop {
        if iterations >= IRLS_MAX_ITER {
            return Err(Error::NonConvergence {
                what: "logistic regression",
                iterations,
                gradient: info(&beta).1.amax(),
            });
        }
        iterations += 1;
        let (xtwx, score) = info(&beta);
        let chol = xtwx
            .cholesky()
            .ok_or(Error::RankDeficient("logistic regression"))?;
        let step = chol.solve(&score);
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut ll_next = logistic_loglik(&x, y, &next);
        while ll_next < ll - 1e-10 * ll.abs().max(1.0) && t > 1e-6 {
            t *= 0.5;
            next = &beta + &step * t;
            ll_next = logistic_loglik(&x, y, &next);
        }
        let change = (&next - &beta).amax();
        beta = next;
        ll = ll_next;
        if let Some((idx, v)) = beta
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > LOGIT_SEPARATION_BOUND)
        {
            return Err(Error::Separation {
                what: "logistic regression",
                index: idx,
                value: *v,
            });
        }
        if change < IRLS_TOL {
            break;
        }
    }
    let (xtwx, _) = info(&beta);
    let vcov = spd_inverse(&xtwx).ok_or(Error::RankDeficient("logistic regression"))?;
    Ok(finish(
        design.names.clone(),
        beta.as_slice().to_vec(),
        vcov,
        ModelKind::GlmLogit,
        ll,
        iterations,
        design.n,
    ))
}

/// Ordinary least squares with the classical covariance `σ̂²(XᵀX)⁻¹`.
pub fn fit_linear(design: &Design, y: &[f64]) -> Result<OutcomeFit> {
    let (n, p) = (design.n, design.p);
    if y.len() != n {
        return Err(Error::InvalidData(
            "outcome length differs from design rows".into(),
        ));
    }
    if n <= p {
        return Err(Error::RankDeficient("linear model (too few rows)"));
    }
    let x = design.to_matrix();
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|d| d.abs() < 1e-10 * scale) {
        return Err(Error::RankDeficient("linear model"));
    }
    let qty = qr.q().transpose() * DVector::from_column_slice(y);
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient("linear model"))?;
    let resid = DVector::from_column_slice(y) - &x * &beta;
    let rss = resid.norm_squared();
    let sigma2 = rss / (n - p) as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient("linear model"))?;
    let vcov = symmetrize(&r_inv * r_inv.transpose() * sigma2);
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * rss / n as f64).ln() + 1.0);
    Ok(finish(
        design.names.clone(),
        beta.as_slice().to_vec(),
        vcov,
        ModelKind::Linear,
        loglik,
        1,
        n,
    ))
}

/// Random-intercept logistic model by adaptive Gauss–Hermite quadrature.
pub struct RandomInterceptLogit<'a> {
    design: &'a Design,
    y: &'a [f64],
    /// Rows of each cluster.
    groups: Vec<Vec<usize>>,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> RandomInterceptLogit<'a> {
    /// `cluster` holds 1-based labels per design row.
    pub fn new(design: &'a Design, y: &'a [f64], cluster: &[u32], n_nodes: usize) -> Result<Self> {
        check_binary(y)?;
        if y.len() != design.n || cluster.len() != design.n {
            return Err(Error::InvalidData(
                "outcome/cluster length differs from design rows".into(),
            ));
        }
        let g = cluster.iter().copied().max().unwrap_or(0) as usize;
        let mut groups = vec![Vec::new(); g];
        for (i, &c) in cluster.iter().enumerate() {
            if c == 0 {
                return Err(Error::InvalidData("cluster labels are 1-based".into()));
            }
            groups[c as usize - 1].push(i);
        }
        groups.retain(|v| !v.is_empty());
        if groups.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "random-intercept model needs at least 2 clusters, got {}",
                groups.len()
            )));
        }
        let (nodes, weights) = gauss_hermite(n_nodes);
        Ok(Self {
            design,
            y,
            groups,
            nodes,
            weights,
        })
    }

    /// Marginal log-likelihood at `(β, log σ)`.
    pub fn loglik(&self, params: &[f64]) -> f64 {
        self.eval(params, false).0
    }

    /// Marginal log-likelihood and its gradient at `(β, log σ)`.
    ///
    /// The gradient differentiates the integrand under the integral with the
    /// quadrature nodes held at their adapted positions.
    pub fn loglik_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        self.eval(params, true)
    }

    fn eval(&self, params: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let p = self.design.p;
        let beta = &params[..p];
        let sigma = params[p].exp();
        let eta: Vec<f64> = (0..self.design.n)
            .map(|i| {
                beta.iter()
                    .zip(self.design.row(i))
                    .map(|(b, x)| b * x)
                    .sum()
            })
            .collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; if want_grad { p + 1 } else { 0 }];
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut terms = vec![0.0; self.nodes.len()];
        for rows in &self.groups {
            // integrand over the standardized effect v, u = σ v
            let h = |v: f64| -> f64 {
                rows.iter()
                    .map(|&i| self.y[i] * (eta[i] + sigma * v) - softplus(eta[i] + sigma * v))
                    .sum::<f64>()
                    - 0.5 * v * v
            };
            let mut v = 0.0;
            let mut hv = h(v);
            let mut curv = -1.0;
            for _ in 0..100 {
                let (mut g, mut hh) = (-v, -1.0);
                for &i in rows {
                    let mu = expit(eta[i] + sigma * v);
                    g += sigma * (self.y[i] - mu);
                    hh -= sigma * sigma * mu * (1.0 - mu);
                }
                curv = hh;
                let mut step = -g / hh;
                if step.abs() < 1e-10 * (1.0 + v.abs()) {
                    break;
                }
                let mut next = h(v + step);
                let mut halvings = 0;
                while !(next >= hv - 1e-12 * hv.abs()) && halvings < 30 {
                    step *= 0.5;
                    next = h(v + step);
                    halvings += 1;
                }
                v += step;
                hv = next;
                if step.abs() < 1e-10 * (1.0 + v.abs()) {
                    break;
                }
            }
            let s = (-1.0 / curv).sqrt();
            let scale = std::f64::consts::SQRT_2 * s;
            for (t, (&x, &w)) in terms.iter_mut().zip(self.nodes.iter().zip(&self.weights)) {
                *t = w.ln() + x * x + h(v + scale * x);
            }
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = terms.iter().map(|t| (t - mx).exp()).sum();
            total += mx + sum.ln() + scale.ln() - half_log_2pi;
            if want_grad {
                for (&t, &x) in terms.iter().zip(&self.nodes) {
                    let omega = (t - mx).exp() / sum;
                    let vq = v + scale * x;
                    for &i in rows {
                        let r = omega * (self.y[i] - expit(eta[i] + sigma * vq));
                        for (gj, xj) in grad[..p].iter_mut().zip(self.design.row(i)) {
                            *gj += r * xj;
                        }
                        grad[p] += r * sigma * vq;
                    }
                }
            }
        }
        (total, grad)
    }
}

/// Fit the random-intercept logistic model; `cluster` is 1-based per design row.
pub fn fit_logistic_random_intercept(
    design: &Design,
    y: &[f64],
    cluster: &[u32],
) -> Result<OutcomeFit> {
    fit_logistic_random_intercept_with(design, y, cluster, QUADRATURE_NODES)
}

pub fn fit_logistic_random_intercept_with(
    design: &Design,
    y: &[f64],
    cluster: &[u32],
    n_nodes: usize,
) -> Result<OutcomeFit> {
    let model = RandomInterceptLogit::new(design, y, cluster, n_nodes)?;
    let glm = fit_logistic(design, y)?;
    let p = design.p;
    let mut x0 = glm.coefficients.clone();
    x0.push(0.3f64.ln());
    let objective = |th: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (f, g) = model.loglik_grad(th);
        Ok((-f, g.into_iter().map(|v| -v).collect()))
    };
    let res = bfgs(
        objective,
        &x0,
        &BfgsOptions {
            max_iter: 400,
            grad_tol: 1e-5,
            f_tol: 1e-12,
        },
    )?;
    let log_sd = res.x[p];
    if log_sd.exp() < SD_BOUNDARY {
        let mut fit = glm;
        fit.kind = ModelKind::GlmmLogitRi;
        fit.random_sd = Some(0.0);
        fit.sd_at_boundary = true;
        fit.iterations = res.iterations;
        return Ok(fit);
    }
    if !res.converged {
        return Err(Error::NonConvergence {
            what: "random-intercept logistic regression",
            iterations: res.iterations,
            gradient: res.gradient.iter().fold(0.0, |a, v| a.max(v.abs())),
        });
    }
    if let Some((idx, v)) = res.x[..p]
        .iter()
        .enumerate()
        .find(|(_, v)| v.abs() > LOGIT_SEPARATION_BOUND)
    {
        return Err(Error::Separation {
            what: "random-intercept logistic regression",
            index: idx,
            value: *v,
        });
    }
    let hess = numeric_hessian(
        |t| Ok(model.loglik_grad(t).1.into_iter().map(|v| -v).collect()),
        &res.x,
        1e-5,
    )?;
    let cov = spd_inverse(&hess).ok_or(Error::Numeric(
        "random-intercept logistic regression: Hessian not positive definite".into(),
    ))?;
    let vcov = cov.view((0, 0), (p, p)).into_owned();
    let mut fit = finish(
        design.names.clone(),
        res.x[..p].to_vec(),
        vcov,
        ModelKind::GlmmLogitRi,
        -res.value,
        res.iterations,
        design.n,
    );
    fit.random_sd = Some(log_sd.exp());
    Ok(fit)
}

/// Fit `kind` on `rows` of `ds` with `x1` taken from `x1` (one code per dataset row).
pub fn fit_outcome(
    ds: &Dataset,
    x1: &[u32],
    rows: &[usize],
    kind: ModelKind,
    refs: &References,
) -> Result<OutcomeFit> {
    let design = outcome_design(ds, x1, rows, refs)?;
    let y: Vec<f64> = rows.iter().map(|&i| ds.outcome()[i]).collect();
    match kind {
        ModelKind::GlmLogit => fit_logistic(&design, &y),
        ModelKind::Linear => fit_linear(&design, &y),
        ModelKind::GlmmLogitRi => {
            let cl = ds.cluster().ok_or_else(|| {
                Error::InvalidArgument("random-intercept model needs a cluster column".into())
            })?;
            let labels: Vec<u32> = rows.iter().map(|&i| cl.codes[i]).collect();
            fit_logistic_random_intercept(&design, &y, &labels)
        }
    }
}

/// Fit `kind` to every completed copy, in parallel, preserving copy order.
pub fn fit_copies(
    ds: &Dataset,
    copies: &[Vec<u32>],
    kind: ModelKind,
    refs: &References,
) -> Result<Vec<OutcomeFit>> {
    let rows: Vec<usize> = (0..ds.n()).collect();
    copies
        .par_iter()
        .enumerate()
        .map(|(m, c)| fit_outcome(ds, c, &rows, kind, refs).map_err(|e| e.in_copy(m)))
        .collect()
}

/// Pooled inference for one coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub name: String,
    pub qbar: f64,
    pub w: f64,
    pub b: f64,
    pub t: f64,
    /// `f64::INFINITY` when `b == 0`; serialized as null.
    #[serde(with = "inf_as_null")]
    pub df: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub odds_ratio: Option<[f64; 3]>,
}

mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub m: usize,
    pub kind: ModelKind,
    /// Reference distribution of the intervals: `t` or `normal` (when every B is 0).
    pub quantile: String,
    pub rows: Vec<PooledRow>,
}

/// Mean of a multiset, independent of input order.
fn sorted_mean(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Rubin's rules for one scalar from per-copy estimates and variances.
pub fn pool_scalar(
    name: &str,
    estimates: &[f64],
    variances: &[f64],
    logit: bool,
) -> Result<PooledRow> {
    let m = estimates.len();
    if m < 2 || variances.len() != m {
        return Err(Error::InvalidArgument(format!(
            "pooling needs M >= 2 matching estimates, got {m}"
        )));
    }
    let mut q = estimates.to_vec();
    let mut u = variances.to_vec();
    let (lo, hi) = q
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (qbar, b) = if lo == hi {
        (lo, 0.0)
    } else {
        let qbar = sorted_mean(&mut q);
        let mut dev: Vec<f64> = q.iter().map(|v| (v - qbar).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        (qbar, dev.iter().sum::<f64>() / (m - 1) as f64)
    };
    let w = sorted_mean(&mut u);
    let mf = m as f64;
    let t = w + (1.0 + 1.0 / mf) * b;
    let df = if b > 0.0 {
        (mf - 1.0) * (1.0 + w / ((1.0 + 1.0 / mf) * b)).powi(2)
    } else {
        f64::INFINITY
    };
    let se = t.sqrt();
    let crit = if df.is_finite() {
        t_quantile(0.975, df)
    } else {
        normal_quantile(0.975)
    };
    let (ci_low, ci_high) = (qbar - crit * se, qbar + crit * se);
    let p_value = if se > 0.0 {
        two_sided_p(qbar / se, df)
    } else {
        f64::NAN
    };
    Ok(PooledRow {
        name: name.to_string(),
        qbar,
        w,
        b,
        t,
        df,
        se,
        ci_low,
        ci_high,
        p_value,
        odds_ratio: logit.then(|| [qbar.exp(), ci_low.exp(), ci_high.exp()]),
    })
}

/// Combine `M` fits with identical coefficient layout.
pub fn pool_rubin(fits: &[OutcomeFit]) -> Result<PooledEstimate> {
    let m = fits.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "pooling needs M >= 2 fits, got {m}"
        )));
    }
    let first = &fits[0];
    if fits
        .iter()
        .any(|f| f.names != first.names || f.kind != first.kind)
    {
        return Err(Error::InvalidArgument(
            "fits to pool have different coefficient layouts".into(),
        ));
    }
    let mut rows = Vec::with_capacity(first.names.len());
    for (j, name) in first.names.iter().enumerate() {
        let q: Vec<f64> = fits.iter().map(|f| f.coefficients[j]).collect();
        let u: Vec<f64> = fits.iter().map(|f| f.se[j] * f.se[j]).collect();
        rows.push(pool_scalar(name, &q, &u, first.kind.is_logit())?);
    }
    let quantile = if rows.iter().all(|r| !r.df.is_finite()) {
        "normal"
    } else {
        "t"
    };
    Ok(PooledEstimate {
        m,
        kind: first.kind,
        quantile: quantile.to_string(),
        rows,
    })
}

/// Intraclass correlation on the latent logistic scale.
pub fn compute_icc(sd: f64) -> f64 {
    let v = sd * sd;
    v / (v + std::f64::consts::PI.powi(2) / 3.0)
}
