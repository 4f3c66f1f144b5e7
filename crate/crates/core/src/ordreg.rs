//! Cumulative-link ordinal regression by maximum likelihood.
//!
//! Model: `P(X = k | x) = F(ζ_k − η) − F(ζ_{k−1} − η)` with `η = xᵀβ`,
//! `ζ_0 = −∞`, `ζ_K = +∞` and `F` the probit or logit CDF. Parameters are
//! stacked as `(β, ζ)`. Fitting is Newton–Raphson on the analytic Hessian with
//! step halving; the covariance is the inverse observed information.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::design::Design;
use crate::dist::{std_normal, Link};
use crate::error::{Error, Result};
use crate::linalg::{matrix_serde, psd_factor, spd_inverse, symmetrize};

/// Parameters beyond this magnitude signal (quasi-)complete separation.
pub const SEPARATION_BOUND: f64 = 30.0;
pub const MAX_NEWTON_ITER: usize = 100;
pub const GRAD_TOL: f64 = 1e-8;
const MAX_DRAW_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalFit {
    pub names: Vec<String>,
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    pub link: Link,
    #[serde(with = "matrix_serde")]
    pub vcov: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
}

/// One stochastic draw of `(β, ζ)` around a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDraw {
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
}

/// Response and design of one ordinal regression problem.
#[derive(Debug, Clone, Copy)]
pub struct OrdinalProblem<'a> {
    pub design: &'a Design,
    /// Categories coded `1..=k`.
    pub response: &'a [u32],
    pub k: usize,
}

impl<'a> OrdinalProblem<'a> {
    pub fn new(design: &'a Design, response: &'a [u32], k: usize) -> Result<Self> {
        if response.len() != design.n {
            return Err(Error::InvalidData(
                "response length differs from design rows".into(),
            ));
        }
        if k < 2 {
            return Err(Error::InvalidArgument(
                "ordinal response needs at least 2 categories".into(),
            ));
        }
        if let Some(&c) = response.iter().find(|&&c| c < 1 || c as usize > k) {
            return Err(Error::InvalidData(format!(
                "response category {c} outside 1..={k}"
            )));
        }
        Ok(Self {
            design,
            response,
            k,
        })
    }

    pub fn n_params(&self) -> usize {
        self.design.p + self.k - 1
    }
}

fn strictly_increasing(z: &[f64]) -> bool {
    z.windows(2).all(|w| w[0] < w[1])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Category probabilities for linear predictor `eta` under thresholds `zeta`.
pub fn probs_at(zeta: &[f64], eta: f64, link: Link) -> Vec<f64> {
    let k = zeta.len() + 1;
    (1..=k)
        .map(|c| {
            let hi = if c < k {
                zeta[c - 1] - eta
            } else {
                f64::INFINITY
            };
            let lo = if c > 1 {
                zeta[c - 2] - eta
            } else {
                f64::NEG_INFINITY
            };
            link.interval_mass(lo, hi).max(0.0)
        })
        .collect()
}

/// `η = βᵀx` for one design row.
pub fn linear_predictor(fit: &OrdinalFit, row: &[f64]) -> Result<f64> {
    if row.len() != fit.beta.len() {
        return Err(Error::InvalidArgument(format!(
            "design row has {} entries, fit has {} coefficients",
            row.len(),
            fit.beta.len()
        )));
    }
    Ok(dot(&fit.beta, row))
}

/// Probability simplex over the `K` categories for one design row.
pub fn category_probs(fit: &OrdinalFit, row: &[f64]) -> Result<Vec<f64>> {
    let eta = linear_predictor(fit, row)?;
    Ok(probs_at(&fit.zeta, eta, fit.link))
}

struct Derivs {
    loglik: f64,
    grad: DVector<f64>,
    hess: Option<DMatrix<f64>>,
}

fn evaluate(
    params: &[f64],
    prob: &OrdinalProblem<'_>,
    link: Link,
    want_hess: bool,
) -> Result<Derivs> {
    let p = prob.design.p;
    let nz = prob.k - 1;
    if params.len() != p + nz {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameters, got {}",
            p + nz,
            params.len()
        )));
    }
    let (beta, zeta) = params.split_at(p);
    if !strictly_increasing(zeta) {
        return Err(Error::InvalidArgument(
            "thresholds are not strictly increasing".into(),
        ));
    }
    let np = p + nz;
    let mut ll = 0.0;
    let mut grad = DVector::<f64>::zeros(np);
    let mut hess = if want_hess {
        Some(DMatrix::<f64>::zeros(np, np))
    } else {
        None
    };

    for i in 0..prob.design.n {
        let x = prob.design.row(i);
        let c = prob.response[i] as usize;
        let eta = dot(beta, x);
        let hi = if c < prob.k {
            zeta[c - 1] - eta
        } else {
            f64::INFINITY
        };
        let lo = if c > 1 {
            zeta[c - 2] - eta
        } else {
            f64::NEG_INFINITY
        };
        let pr = link.interval_mass(lo, hi);
        if !(pr > 0.0) {
            ll = f64::NEG_INFINITY;
            continue;
        }
        ll += pr.ln();
        let (f_hi, f_lo) = (link.pdf(hi), link.pdf(lo));
        // first derivatives of the probability
        let dbeta = -(f_hi - f_lo);
        let hi_idx = (c < prob.k).then(|| p + c - 1);
        let lo_idx = (c > 1).then(|| p + c - 2);
        for j in 0..p {
            grad[j] += dbeta * x[j] / pr;
        }
        if let Some(a) = hi_idx {
            grad[a] += f_hi / pr;
        }
        if let Some(b) = lo_idx {
            grad[b] -= f_lo / pr;
        }
        if let Some(h) = hess.as_mut() {
            let (d_hi, d_lo) = (link.dpdf(hi), link.dpdf(lo));
            let inv = 1.0 / pr;
            let inv2 = inv * inv;
            // sparse view of dp: beta block, zeta_hi, zeta_lo
            let mut idx: Vec<(usize, f64)> = (0..p).map(|j| (j, dbeta * x[j])).collect();
            if let Some(a) = hi_idx {
                idx.push((a, f_hi));
            }
            if let Some(b) = lo_idx {
                idx.push((b, -f_lo));
            }
            for &(r, gr) in &idx {
                for &(s, gs) in &idx {
                    h[(r, s)] -= gr * gs * inv2;
                }
            }
            let d2bb = d_hi - d_lo;
            for r in 0..p {
                for s in 0..p {
                    h[(r, s)] += x[r] * x[s] * d2bb * inv;
                }
            }
            if let Some(a) = hi_idx {
                h[(a, a)] += d_hi * inv;
                for r in 0..p {
                    let v = -x[r] * d_hi * inv;
                    h[(r, a)] += v;
                    h[(a, r)] += v;
                }
            }
            if let Some(b) = lo_idx {
                h[(b, b)] -= d_lo * inv;
                for r in 0..p {
                    let v = x[r] * d_lo * inv;
                    h[(r, b)] += v;
                    h[(b, r)] += v;
                }
            }
        }
    }
    Ok(Derivs {
        loglik: ll,
        grad,
        hess,
    })
}

/// Log-likelihood and its analytic gradient at `params = (β, ζ)`.
pub fn loglik_and_gradient(
    params: &[f64],
    prob: &OrdinalProblem<'_>,
    link: Link,
) -> Result<(f64, Vec<f64>)> {
    let d = evaluate(params, prob, link, false)?;
    Ok((d.loglik, d.grad.as_slice().to_vec()))
}

/// Analytic Hessian of the log-likelihood.
pub fn loglik_hessian(
    params: &[f64],
    prob: &OrdinalProblem<'_>,
    link: Link,
) -> Result<DMatrix<f64>> {
    let d = evaluate(params, prob, link, true)?;
    Ok(d.hess.expect("requested"))
}

/// Full-rank check of `[1, X]`, the identifiable part of the design.
fn check_rank(design: &Design) -> Result<()> {
    let p = design.p;
    if design.n == 0 {
        return Err(Error::InvalidData("no rows to fit".into()));
    }
    let mut xtx = DMatrix::<f64>::zeros(p + 1, p + 1);
    let mut row = vec![1.0; p + 1];
    for i in 0..design.n {
        row[1..].copy_from_slice(design.row(i));
        for a in 0..=p {
            for b in 0..=p {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    // scale to unit diagonal so the pivot test is relative
    let d: Vec<f64> = (0..=p).map(|j| xtx[(j, j)].sqrt()).collect();
    if d.contains(&0.0) {
        return Err(Error::RankDeficient("ordinal regression"));
    }
    let scaled = DMatrix::from_fn(p + 1, p + 1, |a, b| xtx[(a, b)] / (d[a] * d[b]));
    let eig = scaled.symmetric_eigen();
    if eig.eigenvalues.min() < 1e-10 {
        return Err(Error::RankDeficient("ordinal regression"));
    }
    Ok(())
}

/// Fit the cumulative-link model to `prob` by Newton–Raphson.
pub fn fit_cumulative(prob: &OrdinalProblem<'_>, link: Link) -> Result<OrdinalFit> {
    let k = prob.k;
    let p = prob.design.p;
    let n = prob.design.n;
    let mut counts = vec![0usize; k];
    for &c in prob.response {
        counts[c as usize - 1] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::InvalidData(
            "response needs observations in at least 2 categories".into(),
        ));
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCategory(empty as u32 + 1));
    }
    check_rank(prob.design)?;

    // start: β = 0, ζ = F⁻¹(empirical cumulative proportions)
    let mut theta = vec![0.0; p + k - 1];
    let mut cum = 0usize;
    for j in 0..k - 1 {
        cum += counts[j];
        theta[p + j] = link.quantile(cum as f64 / n as f64);
    }

    let mut d = evaluate(&theta, prob, link, true)?;
    let mut iterations = 0;
    loop {
        if d.grad.amax() < GRAD_TOL {
            break;
        }
        if iterations >= MAX_NEWTON_ITER {
            return Err(Error::NonConvergence {
                what: "ordinal regression",
                iterations,
                gradient: d.grad.amax(),
            });
        }
        iterations += 1;
        let neg_h = -d.hess.clone().expect("requested");
        let step = newton_direction(&neg_h, &d.grad)?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a + t * s)
                .collect();
            if strictly_increasing(&trial[p..]) {
                let dt = evaluate(&trial, prob, link, true)?;
                if dt.loglik.is_finite() && dt.loglik >= d.loglik - 1e-12 * d.loglik.abs().max(1.0)
                {
                    accepted = Some((trial, dt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, dt)) = accepted else {
            return Err(Error::NonConvergence {
                what: "ordinal regression (line search)",
                iterations,
                gradient: d.grad.amax(),
            });
        };
        theta = trial;
        d = dt;
        if let Some((idx, v)) = theta
            .iter()
            .enumerate()
            .find(|(_, v)| v.abs() > SEPARATION_BOUND)
        {
            return Err(Error::Separation {
                what: "ordinal regression",
                index: idx,
                value: *v,
            });
        }
    }

    let info = symmetrize(-d.hess.expect("requested"));
    let vcov = spd_inverse(&info).ok_or(Error::RankDeficient("ordinal regression information"))?;
    // probit tails flatten the likelihood before a diverging parameter
    // reaches the bound, so an exploding standard error also counts
    if let Some(idx) =
        (0..vcov.nrows()).find(|&j| vcov[(j, j)] > SEPARATION_BOUND * SEPARATION_BOUND)
    {
        return Err(Error::Separation {
            what: "ordinal regression",
            index: idx,
            value: theta[idx],
        });
    }
    Ok(OrdinalFit {
        names: prob.design.names.clone(),
        beta: theta[..p].to_vec(),
        zeta: theta[p..].to_vec(),
        link,
        vcov,
        loglik: d.loglik,
        converged: true,
        iterations,
        n_obs: n,
    })
}

/// Solve `(−H) s = g`, regularizing when `−H` is not positive definite.
fn newton_direction(neg_h: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = grad.len();
    let scale = neg_h.diagonal().amax().max(1e-8);
    let mut lambda = 0.0;
    for _ in 0..30 {
        let m = neg_h + DMatrix::<f64>::identity(n, n) * lambda;
        if let Some(c) = m.cholesky() {
            return Ok(c.solve(grad));
        }
        lambda = if lambda == 0.0 {
            1e-8 * scale
        } else {
            lambda * 10.0
        };
    }
    Err(Error::Numeric(
        "ordinal regression: Hessian could not be regularized".into(),
    ))
}

/// Multivariate-normal draw of `(β, ζ)` from `N(fit, vcov)`, redrawn until
/// the thresholds are strictly increasing.
pub fn draw_params<R: Rng + ?Sized>(fit: &OrdinalFit, rng: &mut R) -> Result<ParamDraw> {
    let p = fit.beta.len();
    let dim = p + fit.zeta.len();
    if fit.vcov.nrows() != dim || fit.vcov.ncols() != dim {
        return Err(Error::InvalidArgument(
            "vcov dimension does not match the fit".into(),
        ));
    }
    let l = psd_factor(&fit.vcov);
    let mean: Vec<f64> = fit.beta.iter().chain(&fit.zeta).copied().collect();
    for _ in 0..MAX_DRAW_TRIES {
        let z = DVector::from_fn(dim, |_, _| std_normal(rng));
        let shift = &l * z;
        let theta: Vec<f64> = mean.iter().zip(shift.iter()).map(|(m, s)| m + s).collect();
        if strictly_increasing(&theta[p..]) {
            return Ok(ParamDraw {
                beta: theta[..p].to_vec(),
                zeta: theta[p..].to_vec(),
            });
        }
    }
    Err(Error::Numeric(format!(
        "draw_params: thresholds not increasing after {MAX_DRAW_TRIES} draws"
    )))
}

impl OrdinalFit {
    /// Fit with zero covariance from given parameters; mainly for tests and
    /// for fixed-parameter classification.
    pub fn from_parameters(beta: Vec<f64>, zeta: Vec<f64>, link: Link) -> Result<Self> {
        if !strictly_increasing(&zeta) {
            return Err(Error::InvalidArgument(
                "thresholds are not strictly increasing".into(),
            ));
        }
        let dim = beta.len() + zeta.len();
        Ok(Self {
            names: (0..beta.len()).map(|j| format!("b{}", j + 1)).collect(),
            beta,
            zeta,
            link,
            vcov: DMatrix::zeros(dim, dim),
            loglik: f64::NAN,
            converged: true,
            iterations: 0,
            n_obs: 0,
        })
    }

    pub fn params(&self) -> Vec<f64> {
        self.beta.iter().chain(&self.zeta).copied().collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.vcov
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::normal_quantile;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn design_from(rows: &[Vec<f64>]) -> Design {
        let p = rows.first().map_or(0, |r| r.len());
        Design {
            names: (0..p).map(|j| format!("x{j}")).collect(),
            n: rows.len(),
            p,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    fn empty_design(n: usize) -> Design {
        Design {
            names: vec![],
            n,
            p: 0,
            data: vec![],
        }
    }

    /// Simulate a latent-probit dataset with one binary and one continuous predictor.
    fn simulate(n: usize, seed: u64, beta: &[f64], zeta: &[f64]) -> (Design, Vec<u32>) {
        let mut rng = stream(seed, &[]);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let x = vec![(i % 2) as f64, std_normal(&mut rng)];
            let eta = dot(beta, &x);
            let theta = eta + std_normal(&mut rng);
            let c = 1 + zeta.iter().filter(|&&z| theta > z).count() as u32;
            rows.push(x);
            y.push(c);
        }
        (design_from(&rows), y)
    }

    #[test]
    fn intercept_only_probit_thresholds_are_closed_form() {
        let y: Vec<u32> = (0..300).map(|i| (i % 3) as u32 + 1).collect();
        let d = empty_design(300);
        let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
        let fit = fit_cumulative(&prob, Link::Probit).unwrap();
        assert_abs_diff_eq!(fit.zeta[0], normal_quantile(1.0 / 3.0), epsilon = 1e-8);
        assert_abs_diff_eq!(fit.zeta[1], normal_quantile(2.0 / 3.0), epsilon = 1e-8);
        assert_abs_diff_eq!(fit.zeta[0], -0.43073, epsilon = 1e-5);
        assert!(fit.converged);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn analytic_hessian_matches_finite_differences_of_gradient() {
        let (d, y) = simulate(200, 5, &[0.7, -0.4], &[-0.5, 0.2, 0.9]);
        let prob = OrdinalProblem::new(&d, &y, 4).unwrap();
        for link in [Link::Probit, Link::Logit] {
            let theta = vec![0.3, -0.2, -0.6, 0.1, 1.0];
            let h = loglik_hessian(&theta, &prob, link).unwrap();
            let fd = crate::optim::numeric_hessian(
                |t| loglik_and_gradient(t, &prob, link).map(|r| r.1),
                &theta,
                1e-6,
            )
            .unwrap();
            assert!((h - fd).amax() < 1e-5);
        }
    }

    #[test]
    fn fit_recovers_generating_parameters() {
        let beta = [0.8, -0.5];
        let zeta = [-0.7, 0.0, 0.6, 1.3];
        let (d, y) = simulate(20_000, 17, &beta, &zeta);
        let prob = OrdinalProblem::new(&d, &y, 5).unwrap();
        let fit = fit_cumulative(&prob, Link::Probit).unwrap();
        let se = fit.std_errors();
        for (j, truth) in beta.iter().chain(&zeta).enumerate() {
            let est = fit.params()[j];
            assert!(
                (est - truth).abs() < 4.0 * se[j],
                "param {j}: {est} vs {truth}"
            );
        }
        let (_, g) = loglik_and_gradient(&fit.params(), &prob, Link::Probit).unwrap();
        assert!(g.iter().all(|v| v.abs() < GRAD_TOL));
    }

    #[test]
    fn duplicated_data_halves_vcov() {
        let (d, y) = simulate(150, 23, &[0.5, 0.3], &[-0.4, 0.5]);
        let rows: Vec<usize> = (0..150).chain(0..150).collect();
        let d2 = d.select(&rows);
        let y2: Vec<u32> = rows.iter().map(|&i| y[i]).collect();
        let f1 = fit_cumulative(&OrdinalProblem::new(&d, &y, 3).unwrap(), Link::Probit).unwrap();
        let f2 = fit_cumulative(&OrdinalProblem::new(&d2, &y2, 3).unwrap(), Link::Probit).unwrap();
        for (a, b) in f1.params().iter().zip(f2.params()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-8);
        }
        assert!((&f1.vcov * 0.5 - &f2.vcov).amax() < 1e-8);
    }

    #[test]
    fn empty_category_and_rank_deficiency_are_errors() {
        let (d, mut y) = simulate(100, 2, &[0.5, 0.3], &[-0.4, 0.5]);
        for c in y.iter_mut() {
            if *c == 2 {
                *c = 3;
            }
        }
        let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
        assert!(matches!(
            fit_cumulative(&prob, Link::Probit),
            Err(Error::EmptyCategory(2))
        ));

        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i % 2) as f64, 2.0 * (i % 2) as f64])
            .collect();
        let d = design_from(&rows);
        let y: Vec<u32> = (0..50).map(|i| (i % 3) as u32 + 1).collect();
        let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
        assert!(matches!(
            fit_cumulative(&prob, Link::Probit),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn complete_separation_is_detected() {
        let rows: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 2) as f64]).collect();
        let d = design_from(&rows);
        // x = 1 always lands in the top category, x = 0 spans the lower two
        let y: Vec<u32> = (0..60)
            .map(|i| {
                if i % 2 == 1 {
                    3
                } else {
                    1 + (i / 2 % 2) as u32
                }
            })
            .collect();
        let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
        let err = fit_cumulative(&prob, Link::Probit).unwrap_err();
        assert!(
            matches!(err, Error::Separation { .. } | Error::NonConvergence { .. }),
            "{err}"
        );
    }

    #[test]
    fn category_probs_examples() {
        let fit = OrdinalFit::from_parameters(vec![1.0, 2.0], vec![0.0], Link::Probit).unwrap();
        assert_eq!(linear_predictor(&fit, &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(linear_predictor(&fit, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(linear_predictor(&fit, &[1.0]).is_err());
        let pr = category_probs(&fit, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(pr[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(pr[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn draw_params_degenerate_and_increasing() {
        let fit = OrdinalFit::from_parameters(vec![0.4], vec![-1.0, 0.5], Link::Probit).unwrap();
        let mut rng = stream(1, &[]);
        let d = draw_params(&fit, &mut rng).unwrap();
        assert_eq!(d.beta, fit.beta);
        assert_eq!(d.zeta, fit.zeta);

        let mut wide = fit.clone();
        wide.vcov = DMatrix::identity(3, 3) * 0.5;
        for _ in 0..200 {
            let d = draw_params(&wide, &mut rng).unwrap();
            assert!(d.zeta[0] < d.zeta[1]);
        }
    }

    #[test]
    fn draw_params_mean_matches_fit() {
        let (d, y) = simulate(400, 8, &[0.5, -0.3], &[-0.4, 0.5]);
        let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
        let fit = fit_cumulative(&prob, Link::Probit).unwrap();
        let mut rng = stream(99, &[]);
        let n = 100_000;
        let mut sum = vec![0.0; 4];
        for _ in 0..n {
            let dr = draw_params(&fit, &mut rng).unwrap();
            for (s, v) in sum.iter_mut().zip(dr.beta.iter().chain(&dr.zeta)) {
                *s += v;
            }
        }
        let se = fit.std_errors();
        for j in 0..4 {
            let mean = sum[j] / n as f64;
            assert!((mean - fit.params()[j]).abs() < 4.0 * se[j] / (n as f64).sqrt());
        }
    }
}
