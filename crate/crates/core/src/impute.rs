//! Proper multiple imputation of `x1` under MAR.
//!
//! The flat imputer fits the cumulative-link model once on the observed rows,
//! then per copy draws `(β, ζ)` from the asymptotic normal and samples each
//! missing category from the implied probabilities.
//!
//! The hierarchical imputer runs a latent-probit Gibbs sampler with a normal
//! random intercept per cluster. One chain yields all `M` copies, thinned.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_outcome, Dataset};
use crate::design::{x1_model_design, Design, References};
use crate::dist::{normal_cdf, std_normal, truncated_normal, Link};
use crate::error::{Error, Result};
use crate::ordreg::{draw_params, fit_cumulative, probs_at, OrdinalFit, OrdinalProblem};
use crate::rng::{stream, tag};

/// Latent draws beyond this magnitude mean the sampler has diverged.
pub const LATENT_BOUND: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsConfig {
    pub burn_in: usize,
    pub between: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            between: 100,
            seed: 0,
        }
    }
}

/// Parameters behind one imputed copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyProvenance {
    pub copy: usize,
    /// RNG stream path below the master seed.
    pub stream: Vec<u64>,
    pub beta: Vec<f64>,
    pub zeta: Vec<f64>,
    /// Gibbs sweep the copy was taken at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_sd: Option<f64>,
}

/// `M` completed versions of the `x1` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSet {
    pub m: usize,
    pub k: u32,
    pub missing_rows: Vec<usize>,
    pub copies: Vec<Vec<u32>>,
    pub provenance: Vec<CopyProvenance>,
}

impl ImputationSet {
    /// Assemble a set from completed columns, checking them against `ds`.
    pub fn from_copies(
        ds: &Dataset,
        copies: Vec<Vec<u32>>,
        provenance: Vec<CopyProvenance>,
    ) -> Result<Self> {
        if copies.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an imputation set needs M >= 2 copies, got {}",
                copies.len()
            )));
        }
        for (m, c) in copies.iter().enumerate() {
            ds.check_completed(c).map_err(|e| e.in_copy(m))?;
        }
        Ok(Self {
            m: copies.len(),
            k: ds.k(),
            missing_rows: ds.missing_rows(),
            copies,
            provenance,
        })
    }

    /// Verify shape and observed-entry agreement with `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.k != ds.k() || self.missing_rows != ds.missing_rows() || self.copies.len() != self.m
        {
            return Err(Error::InvalidData(
                "imputation set does not match the dataset".into(),
            ));
        }
        for (m, c) in self.copies.iter().enumerate() {
            ds.check_completed(c).map_err(|e| e.in_copy(m))?;
        }
        Ok(())
    }

    /// Imputed values of copy `m`, in `missing_rows` order.
    pub fn imputed(&self, m: usize) -> Vec<u32> {
        self.missing_rows
            .iter()
            .map(|&i| self.copies[m][i])
            .collect()
    }
}

fn check_m(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "M must be at least 2, got {m}"
        )));
    }
    Ok(())
}

/// Smallest `k` with `theta <= zeta[k-1]`, else `K`.
#[inline]
pub fn classify_latent(theta: f64, zeta: &[f64]) -> u32 {
    zeta.iter()
        .position(|&z| theta <= z)
        .map_or(zeta.len() as u32 + 1, |k| k as u32 + 1)
}

/// Inverse-CDF draw from a probability vector over categories `1..=K`.
fn sample_category<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u32 + 1;
        }
    }
    // rounding at the top end
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .map_or(1, |k| k as u32 + 1)
}

fn observed_column(ds: &Dataset) -> Vec<u32> {
    ds.x1().iter().map(|v| v.unwrap_or(0)).collect()
}

fn all_rows(ds: &Dataset) -> Vec<usize> {
    (0..ds.n()).collect()
}

/// Fit the `x1` model on observed rows.
pub fn fit_observed(ds: &Dataset, link: Link, refs: &References) -> Result<(OrdinalFit, Design)> {
    let design = x1_model_design(ds, &all_rows(ds), refs)?;
    let obs = ds.observed_rows();
    let obs_design = design.select(&obs);
    let y: Vec<u32> = obs.iter().map(|&i| ds.x1()[i].expect("observed")).collect();
    let prob = OrdinalProblem::new(&obs_design, &y, ds.k() as usize)?;
    Ok((fit_cumulative(&prob, link)?, design))
}

fn trivial_set(ds: &Dataset, m: usize) -> ImputationSet {
    let col = observed_column(ds);
    ImputationSet {
        m,
        k: ds.k(),
        missing_rows: vec![],
        copies: vec![col; m],
        provenance: vec![],
    }
}

/// Flat proper imputation from the cumulative-link model.
pub fn impute_mar_flat(
    ds: &Dataset,
    m: usize,
    link: Link,
    refs: &References,
    seed: u64,
) -> Result<ImputationSet> {
    check_m(m)?;
    let missing = ds.missing_rows();
    if missing.is_empty() {
        return Ok(trivial_set(ds, m));
    }
    let (fit, design) = fit_observed(ds, link, refs)?;
    let base = observed_column(ds);
    let results: Vec<Result<(Vec<u32>, CopyProvenance)>> = (0..m)
        .into_par_iter()
        .map(|copy| {
            let path = vec![tag("impute-flat"), copy as u64];
            let mut rng = stream(seed, &path);
            let draw = draw_params(&fit, &mut rng).map_err(|e| e.in_copy(copy))?;
            let mut col = base.clone();
            for &i in &missing {
                let eta: f64 = draw
                    .beta
                    .iter()
                    .zip(design.row(i))
                    .map(|(b, x)| b * x)
                    .sum();
                let probs = probs_at(&draw.zeta, eta, link);
                col[i] = sample_category(&probs, &mut rng);
            }
            Ok((
                col,
                CopyProvenance {
                    copy,
                    stream: path,
                    beta: draw.beta,
                    zeta: draw.zeta,
                    sweep: None,
                    cluster_sd: None,
                },
            ))
        })
        .collect();
    let mut copies = Vec::with_capacity(m);
    let mut provenance = Vec::with_capacity(m);
    for r in results {
        let (c, p) = r?;
        copies.push(c);
        provenance.push(p);
    }
    Ok(ImputationSet {
        m,
        k: ds.k(),
        missing_rows: missing,
        copies,
        provenance,
    })
}

struct GibbsState {
    beta: Vec<f64>,
    zeta: Vec<f64>,
    u: Vec<f64>,
    tau2: f64,
    latent: Vec<f64>,
    step: f64,
}

/// Random-intercept latent-probit Gibbs sampler.
pub fn impute_mar_hier(
    ds: &Dataset,
    m: usize,
    gibbs: &GibbsConfig,
    refs: &References,
) -> Result<ImputationSet> {
    check_m(m)?;
    if gibbs.between < 1 {
        return Err(Error::InvalidArgument(
            "gibbs.between must be at least 1".into(),
        ));
    }
    let cluster = ds.cluster().ok_or_else(|| {
        Error::InvalidArgument("hierarchical imputation needs a cluster column".into())
    })?;
    let g_count = cluster.levels as usize;
    if g_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "hierarchical imputation needs at least 2 clusters, got {g_count}"
        )));
    }
    let missing = ds.missing_rows();
    if missing.is_empty() {
        return Ok(trivial_set(ds, m));
    }
    let (init, design) = fit_observed(ds, Link::Probit, refs)?;
    let obs = ds.observed_rows();
    let cat: Vec<usize> = obs
        .iter()
        .map(|&i| ds.x1()[i].expect("observed") as usize)
        .collect();
    let grp: Vec<usize> = (0..ds.n()).map(|i| cluster.codes[i] as usize - 1).collect();
    let p = design.p;
    let k = ds.k() as usize;

    // β | θ, u has covariance (XᵀX)⁻¹ over observed rows
    let xo = design.select(&obs).to_matrix();
    let xtx = xo.transpose() * &xo;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficient("hierarchical imputation design"))?;
    let xtx_inv_l = chol
        .inverse()
        .cholesky()
        .ok_or(Error::RankDeficient("hierarchical imputation design"))?
        .l();
    let mut n_g = vec![0usize; g_count];
    for &i in &obs {
        n_g[grp[i]] += 1;
    }

    let mut rng = stream(gibbs.seed, &[tag("impute-hier")]);
    let mut st = GibbsState {
        beta: init.beta.clone(),
        zeta: init.zeta.clone(),
        u: vec![0.0; g_count],
        tau2: 0.1,
        latent: vec![0.0; obs.len()],
        step: 0.05,
    };
    let eta_obs = |beta: &[f64], r: usize| -> f64 {
        beta.iter()
            .zip(design.row(obs[r]))
            .map(|(b, x)| b * x)
            .sum()
    };

    let total = gibbs.burn_in + (m - 1) * gibbs.between + 1;
    let mut copies = Vec::with_capacity(m);
    let mut provenance = Vec::with_capacity(m);
    let base = observed_column(ds);
    let mut accepted = 0usize;
    let mut proposed = 0usize;

    for sweep in 1..=total {
        // means of observed latents given β and u
        let mu: Vec<f64> = (0..obs.len())
            .map(|r| eta_obs(&st.beta, r) + st.u[grp[obs[r]]])
            .collect();

        // ζ by a joint Metropolis–Hastings step with θ integrated out
        let mut prop = vec![0.0; k - 1];
        for j in 0..k - 1 {
            let lo = if j == 0 {
                f64::NEG_INFINITY
            } else {
                prop[j - 1]
            };
            let hi = if j + 1 < k - 1 {
                st.zeta[j + 1]
            } else {
                f64::INFINITY
            };
            prop[j] = truncated_normal(&mut rng, st.zeta[j], st.step, lo, hi);
        }
        let mut log_ratio = 0.0;
        for r in 0..obs.len() {
            let c = cat[r];
            let bounds = |z: &[f64]| {
                let hi = if c < k { z[c - 1] } else { f64::INFINITY };
                let lo = if c > 1 { z[c - 2] } else { f64::NEG_INFINITY };
                (lo, hi)
            };
            let (l1, h1) = bounds(&prop);
            let (l0, h0) = bounds(&st.zeta);
            let p1 = Link::Probit.interval_mass(l1 - mu[r], h1 - mu[r]);
            let p0 = Link::Probit.interval_mass(l0 - mu[r], h0 - mu[r]);
            log_ratio += p1.ln() - p0.ln();
        }
        for j in 0..k - 1 {
            let s = st.step;
            let hi_cur = if j + 1 < k - 1 {
                st.zeta[j + 1]
            } else {
                f64::INFINITY
            };
            let hi_new = if j + 1 < k - 1 {
                prop[j + 1]
            } else {
                f64::INFINITY
            };
            let lo_cur = if j == 0 {
                f64::NEG_INFINITY
            } else {
                st.zeta[j - 1]
            };
            let lo_new = if j == 0 {
                f64::NEG_INFINITY
            } else {
                prop[j - 1]
            };
            // proposal normalizers: q(ζ'|ζ) over (ζ'_{j-1}, ζ_{j+1}); q(ζ|ζ') over (ζ_{j-1}, ζ'_{j+1})
            let fwd = normal_cdf((hi_cur - st.zeta[j]) / s) - normal_cdf((lo_new - st.zeta[j]) / s);
            let rev = normal_cdf((hi_new - prop[j]) / s) - normal_cdf((lo_cur - prop[j]) / s);
            log_ratio += fwd.ln() - rev.ln();
        }
        proposed += 1;
        if log_ratio.is_finite() && rng.random::<f64>().ln() < log_ratio {
            st.zeta = prop;
            accepted += 1;
        }
        if sweep <= gibbs.burn_in && sweep % 50 == 0 {
            let rate = accepted as f64 / proposed as f64;
            st.step *= (rate - 0.3).exp().clamp(0.5, 2.0);
            accepted = 0;
            proposed = 0;
        }

        // θ | ζ, β, u for observed rows
        for r in 0..obs.len() {
            let c = cat[r];
            let hi = if c < k { st.zeta[c - 1] } else { f64::INFINITY };
            let lo = if c > 1 {
                st.zeta[c - 2]
            } else {
                f64::NEG_INFINITY
            };
            let t = truncated_normal(&mut rng, mu[r], 1.0, lo, hi);
            if !t.is_finite() || t.abs() > LATENT_BOUND {
                return Err(Error::Numeric(format!(
                    "Gibbs sampler diverged at sweep {sweep}"
                )));
            }
            st.latent[r] = t;
        }

        // β | θ, u
        let resid = DVector::from_fn(obs.len(), |r, _| st.latent[r] - st.u[grp[obs[r]]]);
        let mean = chol.solve(&(xo.transpose() * resid));
        let z = DVector::from_fn(p, |_, _| std_normal(&mut rng));
        let beta = mean + &xtx_inv_l * z;
        st.beta = beta.as_slice().to_vec();

        // u_g | θ, β, τ²
        let mut sums = vec![0.0; g_count];
        for r in 0..obs.len() {
            sums[grp[obs[r]]] += st.latent[r] - eta_obs(&st.beta, r);
        }
        for g in 0..g_count {
            let prec = n_g[g] as f64 + 1.0 / st.tau2;
            st.u[g] = sums[g] / prec + std_normal(&mut rng) / prec.sqrt();
        }

        // τ² | u with an IG(0.5, 0.5) prior
        let shape = 0.5 + g_count as f64 / 2.0;
        let scale = 0.5 + st.u.iter().map(|v| v * v).sum::<f64>() / 2.0;
        let gamma: f64 = rand_distr::Distribution::sample(
            &rand_distr::Gamma::new(shape, 1.0 / scale)
                .map_err(|e| Error::Numeric(e.to_string()))?,
            &mut rng,
        );
        st.tau2 = 1.0 / gamma;

        if sweep > gibbs.burn_in && (sweep - gibbs.burn_in - 1).is_multiple_of(gibbs.between) {
            let copy = copies.len();
            let mut col = base.clone();
            for &i in &missing {
                let eta: f64 = st.beta.iter().zip(design.row(i)).map(|(b, x)| b * x).sum();
                let theta = eta + st.u[grp[i]] + std_normal(&mut rng);
                if theta.abs() > LATENT_BOUND {
                    return Err(Error::Numeric(format!(
                        "Gibbs sampler diverged at sweep {sweep}"
                    )));
                }
                col[i] = classify_latent(theta, &st.zeta);
            }
            copies.push(col);
            provenance.push(CopyProvenance {
                copy,
                stream: vec![tag("impute-hier")],
                beta: st.beta.clone(),
                zeta: st.zeta.clone(),
                sweep: Some(sweep),
                cluster_sd: Some(st.tau2.sqrt()),
            });
        }
    }
    debug_assert_eq!(copies.len(), m);
    Ok(ImputationSet {
        m,
        k: ds.k(),
        missing_rows: missing,
        copies,
        provenance,
    })
}

/// Write all copies as one long CSV: `imputation,row` then the dataset columns.
pub fn write_imputations<W: Write>(set: &ImputationSet, ds: &Dataset, writer: W) -> Result<()> {
    set.validate(ds)?;
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "imputation".to_string(),
        "row".to_string(),
        ds.outcome_name().to_string(),
        ds.x1_name().to_string(),
    ];
    header.extend(ds.covariates().iter().map(|c| c.name.clone()));
    if let Some(c) = ds.cluster() {
        header.push(c.name.clone());
    }
    w.write_record(&header)?;
    for (m, col) in set.copies.iter().enumerate() {
        for i in 0..ds.n() {
            let mut rec = vec![
                (m + 1).to_string(),
                (i + 1).to_string(),
                format_outcome(ds.outcome_kind(), ds.outcome()[i]),
                col[i].to_string(),
            ];
            rec.extend(ds.covariates().iter().map(|c| c.codes[i].to_string()));
            if let Some(c) = ds.cluster() {
                rec.push(c.codes[i].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a long CSV written by [`write_imputations`] back against its dataset.
pub fn read_imputations<R: Read>(reader: R, ds: &Dataset) -> Result<ImputationSet> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("imputation file lacks column `{name}`")))
    };
    let (ci, cr, cx) = (col("imputation")?, col("row")?, col(ds.x1_name())?);
    let mut copies: Vec<Vec<u32>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<usize> {
            rec.get(j)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| {
                    Error::InvalidData(format!("imputation file line {}: bad integer", line + 2))
                })
        };
        let (m, row, v) = (parse(ci)?, parse(cr)?, parse(cx)?);
        if m == 0 || row == 0 || row > ds.n() {
            return Err(Error::InvalidData(format!(
                "imputation file line {}: index out of range",
                line + 2
            )));
        }
        if copies.len() < m {
            copies.resize(m, vec![0; ds.n()]);
        }
        copies[m - 1][row - 1] = v as u32;
    }
    ImputationSet::from_copies(ds, copies, vec![])
}

/// Per-copy fitted `x1` model on completed data, used by the adjuster.
pub fn fit_completed(
    ds: &Dataset,
    completed: &[u32],
    link: Link,
    refs: &References,
) -> Result<(OrdinalFit, Design)> {
    ds.check_completed(completed)?;
    let design = x1_model_design(ds, &all_rows(ds), refs)?;
    let prob = OrdinalProblem::new(&design, completed, ds.k() as usize)?;
    Ok((fit_cumulative(&prob, link)?, design))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Nominal, OutcomeKind};

    fn toy(n: usize, miss_every: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, &[]);
        let mut y = Vec::new();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        for i in 0..n {
            let b = (i % 3) as u32 + 1;
            let yy = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            let theta = 0.8 * yy + 0.3 * (b as f64 - 1.0) + std_normal(&mut rng);
            let c = classify_latent(theta, &[-0.5, 0.3, 1.0]);
            y.push(yy);
            x2.push(b);
            x1.push(if i % miss_every == 0 { None } else { Some(c) });
        }
        Dataset::new(
            "y",
            OutcomeKind::Binary,
            y,
            "x1",
            x1,
            4,
            vec![Nominal::new("x2", x2, 3).unwrap()],
            None,
        )
        .unwrap()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_latent(0.0, &[-1.0, 1.0]), 2);
        assert_eq!(classify_latent(5.0, &[-1.0, 1.0]), 3);
        assert_eq!(classify_latent(0.0, &[1.0, -1.0]), 1);
        assert_eq!(classify_latent(-1.0, &[-1.0, 1.0]), 1);
    }

    #[test]
    fn flat_imputation_keeps_observed_and_is_deterministic() {
        let ds = toy(300, 4, 3);
        let a = impute_mar_flat(&ds, 5, Link::Probit, &References::default(), 11).unwrap();
        let b = impute_mar_flat(&ds, 5, Link::Probit, &References::default(), 11).unwrap();
        assert_eq!(a, b);
        a.validate(&ds).unwrap();
        assert_eq!(a.missing_rows.len(), 75);
        assert!(a.copies.windows(2).any(|w| w[0] != w[1]));
        let c = impute_mar_flat(&ds, 5, Link::Probit, &References::default(), 12).unwrap();
        assert_ne!(a.copies, c.copies);
    }

    #[test]
    fn no_missing_rows_gives_identical_copies() {
        let ds = toy(60, 1000, 1)
            .with_x1((0..60).map(|i| Some(i % 4 + 1)).collect())
            .unwrap();
        let set = impute_mar_flat(&ds, 3, Link::Probit, &References::default(), 0).unwrap();
        assert!(set.copies.iter().all(|c| c == &set.copies[0]));
        assert!(impute_mar_flat(&ds, 1, Link::Probit, &References::default(), 0).is_err());
    }

    #[test]
    fn long_csv_round_trip() {
        let ds = toy(40, 5, 2);
        let set = impute_mar_flat(&ds, 3, Link::Logit, &References::default(), 4).unwrap();
        let mut buf = Vec::new();
        write_imputations(&set, &ds, &mut buf).unwrap();
        let back = read_imputations(buf.as_slice(), &ds).unwrap();
        assert_eq!(back.copies, set.copies);
        assert_eq!(back.missing_rows, set.missing_rows);
    }

    #[test]
    fn sample_category_follows_probabilities() {
        let mut rng = stream(5, &[]);
        let probs = [0.1, 0.0, 0.6, 0.3];
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_category(&probs, &mut rng) as usize - 1] += 1;
        }
        assert_eq!(counts[1], 0);
        for (c, p) in counts.iter().zip(probs) {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 4.0 * se + 1e-12);
        }
    }
}
