//! Delta adjustment of MAR imputations towards an MNAR scenario.
//!
//! Per completed copy: refit the cumulative-link model on all rows, perturb
//! each missing row's linear predictor with `N(0, σ²)` noise, shift the fitted
//! thresholds by the row's δ vector and reclassify with the smallest-k rule.
//! Shifted thresholds are never reordered.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StratumKey};
use crate::design::References;
use crate::dist::{std_normal, Link};
use crate::error::{Error, Result};
use crate::impute::{classify_latent, fit_completed, ImputationSet};
use crate::rng::{stream, tag};

pub const DEFAULT_SIGMA2: f64 = 1.2;

fn default_sigma2() -> f64 {
    DEFAULT_SIGMA2
}

/// Sensitivity vector(s) plus the latent perturbation variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaSpec {
    pub default: Vec<f64>,
    /// Keys of the form `column=code`, all on the same nominal column.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub strata: BTreeMap<String, Vec<f64>>,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
}

impl DeltaSpec {
    pub fn uniform(delta: Vec<f64>) -> Self {
        Self {
            default: delta,
            strata: BTreeMap::new(),
            sigma2: DEFAULT_SIGMA2,
        }
    }

    pub fn zero(k: u32) -> Self {
        Self::uniform(vec![0.0; k as usize - 1])
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Validate against `ds` and map every row to its δ vector.
    pub fn resolve(&self, ds: &Dataset) -> Result<ResolvedDelta> {
        let len = ds.k() as usize - 1;
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        let check = |label: &str, v: &[f64]| -> Result<()> {
            if v.len() != len {
                return Err(Error::InvalidArgument(format!(
                    "delta `{label}` has length {}, expected K-1 = {len}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "delta `{label}` is not finite"
                )));
            }
            Ok(())
        };
        check("default", &self.default)?;
        let mut keys: Vec<(StratumKey, String)> = Vec::new();
        for (label, v) in &self.strata {
            check(label, v)?;
            keys.push((ds.stratum_key(label)?, label.clone()));
        }
        if let Some((first, _)) = keys.first() {
            if keys.iter().any(|(k, _)| k.covariate != first.covariate) {
                return Err(Error::InvalidArgument(
                    "delta strata must all refer to the same nominal column".into(),
                ));
            }
        }
        let mut vectors = vec![self.default.clone()];
        let mut labels = vec!["default".to_string()];
        let mut by_code: BTreeMap<u32, usize> = BTreeMap::new();
        for (key, label) in &keys {
            by_code.insert(key.code, vectors.len());
            vectors.push(self.strata[label].clone());
            labels.push(label.clone());
        }
        let covariate = keys.first().map(|(k, _)| k.covariate);
        let row_index = (0..ds.n())
            .map(|i| {
                covariate
                    .and_then(|c| by_code.get(&ds.covariates()[c].codes[i]).copied())
                    .unwrap_or(0)
            })
            .collect();
        Ok(ResolvedDelta {
            labels,
            vectors,
            row_index,
            sigma2: self.sigma2,
        })
    }
}

/// A [`DeltaSpec`] bound to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedDelta {
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// Index into `vectors` for every dataset row.
    pub row_index: Vec<usize>,
    pub sigma2: f64,
}

impl ResolvedDelta {
    pub fn for_row(&self, row: usize) -> &[f64] {
        &self.vectors[self.row_index[row]]
    }
}

/// Thresholds and latent draws behind one adjusted copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopyAdjustment {
    pub copy: usize,
    pub beta_hat: Vec<f64>,
    pub zeta_hat: Vec<f64>,
    /// Shifted thresholds keyed by stratum label (`default` for unmatched rows).
    pub zeta_star: BTreeMap<String, Vec<f64>>,
    /// Perturbed latents of the missing rows, in `missing_rows` order.
    pub theta_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedImputationSet {
    pub set: ImputationSet,
    pub spec: DeltaSpec,
    pub link: Link,
    pub copies: Vec<CopyAdjustment>,
}

impl AdjustedImputationSet {
    /// Audit record with the per-copy shifted thresholds only.
    pub fn thresholds_json(&self) -> serde_json::Value {
        let copies: Vec<_> = self
            .copies
            .iter()
            .map(|c| {
                serde_json::json!({
                    "copy": c.copy + 1,
                    "zeta_hat": c.zeta_hat,
                    "zeta_star": c.zeta_star,
                })
            })
            .collect();
        serde_json::json!({ "spec": self.spec, "link": self.link, "copies": copies })
    }
}

/// Smallest-k classification of each latent against `ζ̂ + δ`.
pub fn reclassify(thetas: &[f64], zeta_hat: &[f64], delta: &[f64]) -> Vec<u32> {
    let shifted: Vec<f64> = zeta_hat.iter().zip(delta).map(|(z, d)| z + d).collect();
    thetas
        .iter()
        .map(|&t| classify_latent(t, &shifted))
        .collect()
}

/// Apply the delta adjustment to every copy of `set`.
pub fn adjust(
    set: &ImputationSet,
    ds: &Dataset,
    spec: &DeltaSpec,
    link: Link,
    refs: &References,
    seed: u64,
) -> Result<AdjustedImputationSet> {
    set.validate(ds)?;
    let resolved = spec.resolve(ds)?;
    let sd = resolved.sigma2.sqrt();
    let results: Vec<Result<(Vec<u32>, CopyAdjustment)>> = set
        .copies
        .par_iter()
        .enumerate()
        .map(|(m, completed)| {
            let mut col = completed.clone();
            if set.missing_rows.is_empty() {
                return Ok((
                    col,
                    CopyAdjustment {
                        copy: m,
                        beta_hat: vec![],
                        zeta_hat: vec![],
                        zeta_star: BTreeMap::new(),
                        theta_star: vec![],
                    },
                ));
            }
            let (fit, design) =
                fit_completed(ds, completed, link, refs).map_err(|e| e.in_copy(m))?;
            let mut rng = stream(seed, &[tag("adjust"), m as u64]);
            let mut thetas = Vec::with_capacity(set.missing_rows.len());
            for &i in &set.missing_rows {
                let eta: f64 = fit.beta.iter().zip(design.row(i)).map(|(b, x)| b * x).sum();
                let theta = eta + sd * std_normal(&mut rng);
                let delta = resolved.for_row(i);
                col[i] = reclassify(&[theta], &fit.zeta, delta)[0];
                thetas.push(theta);
            }
            let zeta_star = resolved
                .labels
                .iter()
                .zip(&resolved.vectors)
                .map(|(l, d)| {
                    (
                        l.clone(),
                        fit.zeta.iter().zip(d).map(|(z, d)| z + d).collect(),
                    )
                })
                .collect();
            Ok((
                col,
                CopyAdjustment {
                    copy: m,
                    beta_hat: fit.beta,
                    zeta_hat: fit.zeta,
                    zeta_star,
                    theta_star: thetas,
                },
            ))
        })
        .collect();
    let mut copies = Vec::with_capacity(set.m);
    let mut audit = Vec::with_capacity(set.m);
    for r in results {
        let (c, a) = r?;
        copies.push(c);
        audit.push(a);
    }
    Ok(AdjustedImputationSet {
        set: ImputationSet {
            m: set.m,
            k: set.k,
            missing_rows: set.missing_rows.clone(),
            copies,
            provenance: set.provenance.clone(),
        },
        spec: spec.clone(),
        link,
        copies: audit,
    })
}
