//! Dummy-coded design matrices for the two model sides.
//!
//! * the `x1` model regresses the ordinal covariate on the outcome and the
//!   nominal covariates (no intercept; thresholds play that role);
//! * the outcome model regresses the outcome on an intercept, `x1` and the
//!   nominal covariates.
//!
//! Nominal columns use treatment coding with the first category as reference
//! unless a [`References`] override names another one.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Reference-category overrides keyed by column name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct References(pub BTreeMap<String, u32>);

impl References {
    pub fn reference(&self, column: &str) -> u32 {
        self.0.get(column).copied().unwrap_or(1)
    }

    /// Parse `name=code` pairs.
    pub fn parse<'a>(items: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for item in items {
            let (name, code) = item.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("reference `{item}` is not name=code"))
            })?;
            let code = code
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("reference `{item}`: bad code")))?;
            map.insert(name.trim().to_string(), code);
        }
        Ok(Self(map))
    }

    fn validate(&self, ds: &Dataset) -> Result<()> {
        for (name, &code) in &self.0 {
            let levels = if name == ds.x1_name() {
                ds.k()
            } else {
                ds.covariate_index(name)
                    .map(|j| ds.covariates()[j].levels)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("reference for unknown column `{name}`"))
                    })?
            };
            if code < 1 || code > levels {
                return Err(Error::InvalidArgument(format!(
                    "reference {name}={code} outside 1..={levels}"
                )));
            }
        }
        Ok(())
    }
}

/// Dense row-major design matrix with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Design {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    pub fn select(&self, rows: &[usize]) -> Design {
        let mut data = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        Design {
            names: self.names.clone(),
            n: rows.len(),
            p: self.p,
            data,
        }
    }
}

fn push_dummies(out: &mut Vec<f64>, code: u32, levels: u32, reference: u32) {
    for c in (1..=levels).filter(|&c| c != reference) {
        out.push(if c == code { 1.0 } else { 0.0 });
    }
}

fn dummy_names(names: &mut Vec<String>, column: &str, levels: u32, reference: u32) {
    for c in (1..=levels).filter(|&c| c != reference) {
        names.push(format!("{column}_{c}"));
    }
}

/// Predictors of the `x1` model: outcome, then covariate dummies.
pub fn x1_model_design(ds: &Dataset, rows: &[usize], refs: &References) -> Result<Design> {
    refs.validate(ds)?;
    let mut names = vec![ds.outcome_name().to_string()];
    for c in ds.covariates() {
        dummy_names(&mut names, &c.name, c.levels, refs.reference(&c.name));
    }
    let p = names.len();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        data.push(ds.outcome()[i]);
        for c in ds.covariates() {
            push_dummies(&mut data, c.codes[i], c.levels, refs.reference(&c.name));
        }
    }
    Ok(Design {
        names,
        n: rows.len(),
        p,
        data,
    })
}

/// Outcome-model design: intercept, `x1` dummies, covariate dummies.
pub fn outcome_design(
    ds: &Dataset,
    x1: &[u32],
    rows: &[usize],
    refs: &References,
) -> Result<Design> {
    refs.validate(ds)?;
    if x1.len() != ds.n() {
        return Err(Error::InvalidData("x1 column length mismatch".into()));
    }
    let x1_ref = refs.reference(ds.x1_name());
    let mut names = vec!["intercept".to_string()];
    dummy_names(&mut names, ds.x1_name(), ds.k(), x1_ref);
    for c in ds.covariates() {
        dummy_names(&mut names, &c.name, c.levels, refs.reference(&c.name));
    }
    let p = names.len();
    let mut data = Vec::with_capacity(rows.len() * p);
    for &i in rows {
        data.push(1.0);
        push_dummies(&mut data, x1[i], ds.k(), x1_ref);
        for c in ds.covariates() {
            push_dummies(&mut data, c.codes[i], c.levels, refs.reference(&c.name));
        }
    }
    Ok(Design {
        names,
        n: rows.len(),
        p,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_csv, Schema};

    fn ds() -> Dataset {
        let schema: Schema = serde_json::from_str(
            r#"{"outcome": {"name": "y", "kind": "binary"}, "ordinal": {"name": "x1"},
                "nominal": [{"name": "x2"}]}"#,
        )
        .unwrap();
        read_csv("y,x1,x2\n1,1,1\n0,NA,2\n1,3,3\n0,2,2\n".as_bytes(), &schema).unwrap()
    }

    #[test]
    fn outcome_design_uses_first_category_reference() {
        let d = ds();
        let x1 = vec![1, 2, 3, 2];
        let des = outcome_design(&d, &x1, &[0, 1, 2, 3], &References::default()).unwrap();
        assert_eq!(des.names, vec!["intercept", "x1_2", "x1_3", "x2_2", "x2_3"]);
        assert_eq!(des.row(2), &[1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(des.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reference_override() {
        let d = ds();
        let refs = References::parse(["x2=2"]).unwrap();
        let des = x1_model_design(&d, &[0, 1], &refs).unwrap();
        assert_eq!(des.names, vec!["y", "x2_1", "x2_3"]);
        assert_eq!(des.row(0), &[1.0, 1.0, 0.0]);
        assert_eq!(des.row(1), &[0.0, 0.0, 0.0]);
        assert!(x1_model_design(&d, &[0], &References::parse(["x2=7"]).unwrap()).is_err());
    }
}
