//! Columnar dataset with one partially observed ordinal covariate.
//!
//! A [`Dataset`] holds the outcome, the ordinal covariate `x1` (codes `1..=K`,
//! `None` when missing), fully observed nominal covariates (codes `1..=L_j`)
//! and an optional cluster column (codes `1..=G`). Datasets are immutable once
//! built; completed copies of `x1` are carried alongside as plain `Vec<u32>`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cell tokens read as missing (case-sensitive).
pub const MISSING_TOKENS: [&str; 2] = ["NA", ""];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    pub kind: OutcomeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub name: String,
    /// Declared number of categories; inferred from the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<u32>,
}

/// JSON schema descriptor naming the role of each CSV column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: OutcomeSpec,
    pub ordinal: CategoricalSpec,
    #[serde(default)]
    pub nominal: Vec<CategoricalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nominal {
    pub name: String,
    pub codes: Vec<u32>,
    pub levels: u32,
}

impl Nominal {
    pub fn new(name: impl Into<String>, codes: Vec<u32>, levels: u32) -> Result<Self> {
        let name = name.into();
        if let Some((row, &c)) = codes.iter().enumerate().find(|(_, &c)| c < 1 || c > levels) {
            return Err(Error::InvalidData(format!(
                "column `{name}` row {row}: unknown category code {c} (levels 1..={levels})"
            )));
        }
        Ok(Self {
            name,
            codes,
            levels,
        })
    }
}

/// References one category of one nominal covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey {
    pub covariate: usize,
    pub code: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    outcome_name: String,
    outcome_kind: OutcomeKind,
    outcome: Vec<f64>,
    x1_name: String,
    x1: Vec<Option<u32>>,
    k: u32,
    covariates: Vec<Nominal>,
    cluster: Option<Nominal>,
}

impl Dataset {
    pub fn new(
        outcome_name: impl Into<String>,
        outcome_kind: OutcomeKind,
        outcome: Vec<f64>,
        x1_name: impl Into<String>,
        x1: Vec<Option<u32>>,
        k: u32,
        covariates: Vec<Nominal>,
        cluster: Option<Nominal>,
    ) -> Result<Self> {
        let n = outcome.len();
        let x1_name = x1_name.into();
        if k <= 2 {
            return Err(Error::InvalidData(format!(
                "ordinal covariate `{x1_name}` needs K > 2 categories, got {k}"
            )));
        }
        if x1.len() != n {
            return Err(Error::InvalidData(
                "x1 length differs from outcome length".into(),
            ));
        }
        for c in covariates.iter().chain(cluster.as_ref()) {
            if c.codes.len() != n {
                return Err(Error::InvalidData(format!(
                    "column `{}` has the wrong length",
                    c.name
                )));
            }
        }
        if let Some((row, v)) = x1
            .iter()
            .enumerate()
            .find_map(|(i, v)| v.filter(|&c| c < 1 || c > k).map(|c| (i, c)))
        {
            return Err(Error::InvalidData(format!(
                "`{x1_name}` row {row}: unknown category code {v} (levels 1..={k})"
            )));
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidData(
                "outcome contains non-finite values".into(),
            ));
        }
        if outcome_kind == OutcomeKind::Binary && outcome.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidData(
                "binary outcome must be coded 0/1".into(),
            ));
        }
        if let Some(cl) = &cluster {
            let seen: BTreeSet<u32> = cl.codes.iter().copied().collect();
            if seen.len() as u32 != cl.levels && n > 0 {
                return Err(Error::InvalidData(format!(
                    "cluster labels of `{}` are not contiguous 1..={}",
                    cl.name, cl.levels
                )));
            }
        }
        Ok(Self {
            outcome_name: outcome_name.into(),
            outcome_kind,
            outcome,
            x1_name,
            x1,
            k,
            covariates,
            cluster,
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of ordinal categories `K`.
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn x1(&self) -> &[Option<u32>] {
        &self.x1
    }

    pub fn x1_name(&self) -> &str {
        &self.x1_name
    }

    pub fn covariates(&self) -> &[Nominal] {
        &self.covariates
    }

    pub fn cluster(&self) -> Option<&Nominal> {
        self.cluster.as_ref()
    }

    pub fn is_missing(&self, row: usize) -> bool {
        self.x1[row].is_none()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.x1[i].is_none()).collect()
    }

    pub fn observed_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.x1[i].is_some()).collect()
    }

    pub fn n_missing(&self) -> usize {
        self.x1.iter().filter(|v| v.is_none()).count()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    /// Same data with a new `x1` column (e.g. after masking or un-masking).
    pub fn with_x1(&self, x1: Vec<Option<u32>>) -> Result<Self> {
        Self::new(
            self.outcome_name.clone(),
            self.outcome_kind,
            self.outcome.clone(),
            self.x1_name.clone(),
            x1,
            self.k,
            self.covariates.clone(),
            self.cluster.clone(),
        )
    }

    /// Subset of rows, order preserved.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick_nom = |c: &Nominal| Nominal {
            name: c.name.clone(),
            codes: rows.iter().map(|&i| c.codes[i]).collect(),
            levels: c.levels,
        };
        let cluster = match &self.cluster {
            Some(cl) => {
                // relabel so that cluster codes stay contiguous in the subset
                let present: BTreeSet<u32> = rows.iter().map(|&i| cl.codes[i]).collect();
                let map: std::collections::BTreeMap<u32, u32> = present
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| (c, j as u32 + 1))
                    .collect();
                Some(Nominal {
                    name: cl.name.clone(),
                    codes: rows.iter().map(|&i| map[&cl.codes[i]]).collect(),
                    levels: present.len() as u32,
                })
            }
            None => None,
        };
        Self::new(
            self.outcome_name.clone(),
            self.outcome_kind,
            rows.iter().map(|&i| self.outcome[i]).collect(),
            self.x1_name.clone(),
            rows.iter().map(|&i| self.x1[i]).collect(),
            self.k,
            self.covariates.iter().map(pick_nom).collect(),
            cluster,
        )
    }

    /// Check that `completed` agrees with every observed `x1` entry and is in range.
    pub fn check_completed(&self, completed: &[u32]) -> Result<()> {
        if completed.len() != self.n() {
            return Err(Error::InvalidData(format!(
                "completed column has {} rows, dataset has {}",
                completed.len(),
                self.n()
            )));
        }
        for (i, (&c, obs)) in completed.iter().zip(&self.x1).enumerate() {
            if c < 1 || c > self.k {
                return Err(Error::InvalidData(format!(
                    "completed x1 row {i}: code {c} out of range"
                )));
            }
            if let Some(o) = obs {
                if *o != c {
                    return Err(Error::InvalidData(format!(
                        "completed x1 row {i} changes observed value {o} to {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parse a stratum reference of the form `name=code`.
    pub fn stratum_key(&self, spec: &str) -> Result<StratumKey> {
        let (name, code) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("stratum `{spec}` is not of the form name=code"))
        })?;
        let covariate = self.covariate_index(name.trim()).ok_or_else(|| {
            Error::InvalidArgument(format!("stratum `{spec}`: no nominal column `{name}`"))
        })?;
        let code: u32 = code
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("stratum `{spec}`: bad category code")))?;
        let levels = self.covariates[covariate].levels;
        if code < 1 || code > levels {
            return Err(Error::InvalidArgument(format!(
                "stratum `{spec}`: category {code} absent (levels 1..={levels})"
            )));
        }
        Ok(StratumKey { covariate, code })
    }

    pub fn stratum_label(&self, key: StratumKey) -> String {
        format!("{}={}", self.covariates[key.covariate].name, key.code)
    }

    pub fn in_stratum(&self, row: usize, key: StratumKey) -> bool {
        self.covariates[key.covariate].codes[row] == key.code
    }
}

/// Fraction of rows with `x1` missing, optionally within one stratum.
pub fn missing_rate(ds: &Dataset, stratum: Option<StratumKey>) -> Result<f64> {
    let (mut total, mut miss) = (0usize, 0usize);
    for i in 0..ds.n() {
        if stratum.is_none_or(|k| ds.in_stratum(i, k)) {
            total += 1;
            if ds.is_missing(i) {
                miss += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "missing_rate over an empty stratum".into(),
        ));
    }
    Ok(miss as f64 / total as f64)
}

fn is_missing_token(s: &str) -> bool {
    MISSING_TOKENS.contains(&s)
}

fn parse_code(column: &str, row: usize, s: &str) -> Result<u32> {
    s.trim()
        .parse::<u32>()
        .ok()
        .filter(|&c| c >= 1)
        .ok_or_else(|| {
            Error::InvalidData(format!(
                "column `{column}` row {row}: unknown category code `{s}`"
            ))
        })
}

/// Codes must be dense: every level from 1 to the number of levels is observed.
fn check_dense(column: &str, codes: impl Iterator<Item = u32>, levels: u32) -> Result<()> {
    let seen: BTreeSet<u32> = codes.collect();
    if let Some(gap) = (1..=levels).find(|c| !seen.contains(c)) {
        return Err(Error::InvalidData(format!(
            "column `{column}`: category {gap} never observed (codes must be dense 1..={levels})"
        )));
    }
    Ok(())
}

/// Load a CSV (RFC-4180, header row) according to `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in CSV header")))
    };
    let y_col = col(&schema.outcome.name)?;
    let x1_col = col(&schema.ordinal.name)?;
    let nom_cols: Vec<usize> = schema
        .nominal
        .iter()
        .map(|s| col(&s.name))
        .collect::<Result<_>>()?;
    let cl_col = schema.cluster.as_deref().map(col).transpose()?;

    let mut y = Vec::new();
    let mut x1 = Vec::new();
    let mut noms: Vec<Vec<u32>> = vec![Vec::new(); nom_cols.len()];
    let mut cl = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let non_x1 = |c: usize, name: &str| -> Result<&str> {
            let v = field(c);
            if is_missing_token(v) {
                Err(Error::NonX1Missing {
                    column: name.to_string(),
                    row,
                })
            } else {
                Ok(v)
            }
        };
        let yv = non_x1(y_col, &schema.outcome.name)?;
        let yv: f64 = yv.trim().parse().map_err(|_| {
            Error::InvalidData(format!("outcome row {row}: `{yv}` is not a number"))
        })?;
        y.push(yv);
        let xv = field(x1_col);
        x1.push(if is_missing_token(xv) {
            None
        } else {
            Some(parse_code(&schema.ordinal.name, row, xv)?)
        });
        for (j, (&c, spec)) in nom_cols.iter().zip(&schema.nominal).enumerate() {
            noms[j].push(parse_code(&spec.name, row, non_x1(c, &spec.name)?)?);
        }
        if let (Some(c), Some(name)) = (cl_col, schema.cluster.as_deref()) {
            cl.push(parse_code(name, row, non_x1(c, name)?)?);
        }
    }

    let observed_max = x1.iter().flatten().copied().max().unwrap_or(0);
    let k = schema.ordinal.levels.unwrap_or(observed_max);
    if observed_max > k {
        return Err(Error::InvalidData(format!(
            "`{}`: unknown category code {observed_max} (declared levels {k})",
            schema.ordinal.name
        )));
    }
    if k <= 2 {
        return Err(Error::InvalidData(format!(
            "ordinal covariate `{}` needs K > 2 categories, got {k}",
            schema.ordinal.name
        )));
    }
    check_dense(&schema.ordinal.name, x1.iter().flatten().copied(), k)?;

    let mut covariates = Vec::with_capacity(noms.len());
    for (codes, spec) in noms.into_iter().zip(&schema.nominal) {
        let max = codes.iter().copied().max().unwrap_or(0);
        let levels = spec.levels.unwrap_or(max);
        if max > levels {
            return Err(Error::InvalidData(format!(
                "`{}`: unknown category code {max} (declared levels {levels})",
                spec.name
            )));
        }
        check_dense(&spec.name, codes.iter().copied(), levels)?;
        covariates.push(Nominal::new(spec.name.clone(), codes, levels)?);
    }
    let cluster = match schema.cluster.as_deref() {
        Some(name) => {
            let levels = cl.iter().copied().max().unwrap_or(0);
            Some(Nominal::new(name, cl, levels)?)
        }
        None => None,
    };
    Dataset::new(
        schema.outcome.name.clone(),
        schema.outcome.kind,
        y,
        schema.ordinal.name.clone(),
        x1,
        k,
        covariates,
        cluster,
    )
}

pub(crate) fn format_outcome(kind: OutcomeKind, y: f64) -> String {
    match kind {
        OutcomeKind::Binary => format!("{}", y as u8),
        OutcomeKind::Continuous => format!("{y}"),
    }
}

/// Write the dataset as CSV; missing `x1` cells are written as `NA`.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![ds.outcome_name.clone(), ds.x1_name.clone()];
    header.extend(ds.covariates.iter().map(|c| c.name.clone()));
    if let Some(cl) = &ds.cluster {
        header.push(cl.name.clone());
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec = vec![
            format_outcome(ds.outcome_kind, ds.outcome[i]),
            ds.x1[i].map_or_else(|| "NA".to_string(), |v| v.to_string()),
        ];
        rec.extend(ds.covariates.iter().map(|c| c.codes[i].to_string()));
        if let Some(cl) = &ds.cluster {
            rec.push(cl.codes[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(ds, File::create(path)?)
}

/// Schema matching what [`write_csv`] emits for this dataset.
pub fn schema_of(ds: &Dataset) -> Schema {
    Schema {
        outcome: OutcomeSpec {
            name: ds.outcome_name.clone(),
            kind: ds.outcome_kind,
        },
        ordinal: CategoricalSpec {
            name: ds.x1_name.clone(),
            levels: Some(ds.k),
        },
        nominal: ds
            .covariates
            .iter()
            .map(|c| CategoricalSpec {
                name: c.name.clone(),
                levels: Some(c.levels),
            })
            .collect(),
        cluster: ds.cluster.as_ref().map(|c| c.name.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> Schema {
        serde_json::from_str(
            r#"{"outcome": {"name": "y", "kind": "binary"},
                "ordinal": {"name": "x1"},
                "nominal": [{"name": "x2"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn four_row_file_encodes_mask() {
        let csv = "y,x1,x2\n1,1,1\n0,NA,2\n1,3,1\n0,2,2\n";
        let ds = read_csv(csv.as_bytes(), &schema3()).unwrap();
        assert_eq!(ds.n(), 4);
        assert_eq!(ds.k(), 3);
        let mask: Vec<u8> = (0..4).map(|i| ds.is_missing(i) as u8).collect();
        assert_eq!(mask, vec![0, 1, 0, 0]);
        assert_eq!(ds.x1()[2], Some(3));
    }

    #[test]
    fn empty_cell_is_missing_but_lowercase_na_is_not() {
        let ok = "y,x1,x2\n1,1,1\n0,,2\n1,3,1\n0,2,2\n";
        assert!(read_csv(ok.as_bytes(), &schema3()).unwrap().is_missing(1));
        let bad = "y,x1,x2\n1,1,1\n0,na,2\n1,3,1\n0,2,2\n";
        assert!(matches!(
            read_csv(bad.as_bytes(), &schema3()),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn covariate_missingness_is_rejected() {
        let csv = "y,x1,x2\n1,1,NA\n0,2,2\n1,3,1\n";
        let err = read_csv(csv.as_bytes(), &schema3()).unwrap_err();
        assert!(matches!(err, Error::NonX1Missing { ref column, row: 0 } if column == "x2"));
        assert!(err.to_string().contains("non-x1 missingness"));
        let csv = "y,x1,x2\nNA,1,1\n0,2,2\n1,3,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), &schema3()),
            Err(Error::NonX1Missing { .. })
        ));
    }

    #[test]
    fn gaps_and_small_k_are_rejected() {
        let gap = "y,x1,x2\n1,1,1\n0,3,2\n1,4,1\n";
        assert!(matches!(
            read_csv(gap.as_bytes(), &schema3()),
            Err(Error::InvalidData(_))
        ));
        let k2 = "y,x1,x2\n1,1,1\n0,2,2\n";
        assert!(read_csv(k2.as_bytes(), &schema3())
            .unwrap_err()
            .to_string()
            .contains("K > 2"));
        let mut s = schema3();
        s.ordinal.levels = Some(3);
        let unknown = "y,x1,x2\n1,1,1\n0,2,2\n1,3,1\n0,4,2\n";
        assert!(read_csv(unknown.as_bytes(), &s)
            .unwrap_err()
            .to_string()
            .contains("unknown category"));
    }

    #[test]
    fn missing_rate_edge_cases() {
        let none = "y,x1,x2\n1,1,1\n0,2,2\n1,3,1\n";
        let ds = read_csv(none.as_bytes(), &schema3()).unwrap();
        assert_eq!(missing_rate(&ds, None).unwrap(), 0.0);
        let mut s = schema3();
        s.ordinal.levels = Some(3);
        // all missing is allowed only when the dense check has nothing to check against
        let ds_all = ds.with_x1(vec![None; 3]).unwrap();
        assert_eq!(missing_rate(&ds_all, None).unwrap(), 1.0);
        let key = ds.stratum_key("x2=2").unwrap();
        assert_eq!(missing_rate(&ds_all, Some(key)).unwrap(), 1.0);
        assert!(ds.stratum_key("x2=3").is_err());
        assert!(ds.stratum_key("x9=1").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "y,x1,x2,clus\n1,1,1,1\n0,NA,2,2\n1,3,1,2\n0,2,2,1\n";
        let mut s = schema3();
        s.cluster = Some("clus".into());
        let ds = read_csv(csv.as_bytes(), &s).unwrap();
        let mut out = Vec::new();
        write_csv(&ds, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), csv);
    }

    #[test]
    fn non_contiguous_cluster_rejected() {
        let csv = "y,x1,x2,clus\n1,1,1,1\n0,2,2,3\n1,3,1,3\n";
        let mut s = schema3();
        s.cluster = Some("clus".into());
        assert!(read_csv(csv.as_bytes(), &s).is_err());
    }

    #[test]
    fn select_rows_relabels_clusters() {
        let csv = "y,x1,x2,clus\n1,1,1,1\n0,2,2,2\n1,3,1,3\n";
        let mut s = schema3();
        s.cluster = Some("clus".into());
        let ds = read_csv(csv.as_bytes(), &s).unwrap();
        let sub = ds.select_rows(&[0, 2]).unwrap();
        assert_eq!(sub.cluster().unwrap().codes, vec![1, 2]);
        assert_eq!(sub.cluster().unwrap().levels, 2);
    }
}
