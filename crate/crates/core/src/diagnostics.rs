//! Category profiles of imputed values among missing rows, δ-grid scans and
//! plausibility flags.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{adjust, DeltaSpec};
use crate::data::Dataset;
use crate::design::References;
use crate::dist::Link;
use crate::error::{Error, Result};
use crate::impute::ImputationSet;
use crate::rng::{derive_seed, tag};

pub const MAR_LABEL: &str = "MAR";

/// Mean category distribution of imputed values among missing rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryProfile {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
    pub proportions: Vec<f64>,
    /// Missing cells per copy contributing to the profile.
    pub count: usize,
}

/// Order-independent mean.
fn mean_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn profile_of(copies: &[Vec<u32>], rows: &[usize], k: usize) -> Vec<f64> {
    let per_copy: Vec<Vec<f64>> = copies
        .iter()
        .map(|c| {
            let mut counts = vec![0usize; k];
            for &i in rows {
                counts[c[i] as usize - 1] += 1;
            }
            counts
                .iter()
                .map(|&n| n as f64 / rows.len() as f64)
                .collect()
        })
        .collect();
    (0..k)
        .map(|j| mean_sorted(per_copy.iter().map(|p| p[j]).collect()))
        .collect()
}

/// Overall profile, then one profile per level of `stratum_var` with missing rows.
pub fn missing_category_profile(
    set: &ImputationSet,
    ds: &Dataset,
    scenario: &str,
    stratum_var: Option<&str>,
) -> Result<Vec<CategoryProfile>> {
    set.validate(ds)?;
    if set.missing_rows.is_empty() {
        return Err(Error::InvalidData("no missing rows to profile".into()));
    }
    let k = ds.k() as usize;
    let mut out = vec![CategoryProfile {
        scenario: scenario.to_string(),
        stratum: None,
        proportions: profile_of(&set.copies, &set.missing_rows, k),
        count: set.missing_rows.len(),
    }];
    if let Some(name) = stratum_var {
        let j = ds.covariate_index(name).ok_or_else(|| {
            Error::InvalidArgument(format!("no nominal column `{name}` to stratify by"))
        })?;
        let cov = &ds.covariates()[j];
        for code in 1..=cov.levels {
            let rows: Vec<usize> = set
                .missing_rows
                .iter()
                .copied()
                .filter(|&i| cov.codes[i] == code)
                .collect();
            if rows.is_empty() {
                continue;
            }
            out.push(CategoryProfile {
                scenario: scenario.to_string(),
                stratum: Some(format!("{name}={code}")),
                proportions: profile_of(&set.copies, &rows, k),
                count: rows.len(),
            });
        }
    }
    Ok(out)
}

/// MAR profile followed by the profile of each adjusted scenario.
#[allow(clippy::too_many_arguments)]
pub fn delta_grid_scan(
    ds: &Dataset,
    set: &ImputationSet,
    specs: &[(String, DeltaSpec)],
    link: Link,
    refs: &References,
    seed: u64,
    stratum_var: Option<&str>,
) -> Result<Vec<CategoryProfile>> {
    let mut out = missing_category_profile(set, ds, MAR_LABEL, stratum_var)?;
    let scans: Vec<Result<Vec<CategoryProfile>>> = specs
        .par_iter()
        .enumerate()
        .map(|(idx, (label, spec))| {
            let s = derive_seed(seed, &[tag("grid"), idx as u64]);
            let adjusted = adjust(set, ds, spec, link, refs, s)?;
            missing_category_profile(&adjusted.set, ds, label, stratum_var)
        })
        .collect();
    for s in scans {
        out.extend(s?);
    }
    Ok(out)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FlagKind {
    Degenerate,
    NearMar,
    RuleViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
    pub kind: FlagKind,
    pub detail: String,
}

fn default_tv() -> f64 {
    0.02
}

fn default_degenerate() -> f64 {
    0.995
}

/// Thresholds and user ordering rules, loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlausibilityRules {
    #[serde(default)]
    pub rules: Vec<String>,
    #[serde(default = "default_tv")]
    pub near_mar_tv: f64,
    #[serde(default = "default_degenerate")]
    pub degenerate: f64,
}

impl Default for PlausibilityRules {
    fn default() -> Self {
        Self {
            rules: vec![],
            near_mar_tv: default_tv(),
            degenerate: default_degenerate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Prop(usize),
    Mar(usize),
    Const(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Cmp {
    Lt,
    Le,
    Gt,
    Ge,
}

/// Parsed ordering constraint such as `prop[5] > prop[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    text: String,
    lhs: Vec<Term>,
    cmp: Cmp,
    rhs: Vec<Term>,
}

impl Rule {
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("malformed rule `{text}`: {why}"));
        let ops = [
            ("<=", Cmp::Le),
            (">=", Cmp::Ge),
            ("<", Cmp::Lt),
            (">", Cmp::Gt),
        ];
        let (pos, len, cmp) = ops
            .iter()
            .find_map(|(s, c)| text.find(s).map(|p| (p, s.len(), *c)))
            .ok_or_else(|| bad("no comparison operator"))?;
        let side = |s: &str| -> Result<Vec<Term>> {
            s.split('+')
                .map(|t| {
                    let t = t.trim();
                    let index = |prefix: &str| -> Option<Result<usize>> {
                        let rest = t.strip_prefix(prefix)?;
                        let inner = rest.strip_prefix('[')?.strip_suffix(']')?;
                        Some(
                            inner
                                .trim()
                                .parse::<usize>()
                                .ok()
                                .filter(|&k| k >= 1)
                                .ok_or_else(|| bad("category index must be a positive integer")),
                        )
                    };
                    if let Some(k) = index("prop") {
                        Ok(Term::Prop(k?))
                    } else if let Some(k) = index("mar") {
                        Ok(Term::Mar(k?))
                    } else {
                        t.parse::<f64>()
                            .map(Term::Const)
                            .map_err(|_| bad("unknown term"))
                    }
                })
                .collect()
        };
        let rest = &text[pos + len..];
        if rest.contains(['<', '>']) {
            return Err(bad("more than one comparison"));
        }
        Ok(Self {
            text: text.to_string(),
            lhs: side(&text[..pos])?,
            cmp,
            rhs: side(rest)?,
        })
    }

    fn eval_side(terms: &[Term], prop: &[f64], mar: Option<&[f64]>) -> Result<f64> {
        let get = |v: &[f64], k: usize| {
            v.get(k - 1).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rule references category {k} beyond K = {}",
                    v.len()
                ))
            })
        };
        terms.iter().try_fold(0.0, |acc, t| {
            Ok(acc
                + match *t {
                    Term::Prop(k) => get(prop, k)?,
                    Term::Mar(k) => get(
                        mar.ok_or_else(|| {
                            Error::InvalidArgument(
                                "rule uses mar[] but no MAR profile exists".into(),
                            )
                        })?,
                        k,
                    )?,
                    Term::Const(c) => c,
                })
        })
    }

    pub fn holds(&self, prop: &[f64], mar: Option<&[f64]>) -> Result<bool> {
        let (a, b) = (
            Self::eval_side(&self.lhs, prop, mar)?,
            Self::eval_side(&self.rhs, prop, mar)?,
        );
        Ok(match self.cmp {
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Flag degenerate, near-MAR and rule-violating profiles. MAR profiles are
/// only checked for degeneracy.
pub fn plausibility_flags(
    profiles: &[CategoryProfile],
    rules: &PlausibilityRules,
) -> Result<Vec<Flag>> {
    let parsed: Vec<Rule> = rules
        .rules
        .iter()
        .map(|r| Rule::parse(r))
        .collect::<Result<_>>()?;
    let mar: BTreeMap<Option<String>, &CategoryProfile> = profiles
        .iter()
        .filter(|p| p.scenario == MAR_LABEL)
        .map(|p| (p.stratum.clone(), p))
        .collect();
    let mut flags = Vec::new();
    for p in profiles {
        let flag = |kind, detail: String| Flag {
            scenario: p.scenario.clone(),
            stratum: p.stratum.clone(),
            kind,
            detail,
        };
        if let Some((k, &top)) = p
            .proportions
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .filter(|(_, &v)| v >= rules.degenerate)
        {
            flags.push(flag(
                FlagKind::Degenerate,
                format!("category {} holds {:.4} of the mass", k + 1, top),
            ));
        }
        if p.scenario == MAR_LABEL {
            continue;
        }
        let mar_p = mar.get(&p.stratum).map(|m| m.proportions.as_slice());
        if let Some(m) = mar_p {
            let tv = total_variation(&p.proportions, m);
            if tv < rules.near_mar_tv {
                flags.push(flag(
                    FlagKind::NearMar,
                    format!("total variation {tv:.4} from MAR"),
                ));
            }
        }
        for r in &parsed {
            if !r.holds(&p.proportions, mar_p)? {
                flags.push(flag(FlagKind::RuleViolation, r.text().to_string()));
            }
        }
    }
    Ok(flags)
}

/// Long format: `scenario,stratum,category,proportion,count`.
pub fn write_profiles_long<W: Write>(profiles: &[CategoryProfile], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "stratum", "category", "proportion", "count"])?;
    for p in profiles {
        for (k, v) in p.proportions.iter().enumerate() {
            w.write_record([
                p.scenario.as_str(),
                p.stratum.as_deref().unwrap_or("all"),
                &(k + 1).to_string(),
                &format!("{v:.6}"),
                &p.count.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Wide format: one row per profile with a column per category.
pub fn write_profiles_wide<W: Write>(
    profiles: &[CategoryProfile],
    x1_name: &str,
    writer: W,
) -> Result<()> {
    let k = profiles.first().map_or(0, |p| p.proportions.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        "scenario".to_string(),
        "stratum".to_string(),
        "count".to_string(),
    ];
    header.extend((1..=k).map(|c| format!("{x1_name}{c}")));
    w.write_record(&header)?;
    for p in profiles {
        let mut rec = vec![
            p.scenario.clone(),
            p.stratum.clone().unwrap_or_else(|| "all".into()),
            p.count.to_string(),
        ];
        rec.extend(p.proportions.iter().map(|v| format!("{:.2}", 100.0 * v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prof(scenario: &str, p: &[f64]) -> CategoryProfile {
        CategoryProfile {
            scenario: scenario.into(),
            stratum: None,
            proportions: p.to_vec(),
            count: 10,
        }
    }

    #[test]
    fn benign_and_degenerate() {
        let f = plausibility_flags(&[prof("a", &[1.0 / 3.0; 3])], &PlausibilityRules::default())
            .unwrap();
        assert!(f.is_empty());
        let f = plausibility_flags(
            &[prof("a", &[0.999, 0.001, 0.0])],
            &PlausibilityRules::default(),
        )
        .unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].kind, FlagKind::Degenerate);
    }

    #[test]
    fn rules_and_near_mar() {
        let rules = PlausibilityRules {
            rules: vec![
                "prop[5] > prop[1]".into(),
                "prop[2]+prop[3]+prop[4] < mar[2]+mar[3]+mar[4]".into(),
            ],
            ..Default::default()
        };
        let mar = prof(MAR_LABEL, &[0.25, 0.13, 0.17, 0.01, 0.44]);
        let d1 = prof("d1", &[0.255, 0.125, 0.17, 0.01, 0.44]);
        let d3 = prof("d3", &[0.26, 0.10, 0.12, 0.0, 0.52]);
        let flags = plausibility_flags(&[mar, d1, d3], &rules).unwrap();
        assert!(flags.iter().all(|f| f.scenario == "d1"));
        assert!(flags.iter().any(|f| f.kind == FlagKind::NearMar));
    }

    #[test]
    fn malformed_rules() {
        for bad in [
            "prop[0] > prop[1]",
            "prop[1] ~ prop[2]",
            "foo > 1",
            "prop[1] < prop[2] < prop[3]",
        ] {
            assert!(Rule::parse(bad).is_err(), "{bad}");
        }
        assert!(Rule::parse("prop[1] <= 0.5")
            .unwrap()
            .holds(&[0.5, 0.5], None)
            .unwrap());
        assert!(Rule::parse("mar[1] < 1")
            .unwrap()
            .holds(&[0.5, 0.5], None)
            .is_err());
    }

    #[test]
    fn total_variation_basics() {
        assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    }
}
