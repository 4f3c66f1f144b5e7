//! Simulation designs, MNAR masking and the Monte Carlo harness comparing
//! full-data, complete-case, MAR and delta-adjusted analyses.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjust::{adjust, DeltaSpec};
use crate::analysis::{fit_copies, fit_outcome, pool_rubin, ModelKind, OutcomeFit};
use crate::data::{Dataset, Nominal, OutcomeKind};
use crate::design::References;
use crate::diagnostics::{missing_category_profile, total_variation, CategoryProfile, MAR_LABEL};
use crate::dist::{logistic_cdf, normal_quantile, std_normal, t_quantile, Link};
use crate::error::{Error, Result};
use crate::impute::{
    fit_completed, fit_observed, impute_mar_flat, impute_mar_hier, GibbsConfig, ImputationSet,
};
use crate::rng::{derive_seed, stream, tag, StreamRng};

pub const SIMULATED: &str = "SIMULATED";
pub const CC: &str = "CC";
pub const MAR: &str = "MAR";

/// Replications may fail at most this fraction before a run aborts.
pub const MAX_FAILURE_RATE: f64 = 0.02;

pub const OUTCOME: &str = "Y";
pub const ORDINAL: &str = "X1";
pub const NOMINAL: &str = "X2";
pub const CLUSTER: &str = "cluster";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignKind {
    NonhierExtreme,
    HierExtreme,
    NonhierIntermediate,
    NonhierContinuous,
}

impl std::str::FromStr for DesignKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonhier-extreme" => Ok(Self::NonhierExtreme),
            "hier-extreme" => Ok(Self::HierExtreme),
            "nonhier-intermediate" => Ok(Self::NonhierIntermediate),
            "nonhier-continuous" => Ok(Self::NonhierContinuous),
            _ => Err(Error::InvalidArgument(format!("unknown design `{s}`"))),
        }
    }
}

impl DesignKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::NonhierExtreme => "nonhier-extreme",
            Self::HierExtreme => "hier-extreme",
            Self::NonhierIntermediate => "nonhier-intermediate",
            Self::NonhierContinuous => "nonhier-continuous",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, Self::HierExtreme)
    }

    pub fn is_continuous(self) -> bool {
        matches!(self, Self::NonhierContinuous)
    }
}

/// Outcome-model coefficients with category 1 as reference for both factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueBeta {
    pub intercept: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

impl TrueBeta {
    /// Coefficients in outcome-design order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = vec![self.intercept];
        v.extend(&self.x1);
        v.extend(&self.x2);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeCondition {
    #[serde(rename = "Y=1")]
    One,
    #[serde(rename = "Y=0")]
    Zero,
    #[serde(rename = "Y>0")]
    Positive,
    #[serde(rename = "Y<0")]
    Negative,
}

impl OutcomeCondition {
    pub fn holds(self, y: f64) -> bool {
        match self {
            Self::One => y == 1.0,
            Self::Zero => y == 0.0,
            Self::Positive => y > 0.0,
            Self::Negative => y < 0.0,
        }
    }

    fn overlaps(self, other: Self) -> bool {
        [-1.0, 0.0, 0.5, 1.0, 2.0]
            .iter()
            .any(|&y| self.holds(y) && other.holds(y))
    }
}

/// Masks a share of `x1 == target` cells among rows meeting the outcome condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnarRule {
    /// `column=code`; every row when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum: Option<String>,
    pub outcome: OutcomeCondition,
    pub target: u32,
    pub proportion: f64,
}

impl MnarRule {
    pub fn new(
        stratum: Option<&str>,
        outcome: OutcomeCondition,
        target: u32,
        proportion: f64,
    ) -> Self {
        Self {
            stratum: stratum.map(str::to_string),
            outcome,
            target,
            proportion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingMode {
    /// Every eligible cell masked independently.
    #[default]
    Bernoulli,
    /// Exactly `round(p · eligible)` cells masked, chosen uniformly.
    Exact,
}

/// One delta-adjusted method of the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub delta: DeltaSpec,
}

fn default_link() -> Link {
    Link::Probit
}

fn default_gibbs() -> GibbsSettings {
    GibbsSettings {
        burn_in: 1000,
        between: 100,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GibbsSettings {
    pub burn_in: usize,
    pub between: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub design: DesignKind,
    pub n: usize,
    /// Number of clusters (hierarchical design only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_size: Option<usize>,
    pub beta: TrueBeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_sd: Option<f64>,
    /// Residual SD of the continuous outcome.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<f64>,
    /// Multinomial logits of `x1` given `X2`: one row per category, one column per `X2` level.
    pub generator: Vec<Vec<f64>>,
    pub masking: Vec<MnarRule>,
    #[serde(default)]
    pub masking_mode: MaskingMode,
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    pub r: usize,
    pub m: usize,
    pub seed: u64,
    #[serde(default = "default_link")]
    pub link: Link,
    #[serde(default = "default_gibbs")]
    pub gibbs: GibbsSettings,
}

/// Calibrated generator logits for the extreme-category designs with K = 5.
pub const EXTREME_GENERATOR_K5: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [-3.89, 2.0, -12.0, 0.28],
    [-10.82, -0.08, -0.28, 1.92],
    [-12.0, 3.56, -1.61, -0.13],
    [-1.58, -2.87, 0.03, 2.56],
];

/// Generator logits for the hierarchical design with K = 3.
pub const EXTREME_GENERATOR_K3: [[f64; 4]; 3] = [
    [0.0, 0.0, 0.0, 0.0],
    [-0.9716, -0.5871, -0.5563, -0.5865],
    [-0.7279, -1.4144, -1.008, -1.4198],
];

/// Generator logits favouring categories 2 and 4.
pub const INTERMEDIATE_GENERATOR_K5: [[f64; 4]; 5] = [
    [0.0, 0.0, 0.0, 0.0],
    [1.1, 0.9, 1.2, 1.0],
    [0.1, 0.2, 0.0, 0.1],
    [1.0, 1.2, 0.9, 1.1],
    [0.0, -0.1, 0.1, 0.0],
];

fn rows_of<const K: usize>(g: &[[f64; 4]; K]) -> Vec<Vec<f64>> {
    g.iter().map(|r| r.to_vec()).collect()
}

fn uniform(label: &str, delta: Vec<f64>) -> Scenario {
    Scenario {
        label: label.into(),
        delta: DeltaSpec::uniform(delta),
    }
}

fn by_stratum(label: &str, vectors: [[f64; 2]; 4]) -> Scenario {
    let mut spec = DeltaSpec::zero(3);
    for (j, v) in vectors.iter().enumerate() {
        spec.strata
            .insert(format!("{NOMINAL}={}", j + 1), v.to_vec());
    }
    Scenario {
        label: label.into(),
        delta: spec,
    }
}

impl ScenarioConfig {
    /// Shipped default for each design.
    pub fn preset(design: DesignKind) -> Self {
        use OutcomeCondition::*;
        let extreme_beta = TrueBeta {
            intercept: -1.5,
            x1: vec![1.0, -2.0, 1.5, 2.0],
            x2: vec![2.0, 1.0, 2.0],
        };
        let extreme_scenarios = vec![
            uniform("MNAR1", vec![0.0; 4]),
            uniform("MNAR2", vec![0.0, 0.0, 0.0, -1.0]),
            uniform("MNAR3", vec![0.0, 0.0, 0.0, -2.0]),
        ];
        let base = Self {
            design,
            n: 2000,
            clusters: None,
            cluster_size: None,
            beta: extreme_beta,
            random_sd: None,
            noise_sd: None,
            generator: rows_of(&EXTREME_GENERATOR_K5),
            masking: vec![
                MnarRule::new(None, One, 1, 0.3),
                MnarRule::new(None, Zero, 5, 0.3),
            ],
            masking_mode: MaskingMode::Bernoulli,
            scenarios: extreme_scenarios,
            r: 1000,
            m: 10,
            seed: 20240,
            link: Link::Probit,
            gibbs: default_gibbs(),
        };
        match design {
            DesignKind::NonhierExtreme => base,
            DesignKind::HierExtreme => {
                let d1 = [0.5, 0.0];
                let d2 = [0.0, -0.5];
                let d3 = [0.0, -1.5];
                let d4 = [0.0, -2.0];
                let rates = [(0.2, 0.3), (0.1, 0.4), (0.4, 0.1), (0.1, 0.3)];
                let mut masking = Vec::new();
                for (j, (a, b)) in rates.iter().enumerate() {
                    let s = format!("{NOMINAL}={}", j + 1);
                    masking.push(MnarRule::new(Some(&s), One, 1, *a));
                    masking.push(MnarRule::new(Some(&s), Zero, 3, *b));
                }
                Self {
                    clusters: Some(10),
                    cluster_size: Some(200),
                    beta: TrueBeta {
                        intercept: -1.0,
                        x1: vec![1.0, -2.0],
                        x2: vec![2.0, 1.0, 2.0],
                    },
                    random_sd: Some(0.45),
                    generator: rows_of(&EXTREME_GENERATOR_K3),
                    masking,
                    scenarios: vec![
                        by_stratum("MNAR1", [d4, d3, d1, d3]),
                        by_stratum("MNAR2", [d2, d4, d1, d4]),
                        by_stratum("MNAR3", [d4, d4, d4, d4]),
                    ],
                    r: 500,
                    ..base
                }
            }
            DesignKind::NonhierIntermediate => Self {
                beta: TrueBeta {
                    intercept: -1.0,
                    x1: vec![1.0, -1.0, -1.5, -2.0],
                    x2: vec![2.0, 1.0, 2.0],
                },
                generator: rows_of(&INTERMEDIATE_GENERATOR_K5),
                masking: vec![
                    MnarRule::new(None, One, 2, 0.4),
                    MnarRule::new(None, Zero, 4, 0.3),
                ],
                scenarios: vec![
                    uniform("MNAR1", vec![0.0; 4]),
                    uniform("MNAR2", vec![-3.0, 1.0, 0.0, 0.0]),
                    uniform("MNAR3", vec![-3.0, 1.0, 0.0, 1.0]),
                ],
                ..base
            },
            DesignKind::NonhierContinuous => Self {
                n: 1000,
                noise_sd: Some(1.0),
                masking: vec![
                    MnarRule::new(None, Positive, 1, 0.3),
                    MnarRule::new(None, Negative, 5, 0.3),
                ],
                ..base
            },
        }
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> u32 {
        self.generator.len() as u32
    }

    pub fn levels(&self) -> u32 {
        self.generator.first().map_or(0, |r| r.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let k = self.k();
        let l = self.levels();
        if k <= 2 {
            return bad(format!("generator needs K > 2 rows, got {k}"));
        }
        if l < 1
            || self
                .generator
                .iter()
                .any(|r| r.len() as u32 != l || r.iter().any(|v| !v.is_finite()))
        {
            return bad("generator rows must share one positive length and be finite".into());
        }
        if self.beta.x1.len() as u32 != k - 1 || self.beta.x2.len() as u32 != l - 1 {
            return bad(format!(
                "true beta needs {} x1 and {} x2 coefficients",
                k - 1,
                l - 1
            ));
        }
        if self.r < 1 {
            return bad("R must be at least 1".into());
        }
        if self.m < 2 {
            return bad(format!("M must be at least 2, got {}", self.m));
        }
        match (
            self.design.is_hierarchical(),
            self.clusters,
            self.cluster_size,
            self.random_sd,
        ) {
            (true, Some(g), Some(s), Some(sd)) => {
                if g < 2 || g * s != self.n || !(sd >= 0.0) {
                    return bad(format!("hierarchical design needs G >= 2, G * size = n and SD >= 0 (G={g}, size={s}, n={})", self.n));
                }
            }
            (true, ..) => {
                return bad("hierarchical design needs clusters, cluster_size and random_sd".into())
            }
            (false, None, None, None) => {}
            (false, ..) => {
                return bad(format!(
                    "design {} takes no cluster settings",
                    self.design.name()
                ))
            }
        }
        match (self.design.is_continuous(), self.noise_sd) {
            (true, Some(s)) if s > 0.0 => {}
            (true, _) => return bad("continuous design needs a positive noise_sd".into()),
            (false, None) => {}
            (false, Some(_)) => return bad("noise_sd applies to the continuous design only".into()),
        }
        for rule in &self.masking {
            if !(0.0..=1.0).contains(&rule.proportion) {
                return bad(format!(
                    "masking proportion {} outside [0, 1]",
                    rule.proportion
                ));
            }
            if rule.target < 1 || rule.target > k {
                return bad(format!("masking target {} outside 1..={k}", rule.target));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.scenarios {
            if !seen.insert(s.label.as_str()) || [SIMULATED, CC, MAR].contains(&s.label.as_str()) {
                return bad(format!(
                    "duplicate or reserved scenario label `{}`",
                    s.label
                ));
            }
        }
        Ok(())
    }

    pub fn references(&self) -> References {
        References::default()
    }
}

fn softmax_sample(logits: &[f64], rng: &mut StreamRng) -> u32 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, wk) in w.iter().enumerate() {
        if u < *wk {
            return k as u32 + 1;
        }
        u -= wk;
    }
    w.len() as u32
}

/// Cluster intercepts drawn for replication `rep` (empty for flat designs).
pub fn cluster_effects(cfg: &ScenarioConfig, rep: usize) -> Vec<f64> {
    let mut rng = stream(cfg.seed, &[tag("generate"), rep as u64]);
    draw_effects(cfg, &mut rng)
}

fn draw_effects(cfg: &ScenarioConfig, rng: &mut StreamRng) -> Vec<f64> {
    match (cfg.clusters, cfg.random_sd) {
        (Some(g), Some(sd)) => (0..g).map(|_| sd * std_normal(rng)).collect(),
        _ => vec![],
    }
}

/// Draw one complete dataset of replication `rep`.
pub fn generate(cfg: &ScenarioConfig, rep: usize) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[tag("generate"), rep as u64]);
    let n = cfg.n;
    let l = cfg.levels();
    let k = cfg.k();
    let u = draw_effects(cfg, &mut rng);
    let mut x2 = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut cl = Vec::with_capacity(n);
    for i in 0..n {
        let c2 = rng.random_range(1..=l);
        let logits: Vec<f64> = cfg
            .generator
            .iter()
            .map(|row| row[c2 as usize - 1])
            .collect();
        let c1 = softmax_sample(&logits, &mut rng);
        let mut eta = cfg.beta.intercept;
        if c1 > 1 {
            eta += cfg.beta.x1[c1 as usize - 2];
        }
        if c2 > 1 {
            eta += cfg.beta.x2[c2 as usize - 2];
        }
        if let Some(size) = cfg.cluster_size {
            let g = i / size;
            eta += u[g];
            cl.push(g as u32 + 1);
        }
        let yi = match cfg.noise_sd {
            Some(s) => eta + s * std_normal(&mut rng),
            None => (rng.random::<f64>() < logistic_cdf(eta)) as u8 as f64,
        };
        x2.push(c2);
        x1.push(Some(c1));
        y.push(yi);
    }
    let kind = if cfg.design.is_continuous() {
        OutcomeKind::Continuous
    } else {
        OutcomeKind::Binary
    };
    let cluster = match cfg.clusters {
        Some(g) => Some(Nominal::new(CLUSTER, cl, g as u32)?),
        None => None,
    };
    Dataset::new(
        OUTCOME,
        kind,
        y,
        ORDINAL,
        x1,
        k,
        vec![Nominal::new(NOMINAL, x2, l)?],
        cluster,
    )
}

/// Mask `x1` cells according to `rules`; already-missing cells stay missing.
pub fn apply_mnar(
    ds: &Dataset,
    rules: &[MnarRule],
    mode: MaskingMode,
    rng: &mut StreamRng,
) -> Result<Dataset> {
    let mut keys = Vec::with_capacity(rules.len());
    for rule in rules {
        if !(0.0..=1.0).contains(&rule.proportion) {
            return Err(Error::InvalidArgument(format!(
                "masking proportion {} outside [0, 1]",
                rule.proportion
            )));
        }
        if rule.target < 1 || rule.target > ds.k() {
            return Err(Error::InvalidArgument(format!(
                "masking target {} outside 1..={}",
                rule.target,
                ds.k()
            )));
        }
        keys.push(
            rule.stratum
                .as_deref()
                .map(|s| ds.stratum_key(s))
                .transpose()?,
        );
    }
    for a in 0..rules.len() {
        for b in a + 1..rules.len() {
            let strata_meet = match (keys[a], keys[b]) {
                (Some(x), Some(y)) => x == y || x.covariate != y.covariate,
                _ => true,
            };
            if strata_meet
                && rules[a].target == rules[b].target
                && rules[a].outcome.overlaps(rules[b].outcome)
            {
                return Err(Error::InvalidArgument(format!(
                    "masking rules {} and {} target the same cells",
                    a + 1,
                    b + 1
                )));
            }
        }
    }
    let mut x1 = ds.x1().to_vec();
    for (rule, key) in rules.iter().zip(&keys) {
        let eligible: Vec<usize> = (0..ds.n())
            .filter(|&i| {
                x1[i] == Some(rule.target)
                    && rule.outcome.holds(ds.outcome()[i])
                    && key.is_none_or(|k| ds.in_stratum(i, k))
            })
            .collect();
        match mode {
            MaskingMode::Bernoulli => {
                for i in eligible {
                    if rng.random::<f64>() < rule.proportion {
                        x1[i] = None;
                    }
                }
            }
            MaskingMode::Exact => {
                let take = (rule.proportion * eligible.len() as f64).round() as usize;
                let mut pool = eligible;
                for j in 0..take {
                    let pick = rng.random_range(j..pool.len());
                    pool.swap(j, pick);
                    x1[pool[j]] = None;
                }
            }
        }
    }
    ds.with_x1(x1)
}

/// Per-coefficient Monte Carlo summary of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub coefficient: String,
    pub truth: f64,
    pub mean: f64,
    pub rel_bias_pct: f64,
    pub emp_sd: f64,
    pub coverage: f64,
}

/// Bias of the `x1`-model coefficient on the outcome, MAR copies vs full data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationModelBias {
    pub simulated_mean: f64,
    pub simulated_sd: f64,
    pub mar_mean: f64,
    pub mar_sd: f64,
    pub rel_bias_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub design: DesignKind,
    pub r: usize,
    pub m: usize,
    pub seed: u64,
    pub replications_used: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_messages: Vec<String>,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub metadata: ReportMetadata,
    pub methods: Vec<String>,
    pub coefficients: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub imputation_bias: ImputationModelBias,
    /// Mean imputed-category profiles among masked cells; `SIMULATED` holds the true values.
    pub profiles: Vec<CategoryProfile>,
    /// Mean total-variation distance of each method's overall profile to MAR's.
    pub profile_tv_to_mar: BTreeMap<String, f64>,
}

impl MonteCarloReport {
    pub fn row(&self, method: &str, coefficient: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.coefficient == coefficient)
    }

    /// CSV with columns method, coefficient, rel_bias_pct, emp_sd, coverage.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "coefficient",
            "rel_bias_pct",
            "emp_sd",
            "coverage",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.coefficient.clone(),
                format!("{:.4}", r.rel_bias_pct),
                format!("{:.6}", r.emp_sd),
                format!("{:.4}", r.coverage),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide table in the layout of the published comparison tables: one row
    /// per coefficient and statistic, one column per method.
    pub fn write_table_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["statistic".to_string(), "coefficient".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header)?;
        let stats: [(&str, fn(&ReportRow) -> String); 3] = [
            ("rel_bias_pct", |r| format!("{:.2}", r.rel_bias_pct)),
            ("emp_sd", |r| format!("{:.3}", r.emp_sd)),
            ("coverage", |r| format!("{:.2}", r.coverage)),
        ];
        for (label, f) in stats {
            for c in &self.coefficients {
                let mut rec = vec![label.to_string(), c.clone()];
                for m in &self.methods {
                    rec.push(self.row(m, c).map(f).unwrap_or_default());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Estimate with interval for each coefficient.
type Estimates = Vec<(f64, f64, f64)>;

struct RepOutcome {
    methods: Vec<(String, Estimates)>,
    beta_y_full: f64,
    beta_y_mar: f64,
    profiles: Vec<CategoryProfile>,
}

fn wald(fit: &OutcomeFit) -> Estimates {
    let crit = match fit.kind {
        ModelKind::Linear => t_quantile(0.975, (fit.n_obs - fit.coefficients.len()) as f64),
        _ => normal_quantile(0.975),
    };
    fit.coefficients
        .iter()
        .zip(&fit.se)
        .map(|(&b, &s)| (b, b - crit * s, b + crit * s))
        .collect()
}

fn pooled(fits: &[OutcomeFit]) -> Result<Estimates> {
    Ok(pool_rubin(fits)?
        .rows
        .iter()
        .map(|r| (r.qbar, r.ci_low, r.ci_high))
        .collect())
}

fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let mean = sorted_mean(v.to_vec());
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    (sorted_mean(dev) * v.len() as f64 / (v.len() - 1) as f64).sqrt()
}

/// Impute `masked` under MAR with the design's imputation model.
pub fn impute_for(cfg: &ScenarioConfig, masked: &Dataset, rep: usize) -> Result<ImputationSet> {
    let refs = cfg.references();
    let seed = derive_seed(cfg.seed, &[tag("impute"), rep as u64]);
    if cfg.design.is_hierarchical() {
        let gibbs = GibbsConfig {
            burn_in: cfg.gibbs.burn_in,
            between: cfg.gibbs.between,
            seed,
        };
        impute_mar_hier(masked, cfg.m, &gibbs, &refs)
    } else {
        impute_mar_flat(masked, cfg.m, cfg.link, &refs, seed)
    }
}

/// Generate and mask the dataset of replication `rep`.
pub fn replicate_data(cfg: &ScenarioConfig, rep: usize) -> Result<(Dataset, Dataset)> {
    let full = generate(cfg, rep)?;
    let mut rng = stream(cfg.seed, &[tag("mask"), rep as u64]);
    let masked = apply_mnar(&full, &cfg.masking, cfg.masking_mode, &mut rng)?;
    Ok((full, masked))
}

fn run_replication(cfg: &ScenarioConfig, rep: usize) -> Result<RepOutcome> {
    let refs = cfg.references();
    let (full, masked) = replicate_data(cfg, rep)?;
    let kind = ModelKind::for_dataset(&full);
    let complete: Vec<u32> = full
        .x1()
        .iter()
        .map(|v| v.expect("generated data is complete"))
        .collect();
    let all: Vec<usize> = (0..full.n()).collect();
    let mut methods = Vec::with_capacity(3 + cfg.scenarios.len());
    methods.push((
        SIMULATED.to_string(),
        wald(&fit_outcome(&full, &complete, &all, kind, &refs)?),
    ));
    let observed = masked.observed_rows();
    methods.push((
        CC.to_string(),
        wald(&fit_outcome(&masked, &complete, &observed, kind, &refs)?),
    ));

    let set = impute_for(cfg, &masked, rep)?;
    methods.push((
        MAR.to_string(),
        pooled(&fit_copies(&masked, &set.copies, kind, &refs)?)?,
    ));

    let beta_y_full = fit_observed(&full, cfg.link, &refs)?.0.beta[0];
    let mar_beta_y: Vec<f64> = set
        .copies
        .iter()
        .map(|c| fit_completed(&masked, c, cfg.link, &refs).map(|(f, _)| f.beta[0]))
        .collect::<Result<_>>()?;
    let beta_y_mar = sorted_mean(mar_beta_y);

    let mut profiles = Vec::new();
    let has_missing = !set.missing_rows.is_empty();
    if has_missing {
        let truth = ImputationSet {
            m: 1,
            k: set.k,
            missing_rows: set.missing_rows.clone(),
            copies: vec![complete.clone()],
            provenance: vec![],
        };
        profiles.extend(missing_category_profile(
            &truth,
            &masked,
            SIMULATED,
            Some(NOMINAL),
        )?);
        profiles.extend(missing_category_profile(
            &set,
            &masked,
            MAR_LABEL,
            Some(NOMINAL),
        )?);
    }
    for (idx, sc) in cfg.scenarios.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &[tag("mnar"), rep as u64, idx as u64]);
        let adjusted = adjust(&set, &masked, &sc.delta, cfg.link, &refs, seed)?;
        methods.push((
            sc.label.clone(),
            pooled(&fit_copies(&masked, &adjusted.set.copies, kind, &refs)?)?,
        ));
        if has_missing {
            profiles.extend(missing_category_profile(
                &adjusted.set,
                &masked,
                &sc.label,
                Some(NOMINAL),
            )?);
        }
    }
    Ok(RepOutcome {
        methods,
        beta_y_full,
        beta_y_mar,
        profiles,
    })
}

/// Run the full comparison over `cfg.r` replications.
pub fn run_monte_carlo(cfg: &ScenarioConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let start = Instant::now();
    let coefficients = {
        let ds = generate(cfg, 0)?;
        let complete: Vec<u32> = ds.x1().iter().map(|v| v.unwrap()).collect();
        crate::design::outcome_design(&ds, &complete, &[], &cfg.references())?.names
    };
    let truth = cfg.beta.flatten();
    let results: Vec<(usize, Result<RepOutcome>)> = (0..cfg.r)
        .into_par_iter()
        .map(|rep| (rep, run_replication(cfg, rep)))
        .collect();
    let mut ok = Vec::with_capacity(cfg.r);
    let mut failure_messages = Vec::new();
    for (rep, res) in results {
        match res {
            Ok(o) => ok.push(o),
            Err(e) => failure_messages.push(format!("replication {}: {e}", rep + 1)),
        }
    }
    let failures = failure_messages.len();
    if failures as f64 > MAX_FAILURE_RATE * cfg.r as f64 || ok.is_empty() {
        return Err(Error::Numeric(format!(
            "{failures} of {} replications failed (limit {:.0}%); first: {}",
            cfg.r,
            MAX_FAILURE_RATE * 100.0,
            failure_messages.first().map_or("", String::as_str)
        )));
    }
    let methods: Vec<String> = ok[0].methods.iter().map(|(m, _)| m.clone()).collect();
    let mut rows = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        for (j, name) in coefficients.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|o| o.methods[mi].1[j].0).collect();
            let covered = ok
                .iter()
                .filter(|o| {
                    let (_, lo, hi) = o.methods[mi].1[j];
                    lo <= truth[j] && truth[j] <= hi
                })
                .count();
            let mean = sorted_mean(est.clone());
            rows.push(ReportRow {
                method: method.clone(),
                coefficient: name.clone(),
                truth: truth[j],
                mean,
                rel_bias_pct: 100.0 * (mean - truth[j]) / truth[j],
                emp_sd: sample_sd(&est),
                coverage: covered as f64 / ok.len() as f64,
            });
        }
    }
    let full: Vec<f64> = ok.iter().map(|o| o.beta_y_full).collect();
    let mar: Vec<f64> = ok.iter().map(|o| o.beta_y_mar).collect();
    let (sm, mm) = (sorted_mean(full.clone()), sorted_mean(mar.clone()));
    let imputation_bias = ImputationModelBias {
        simulated_mean: sm,
        simulated_sd: sample_sd(&full),
        mar_mean: mm,
        mar_sd: sample_sd(&mar),
        rel_bias_pct: 100.0 * (mm - sm) / sm,
    };
    let (profiles, profile_tv_to_mar) = average_profiles(&ok, cfg.k() as usize);
    Ok(MonteCarloReport {
        metadata: ReportMetadata {
            design: cfg.design,
            r: cfg.r,
            m: cfg.m,
            seed: cfg.seed,
            replications_used: ok.len(),
            failures,
            failure_messages,
            runtime_secs: start.elapsed().as_secs_f64(),
        },
        methods,
        coefficients,
        rows,
        imputation_bias,
        profiles,
        profile_tv_to_mar,
    })
}

fn average_profiles(ok: &[RepOutcome], k: usize) -> (Vec<CategoryProfile>, BTreeMap<String, f64>) {
    let mut order: Vec<(String, Option<String>)> = Vec::new();
    let mut acc: BTreeMap<(String, Option<String>), (Vec<Vec<f64>>, usize)> = BTreeMap::new();
    let mut tv: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in ok {
        let mar = o
            .profiles
            .iter()
            .find(|p| p.scenario == MAR_LABEL && p.stratum.is_none());
        for p in &o.profiles {
            let key = (p.scenario.clone(), p.stratum.clone());
            let entry = acc.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (vec![Vec::new(); k], 0)
            });
            for (j, v) in p.proportions.iter().enumerate() {
                entry.0[j].push(*v);
            }
            entry.1 += p.count;
            if let (Some(m), None) = (mar, &p.stratum) {
                tv.entry(p.scenario.clone())
                    .or_default()
                    .push(total_variation(&p.proportions, &m.proportions));
            }
        }
    }
    let profiles = order
        .into_iter()
        .map(|key| {
            let (cols, count) = acc.remove(&key).expect("accumulated");
            CategoryProfile {
                scenario: key.0,
                stratum: key.1,
                proportions: cols.into_iter().map(sorted_mean).collect(),
                count,
            }
        })
        .collect();
    (
        profiles,
        tv.into_iter().map(|(s, v)| (s, sorted_mean(v))).collect(),
    )
}

/// Synthetic stand-in for the provincial trauma registry: death outcome,
/// 3-level GCS with MNAR gaps, six provinces and trauma centres nested in them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraumaConfig {
    pub n: usize,
    /// Patient share of each province, in percent.
    pub province_shares: Vec<f64>,
    /// Missing GCS share within each province, in percent.
    pub missing_rates: Vec<f64>,
    pub centres_per_province: Vec<usize>,
    /// GCS1..GCS3 distribution within each province.
    pub gcs_shares: Vec<[f64; 3]>,
    /// Relative chance of a GCS value being missing, by category.
    pub missing_weights: [f64; 3],
    pub province_log_or: Vec<f64>,
    pub gcs_log_or: [f64; 3],
    pub death_rate: f64,
    pub random_sd: f64,
    pub seed: u64,
}

impl Default for TraumaConfig {
    fn default() -> Self {
        Self {
            n: 54354,
            province_shares: vec![3.81, 35.02, 2.00, 22.09, 11.64, 25.44],
            missing_rates: vec![33.85, 13.30, 6.54, 10.83, 16.48, 19.98],
            centres_per_province: vec![2, 9, 1, 6, 4, 8],
            gcs_shares: vec![
                [5.70, 3.43, 57.03],
                [8.79, 5.05, 72.86],
                [8.20, 5.81, 79.45],
                [9.52, 5.51, 74.15],
                [8.50, 4.68, 70.33],
                [8.55, 4.61, 66.85],
            ],
            missing_weights: [1.6, 0.6, 1.0],
            province_log_or: vec![0.2852, 0.0, 0.5766, -0.4005, 0.0296, -0.1054],
            gcs_log_or: [0.0, -0.7, -1.6],
            death_rate: 0.1074,
            random_sd: 0.305,
            seed: 6,
        }
    }
}

impl TraumaConfig {
    pub fn provinces(&self) -> usize {
        self.province_shares.len()
    }

    pub fn centres(&self) -> usize {
        self.centres_per_province.iter().sum()
    }

    /// Intraclass correlation implied by the centre SD.
    pub fn icc(&self) -> f64 {
        crate::analysis::compute_icc(self.random_sd)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.provinces();
        if l < 2
            || self.missing_rates.len() != l
            || self.centres_per_province.len() != l
            || self.gcs_shares.len() != l
            || self.province_log_or.len() != l
        {
            return Err(Error::InvalidArgument(
                "trauma config: per-province vectors disagree in length".into(),
            ));
        }
        if self.centres_per_province.contains(&0) || self.centres() < 2 {
            return Err(Error::InvalidArgument(
                "trauma config: every province needs a centre".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.death_rate) || self.random_sd < 0.0 {
            return Err(Error::InvalidArgument(
                "trauma config: death rate or SD out of range".into(),
            ));
        }
        Ok(())
    }

    /// Province and centre references used in the application (province B).
    pub fn references(&self) -> References {
        References::parse(["province=2"]).expect("static reference")
    }
}

/// Split `n` into integer parts proportional to `weights` (largest remainder).
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - parts.iter().sum::<usize>();
    for &j in order.iter().take(short) {
        parts[j] += 1;
    }
    parts
}

/// Centre intercepts with zero mean inside every province and overall SD
/// `sd`, so province effects absorb none of the centre variance.
fn balanced_effects(groups: &[usize], sd: f64, rng: &mut StreamRng) -> Vec<f64> {
    let g: usize = groups.iter().sum();
    let mut z: Vec<f64> = (0..g)
        .map(|j| normal_quantile((j as f64 + 0.5) / g as f64))
        .collect();
    for j in (1..g).rev() {
        z.swap(j, rng.random_range(0..=j));
    }
    let mut start = 0;
    for &size in groups {
        let block = &mut z[start..start + size];
        let mean = block.iter().sum::<f64>() / size as f64;
        block.iter_mut().for_each(|v| *v -= mean);
        start += size;
    }
    let scale = (z.iter().map(|v| v * v).sum::<f64>() / g as f64).sqrt();
    z.iter().map(|v| sd * v / scale).collect()
}

/// Complete and masked versions of the trauma look-alike.
pub fn trauma_lookalike(cfg: &TraumaConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[tag("trauma")]);
    let l = cfg.provinces();
    let sizes = apportion(cfg.n, &cfg.province_shares);
    let u = balanced_effects(&cfg.centres_per_province, cfg.random_sd, &mut rng);
    let mut province = Vec::with_capacity(cfg.n);
    let mut centre = Vec::with_capacity(cfg.n);
    let mut gcs = Vec::with_capacity(cfg.n);
    let mut first_centre = 0;
    for p in 0..l {
        for _ in 0..sizes[p] {
            province.push(p as u32 + 1);
            centre
                .push((first_centre + rng.random_range(0..cfg.centres_per_province[p])) as u32 + 1);
            let logits: Vec<f64> = cfg.gcs_shares[p].iter().map(|s| s.ln()).collect();
            gcs.push(softmax_sample(&logits, &mut rng));
        }
        first_centre += cfg.centres_per_province[p];
    }
    let base: Vec<f64> = (0..cfg.n)
        .map(|i| {
            cfg.province_log_or[province[i] as usize - 1]
                + cfg.gcs_log_or[gcs[i] as usize - 1]
                + u[centre[i] as usize - 1]
        })
        .collect();
    let rate = |a: f64| base.iter().map(|b| logistic_cdf(a + b)).sum::<f64>() / cfg.n.max(1) as f64;
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < cfg.death_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);
    let death: Vec<f64> = base
        .iter()
        .map(|b| (rng.random::<f64>() < logistic_cdf(intercept + b)) as u8 as f64)
        .collect();
    let mut x1: Vec<Option<u32>> = gcs.iter().map(|&g| Some(g)).collect();
    for p in 0..l {
        let rows: Vec<usize> = (0..cfg.n)
            .filter(|&i| province[i] as usize == p + 1)
            .collect();
        let take = (cfg.missing_rates[p] / 100.0 * rows.len() as f64).round() as usize;
        // weighted sampling without replacement by exponential keys
        let mut keyed: Vec<(f64, usize)> = rows
            .iter()
            .map(|&i| {
                let e: f64 = -(1.0 - rng.random::<f64>()).ln();
                (e / cfg.missing_weights[gcs[i] as usize - 1], i)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(take) {
            x1[i] = None;
        }
    }
    let complete = Dataset::new(
        "death",
        OutcomeKind::Binary,
        death,
        "gcs",
        gcs.into_iter().map(Some).collect(),
        3,
        vec![Nominal::new("province", province, l as u32)?],
        Some(Nominal::new("centre", centre, cfg.centres() as u32)?),
    )?;
    let masked = complete.with_x1(x1)?;
    Ok((complete, masked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for d in [
            DesignKind::NonhierExtreme,
            DesignKind::HierExtreme,
            DesignKind::NonhierIntermediate,
            DesignKind::NonhierContinuous,
        ] {
            ScenarioConfig::preset(d).validate().unwrap();
        }
    }

    #[test]
    fn empty_dataset_when_n_is_zero() {
        let cfg = ScenarioConfig {
            n: 0,
            ..ScenarioConfig::preset(DesignKind::NonhierExtreme)
        };
        assert_eq!(generate(&cfg, 0).unwrap().n(), 0);
    }

    #[test]
    fn zero_proportion_masks_nothing() {
        let cfg = ScenarioConfig::preset(DesignKind::NonhierExtreme);
        let ds = generate(&cfg, 3).unwrap();
        let rules = vec![MnarRule::new(None, OutcomeCondition::One, 1, 0.0)];
        let masked = apply_mnar(&ds, &rules, MaskingMode::Bernoulli, &mut stream(1, &[])).unwrap();
        assert_eq!(masked.n_missing(), 0);
    }

    #[test]
    fn overlapping_rules_rejected() {
        let cfg = ScenarioConfig::preset(DesignKind::NonhierExtreme);
        let ds = generate(&cfg, 0).unwrap();
        let rules = vec![
            MnarRule::new(None, OutcomeCondition::One, 1, 0.3),
            MnarRule::new(Some("X2=2"), OutcomeCondition::Positive, 1, 0.3),
        ];
        assert!(apply_mnar(&ds, &rules, MaskingMode::Bernoulli, &mut stream(1, &[])).is_err());
        let disjoint = vec![
            MnarRule::new(Some("X2=1"), OutcomeCondition::One, 1, 0.3),
            MnarRule::new(Some("X2=2"), OutcomeCondition::One, 1, 0.3),
            MnarRule::new(None, OutcomeCondition::Zero, 1, 0.3),
        ];
        assert!(apply_mnar(&ds, &disjoint, MaskingMode::Bernoulli, &mut stream(1, &[])).is_ok());
    }

    #[test]
    fn exact_masking_hits_rounded_count() {
        let cfg = ScenarioConfig::preset(DesignKind::NonhierExtreme);
        let ds = generate(&cfg, 1).unwrap();
        let eligible = (0..ds.n())
            .filter(|&i| ds.x1()[i] == Some(5) && ds.outcome()[i] == 0.0)
            .count();
        let rules = vec![MnarRule::new(None, OutcomeCondition::Zero, 5, 0.3)];
        let masked = apply_mnar(&ds, &rules, MaskingMode::Exact, &mut stream(2, &[])).unwrap();
        assert_eq!(masked.n_missing(), (0.3 * eligible as f64).round() as usize);
    }

    #[test]
    fn hierarchical_clusters_are_contiguous_blocks() {
        let cfg = ScenarioConfig::preset(DesignKind::HierExtreme);
        let ds = generate(&cfg, 0).unwrap();
        let cl = ds.cluster().unwrap();
        assert_eq!(cl.levels, 10);
        assert_eq!(cl.codes[0], 1);
        assert_eq!(cl.codes[1999], 10);
        assert_eq!(cl.codes.iter().filter(|&&c| c == 4).count(), 200);
    }

    #[test]
    fn apportion_sums_and_rounds() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        let parts = apportion(54354, &TraumaConfig::default().province_shares);
        assert_eq!(parts.iter().sum::<usize>(), 54354);
    }

    #[test]
    fn balanced_effects_have_exact_moments() {
        let u = balanced_effects(&[2, 9, 1, 6, 4, 8], 0.29, &mut stream(1, &[]));
        assert_eq!(u[11], 0.0);
        assert!(u[..2].iter().sum::<f64>().abs() < 1e-12);
        let mean = u.iter().sum::<f64>() / 30.0;
        let sd = (u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((sd - 0.29).abs() < 1e-12);
    }
}
