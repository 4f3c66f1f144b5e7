//! Subcommand implementations.

use std::path::Path;

use ordelta::adjust::DeltaSpec;
use ordelta::analysis::{fit_copies, pool_rubin, ModelKind, OutcomeFit, PooledEstimate};
use ordelta::data::{read_csv, schema_of, write_csv, Dataset, Schema};
use ordelta::design::References;
use ordelta::diagnostics::{
    delta_grid_scan, plausibility_flags, write_profiles_long, write_profiles_wide,
    PlausibilityRules,
};
use ordelta::dist::Link;
use ordelta::impute::{
    fit_observed, impute_mar_flat, impute_mar_hier, read_imputations, write_imputations,
    GibbsConfig,
};
use ordelta::simlab::{self, DesignKind, Scenario, ScenarioConfig, TraumaConfig};

use crate::manifest::{CliError, Result, Run};
use crate::{
    AdjustArgs, AnalyzeArgs, DataArgs, DiagnoseArgs, FitArgs, ImputeArgs, PoolArgs, ScenarioArgs,
    SimulateArgs, TraumaArgs,
};

fn parse<T: std::str::FromStr>(s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e: T::Err| CliError::Usage(e.to_string()))
}

/// Load the dataset, its schema and the reference overrides.
fn load(a: &DataArgs, run: &mut Run) -> Result<(Dataset, References)> {
    let schema: Schema = run.json_input("schema", &a.schema)?;
    let bytes = run.input("data", &a.data)?;
    let ds = read_csv(bytes.as_slice(), &schema)?;
    let refs = References::parse(a.refs.iter().map(String::as_str))?;
    run.param("refs", &a.refs)?;
    Ok((ds, refs))
}

fn load_imputations(path: &Path, ds: &Dataset, run: &mut Run) -> Result<ordelta::ImputationSet> {
    let bytes = run.input("imputations", path)?;
    Ok(read_imputations(bytes.as_slice(), ds)?)
}

pub fn fit(a: &FitArgs, run: &mut Run) -> Result<()> {
    let link: Link = parse(&a.link)?;
    run.param("link", link)?;
    let (ds, refs) = load(&a.data, run)?;
    let (fit, _) = fit_observed(&ds, link, &refs)?;
    run.write_json("fit.json", &fit)
}

pub fn impute(a: &ImputeArgs, run: &mut Run) -> Result<()> {
    let link: Link = parse(&a.link)?;
    run.param("M", a.m)?;
    run.param("link", link)?;
    run.param("hier", a.hier)?;
    run.seed(a.seed)?;
    let (ds, refs) = load(&a.data, run)?;
    let set = if a.hier {
        run.param("burn_in", a.burn_in)?;
        run.param("between", a.between)?;
        let gibbs = GibbsConfig {
            burn_in: a.burn_in,
            between: a.between,
            seed: a.seed,
        };
        impute_mar_hier(&ds, a.m, &gibbs, &refs)?
    } else {
        impute_mar_flat(&ds, a.m, link, &refs, a.seed)?
    };
    run.write_with("imputations.csv", |w| write_imputations(&set, &ds, w))?;
    run.write_json("provenance.json", &set.provenance)
}

pub fn adjust(a: &AdjustArgs, run: &mut Run) -> Result<()> {
    let link: Link = parse(&a.link)?;
    run.param("link", link)?;
    run.seed(a.seed)?;
    let (ds, refs) = load(&a.data, run)?;
    let set = load_imputations(&a.imputations, &ds, run)?;
    let spec: DeltaSpec = run.json_input("delta", &a.delta)?;
    let adjusted = ordelta::adjust(&set, &ds, &spec, link, &refs, a.seed)?;
    run.write_with("adjusted.csv", |w| write_imputations(&adjusted.set, &ds, w))?;
    run.write_json("thresholds.json", &adjusted.thresholds_json())
}

fn model_kind(name: &str, ds: &Dataset) -> Result<ModelKind> {
    if name == "auto" {
        Ok(ModelKind::for_dataset(ds))
    } else {
        parse(name)
    }
}

pub fn analyze(a: &AnalyzeArgs, run: &mut Run) -> Result<()> {
    let (ds, refs) = load(&a.data, run)?;
    let kind = model_kind(&a.model, &ds)?;
    run.param("model", kind)?;
    let set = load_imputations(&a.imputations, &ds, run)?;
    let fits = fit_copies(&ds, &set.copies, kind, &refs)?;
    let pooled = pool_rubin(&fits)?;
    run.write_json("fits.json", &fits)?;
    write_pooled(&pooled, run)
}

pub fn pool(a: &PoolArgs, run: &mut Run) -> Result<()> {
    let fits: Vec<OutcomeFit> = run.json_input("fits", &a.fits)?;
    write_pooled(&pool_rubin(&fits)?, run)
}

fn write_pooled(pooled: &PooledEstimate, run: &mut Run) -> Result<()> {
    run.write_json("pooled.json", pooled)?;
    run.write_with("pooled.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "term",
            "estimate",
            "se",
            "ci_low",
            "ci_high",
            "p_value",
            "odds_ratio",
            "or_low",
            "or_high",
            "w",
            "b",
            "t",
            "df",
        ])?;
        for r in &pooled.rows {
            let or = r
                .odds_ratio
                .map_or([String::new(), String::new(), String::new()], |o| {
                    o.map(|v| v.to_string())
                });
            let df = if r.df.is_finite() {
                r.df.to_string()
            } else {
                "Inf".into()
            };
            c.write_record([
                r.name.clone(),
                r.qbar.to_string(),
                r.se.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
                r.p_value.to_string(),
                or[0].clone(),
                or[1].clone(),
                or[2].clone(),
                r.w.to_string(),
                r.b.to_string(),
                r.t.to_string(),
                df,
            ])?;
        }
        c.flush()?;
        Ok(())
    })
}

pub fn diagnose(a: &DiagnoseArgs, run: &mut Run) -> Result<()> {
    let link: Link = parse(&a.link)?;
    run.param("link", link)?;
    run.param("by", &a.by)?;
    run.seed(a.seed)?;
    let (ds, refs) = load(&a.data, run)?;
    let set = load_imputations(&a.imputations, &ds, run)?;
    let grid: Vec<Scenario> = run.json_input("grid", &a.grid)?;
    let rules: PlausibilityRules = match &a.rules {
        Some(p) => run.json_input("rules", p)?,
        None => PlausibilityRules::default(),
    };
    let specs: Vec<(String, DeltaSpec)> = grid.into_iter().map(|s| (s.label, s.delta)).collect();
    let profiles = delta_grid_scan(&ds, &set, &specs, link, &refs, a.seed, a.by.as_deref())?;
    let flags = plausibility_flags(&profiles, &rules)?;
    run.write_with("profiles_long.csv", |w| write_profiles_long(&profiles, w))?;
    run.write_with("profiles_wide.csv", |w| {
        write_profiles_wide(&profiles, ds.x1_name(), w)
    })?;
    run.write_json("flags.json", &flags)
}

fn scenario_config(a: &ScenarioArgs, run: &mut Run) -> Result<ScenarioConfig> {
    let mut cfg = match (&a.config, &a.design) {
        (Some(path), _) => run.json_input("config", path)?,
        (None, Some(d)) => ScenarioConfig::preset(parse::<DesignKind>(d)?),
        (None, None) => {
            return Err(CliError::Usage(
                "either --design or --config is required".into(),
            ))
        }
    };
    if let Some(r) = a.r {
        cfg.r = r;
    }
    if let Some(m) = a.m {
        cfg.m = m;
    }
    if let Some(n) = a.n {
        if cfg.design.is_hierarchical() {
            return Err(CliError::Usage(
                "--n does not apply to the hierarchical design".into(),
            ));
        }
        cfg.n = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    run.param("config", &cfg)?;
    run.seed(cfg.seed)?;
    Ok(cfg)
}

/// Report JSON without the wall-clock field, so reruns are byte-identical.
fn report_json(report: &ordelta::MonteCarloReport) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(report)?;
    if let Some(meta) = v.get_mut("metadata").and_then(|m| m.as_object_mut()) {
        meta.remove("runtime_secs");
    }
    Ok(v)
}

pub fn simulate(a: &SimulateArgs, run: &mut Run) -> Result<()> {
    let cfg = scenario_config(&a.scenario, run)?;
    if a.emit_data {
        let (full, masked) = simlab::replicate_data(&cfg, 0)?;
        run.write_with("data_full.csv", |w| write_csv(&full, w))?;
        run.write_with("data_masked.csv", |w| write_csv(&masked, w))?;
        run.write_json("schema.json", &schema_of(&masked))?;
    }
    let report = simlab::run_monte_carlo(&cfg)?;
    run.write_with("report.csv", |w| report.write_csv(w))?;
    run.write_with("profiles_long.csv", |w| {
        write_profiles_long(&report.profiles, w)
    })?;
    run.write_json("report.json", &report_json(&report)?)
}

pub fn replicate_table(a: &ScenarioArgs, run: &mut Run) -> Result<()> {
    let cfg = scenario_config(a, run)?;
    let report = simlab::run_monte_carlo(&cfg)?;
    run.write_with("table.csv", |w| report.write_table_csv(w))?;
    run.write_with("report.csv", |w| report.write_csv(w))?;
    run.write_json("imputation_model_bias.json", &report.imputation_bias)
}

pub fn trauma(a: &TraumaArgs, run: &mut Run) -> Result<()> {
    let cfg: TraumaConfig = match &a.config {
        Some(p) => run.json_input("config", p)?,
        None => TraumaConfig::default(),
    };
    run.param("config", &cfg)?;
    run.seed(cfg.seed)?;
    let (complete, masked) = simlab::trauma_lookalike(&cfg)?;
    run.write_with("trauma_complete.csv", |w| write_csv(&complete, w))?;
    run.write_with("trauma_masked.csv", |w| write_csv(&masked, w))?;
    run.write_json("schema.json", &schema_of(&masked))
}
