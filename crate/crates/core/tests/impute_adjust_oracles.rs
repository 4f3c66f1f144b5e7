use ordelta::adjust::{adjust, DeltaSpec};
use ordelta::analysis::{fit_copies, pool_rubin, ModelKind};
use ordelta::data::{Dataset, Nominal, OutcomeKind};
use ordelta::design::References;
use ordelta::diagnostics::{missing_category_profile, total_variation};
use ordelta::dist::{normal_cdf, Link};
use ordelta::impute::{impute_mar_flat, impute_mar_hier, GibbsConfig};
use ordelta::rng::stream;
use ordelta::simlab::{self, DesignKind, ScenarioConfig};
use rand::Rng;

/// Binary outcome, K = 4 ordinal `x1` independent of everything, MCAR gaps.
fn independent_data(n: usize, miss: f64, seed: u64, clusters: Option<u32>) -> Dataset {
    let mut rng = stream(seed, &[]);
    let probs = [0.1, 0.4, 0.3, 0.2];
    let mut x1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = 4;
        for (j, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                c = j as u32 + 1;
                break;
            }
        }
        x1.push((rng.random::<f64>() >= miss).then_some(c));
        y.push((rng.random::<f64>() < 0.4) as u8 as f64);
        x2.push(rng.random_range(1..=2u32));
    }
    let cluster = clusters
        .map(|g| Nominal::new("g", (0..n).map(|i| (i as u32 % g) + 1).collect(), g).unwrap());
    Dataset::new(
        "y",
        OutcomeKind::Binary,
        y,
        "x1",
        x1,
        4,
        vec![Nominal::new("x2", x2, 2).unwrap()],
        cluster,
    )
    .unwrap()
}

fn observed_share(ds: &Dataset) -> Vec<f64> {
    let mut c = vec![0.0; 4];
    let obs = ds.observed_rows();
    for &i in &obs {
        c[ds.x1()[i].unwrap() as usize - 1] += 1.0;
    }
    c.iter().map(|v| v / obs.len() as f64).collect()
}

#[test]
fn flat_imputation_under_independence_tracks_the_observed_marginal() {
    let ds = independent_data(3000, 0.3, 1, None);
    let set = impute_mar_flat(&ds, 50, Link::Probit, &References::default(), 9).unwrap();
    let prof = &missing_category_profile(&set, &ds, "MAR", None).unwrap()[0];
    let target = observed_share(&ds);
    // pooled over 50 copies of ~900 cells the sampling noise is well below 0.02
    for (p, t) in prof.proportions.iter().zip(&target) {
        assert!((p - t).abs() < 0.02, "{:?} vs {target:?}", prof.proportions);
    }
}

#[test]
fn hierarchical_sampler_agrees_with_flat_when_clusters_do_not_matter() {
    let ds = independent_data(1200, 0.25, 2, Some(8));
    let refs = References::default();
    let flat = impute_mar_flat(&ds, 20, Link::Probit, &refs, 3).unwrap();
    let gibbs = GibbsConfig {
        burn_in: 300,
        between: 20,
        seed: 3,
    };
    let hier = impute_mar_hier(&ds, 20, &gibbs, &refs).unwrap();
    let a = &missing_category_profile(&flat, &ds, "flat", None).unwrap()[0];
    let b = &missing_category_profile(&hier, &ds, "hier", None).unwrap()[0];
    // two-sample chi-square on the pooled imputed counts, 3 df
    let cells = (ds.n_missing() * 20) as f64;
    let mut chi2 = 0.0;
    for (p, q) in a.proportions.iter().zip(&b.proportions) {
        let pooled = 0.5 * (p + q);
        chi2 += cells * (p - q).powi(2) / (2.0 * pooled);
    }
    // copies within one set are correlated through the parameter draw, so
    // the nominal 0.999 critical value (16.27) is doubled
    assert!(
        chi2 < 32.5,
        "chi-square {chi2}: {:?} vs {:?}",
        a.proportions,
        b.proportions
    );
}

#[test]
fn between_imputation_variance_is_positive() {
    let ds = independent_data(800, 0.3, 4, None);
    let refs = References::default();
    let set = impute_mar_flat(&ds, 10, Link::Probit, &refs, 5).unwrap();
    let pooled =
        pool_rubin(&fit_copies(&ds, &set.copies, ModelKind::for_dataset(&ds), &refs).unwrap())
            .unwrap();
    for row in pooled.rows.iter().filter(|r| r.name.starts_with("x1_")) {
        assert!(row.b > 0.0, "{}: B = {}", row.name, row.b);
        assert!(row.t >= row.w);
    }
}

#[test]
fn imputation_is_deterministic_given_the_seed() {
    let ds = independent_data(500, 0.3, 6, None);
    let refs = References::default();
    let a = impute_mar_flat(&ds, 5, Link::Probit, &refs, 77).unwrap();
    let b = impute_mar_flat(&ds, 5, Link::Probit, &refs, 77).unwrap();
    let c = impute_mar_flat(&ds, 5, Link::Probit, &refs, 78).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.copies, c.copies);

    let ds = independent_data(300, 0.3, 6, Some(5));
    let gibbs = GibbsConfig {
        burn_in: 50,
        between: 5,
        seed: 1,
    };
    assert_eq!(
        impute_mar_hier(&ds, 3, &gibbs, &refs).unwrap(),
        impute_mar_hier(&ds, 3, &gibbs, &refs).unwrap()
    );
}

#[test]
fn relabelled_rows_give_the_same_imputation_distribution() {
    let ds = independent_data(2000, 0.3, 7, None);
    let refs = References::default();
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.reverse();
    let permuted = ds.select_rows(&order).unwrap();
    let a = impute_mar_flat(&ds, 30, Link::Probit, &refs, 1).unwrap();
    let b = impute_mar_flat(&permuted, 30, Link::Probit, &refs, 1).unwrap();
    let pa = &missing_category_profile(&a, &ds, "a", None).unwrap()[0];
    let pb = &missing_category_profile(&b, &permuted, "b", None).unwrap()[0];
    assert!(total_variation(&pa.proportions, &pb.proportions) < 0.03);
}

fn extreme_data(n: usize, rep: usize) -> (ScenarioConfig, Dataset) {
    let mut cfg = ScenarioConfig::preset(DesignKind::NonhierExtreme);
    cfg.n = n;
    let (_, masked) = simlab::replicate_data(&cfg, rep).unwrap();
    (cfg, masked)
}

#[test]
fn zero_delta_with_unit_variance_stays_close_to_mar() {
    // enough masked cells that sampling noise in the profiles sits well under the bound
    let (cfg, ds) = extreme_data(20_000, 0);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 20, Link::Probit, &refs, 2).unwrap();
    let spec = DeltaSpec::zero(5).with_sigma2(1.0);
    let adj = adjust(&set, &ds, &spec, Link::Probit, &refs, 3).unwrap();
    let mar = &missing_category_profile(&set, &ds, "MAR", None).unwrap()[0];
    let zero = &missing_category_profile(&adj.set, &ds, "zero", None).unwrap()[0];
    let tv = total_variation(&mar.proportions, &zero.proportions);
    assert!(tv < 0.02, "TV {tv}");
}

#[test]
fn collapsed_top_threshold_matches_the_latent_cdf() {
    let (cfg, ds) = extreme_data(3000, 1);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 10, Link::Probit, &refs, 4).unwrap();
    let spec = DeltaSpec::uniform(vec![0.0, 0.0, 0.0, -10.0]);
    let adj = adjust(&set, &ds, &spec, Link::Probit, &refs, 5).unwrap();
    let sd = spec.sigma2.sqrt();
    let (_, design) = ordelta::impute::fit_observed(&ds, Link::Probit, &refs).unwrap();
    let mut expected = 0.0;
    let mut observed = 0.0;
    let mut cells = 0.0;
    for (m, audit) in adj.copies.iter().enumerate() {
        // ζ*₄ falls below ζ*₃, so category 4 is empty and category 5 has mass P(θ* > ζ̂₃)
        for &i in &set.missing_rows {
            let eta: f64 = audit
                .beta_hat
                .iter()
                .zip(design.row(i))
                .map(|(b, x)| b * x)
                .sum();
            expected += 1.0 - normal_cdf((audit.zeta_hat[2] - eta) / sd);
            let c = adj.set.copies[m][i];
            assert_ne!(c, 4);
            observed += (c == 5) as u8 as f64;
            cells += 1.0;
        }
    }
    let p = expected / cells;
    let se = (p * (1.0 - p) / cells).sqrt();
    assert!(
        (observed / cells - p).abs() < 4.0 * se,
        "{} vs {p}",
        observed / cells
    );
}

#[test]
fn lowering_the_top_threshold_never_removes_top_category_cells() {
    let (cfg, ds) = extreme_data(1500, 2);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 5, Link::Probit, &refs, 6).unwrap();
    let runs: Vec<_> = [0.0, -1.0, -2.0]
        .iter()
        .map(|&d| {
            adjust(
                &set,
                &ds,
                &DeltaSpec::uniform(vec![0.0, 0.0, 0.0, d]),
                Link::Probit,
                &refs,
                8,
            )
            .unwrap()
        })
        .collect();
    for w in runs.windows(2) {
        for m in 0..set.m {
            for &i in &set.missing_rows {
                if w[0].set.copies[m][i] == 5 {
                    assert_eq!(w[1].set.copies[m][i], 5);
                }
            }
        }
        let count = |r: &ordelta::AdjustedImputationSet| {
            r.set.copies.iter().flatten().filter(|&&c| c == 5).count()
        };
        assert!(count(&w[1]) >= count(&w[0]));
    }
}

#[test]
fn adjustment_never_touches_observed_cells() {
    let (cfg, ds) = extreme_data(800, 3);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 4, Link::Probit, &refs, 1).unwrap();
    let adj = adjust(
        &set,
        &ds,
        &DeltaSpec::uniform(vec![-3.0, 1.0, 0.0, -2.0]),
        Link::Probit,
        &refs,
        2,
    )
    .unwrap();
    for c in &adj.set.copies {
        for (i, v) in ds.x1().iter().enumerate() {
            if let Some(v) = v {
                assert_eq!(c[i], *v);
            }
        }
    }
    assert_eq!(adj.set.missing_rows, set.missing_rows);
}

#[test]
fn stratum_specific_deltas_only_move_their_stratum() {
    let (cfg, ds) = extreme_data(1500, 4);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 4, Link::Probit, &refs, 1).unwrap();
    let mut spec = DeltaSpec::zero(5);
    spec.strata
        .insert("X2=3".into(), vec![0.0, 0.0, 0.0, -10.0]);
    let adj = adjust(&set, &ds, &spec, Link::Probit, &refs, 2).unwrap();
    let x2 = &ds.covariates()[0].codes;
    for c in &adj.set.copies {
        for &i in &set.missing_rows {
            if x2[i] == 3 {
                assert_ne!(c[i], 4);
            }
        }
    }
    let zeta = &adj.copies[0].zeta_star;
    assert_eq!(zeta["X2=3"][3], adj.copies[0].zeta_hat[3] - 10.0);
    assert_eq!(zeta["default"], adj.copies[0].zeta_hat);
}

#[test]
fn latent_noise_has_the_configured_variance() {
    let (cfg, ds) = extreme_data(4000, 5);
    let refs = cfg.references();
    let set = impute_mar_flat(&ds, 2, Link::Probit, &refs, 1).unwrap();
    let adj = adjust(&set, &ds, &DeltaSpec::zero(5), Link::Probit, &refs, 2).unwrap();
    let (_, design) =
        ordelta::impute::fit_completed(&ds, &set.copies[0], Link::Probit, &refs).unwrap();
    let a = &adj.copies[0];
    let resid: Vec<f64> = set
        .missing_rows
        .iter()
        .zip(&a.theta_star)
        .map(|(&i, t)| {
            t - a
                .beta_hat
                .iter()
                .zip(design.row(i))
                .map(|(b, x)| b * x)
                .sum::<f64>()
        })
        .collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(
        (var - 1.2).abs() < 4.0 * 1.2 * (2.0 / n).sqrt(),
        "variance {var}"
    );
}
