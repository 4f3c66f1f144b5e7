use ordelta::design::Design;
use ordelta::dist::{normal_quantile, std_normal, Link};
use ordelta::impute::classify_latent;
use ordelta::ordreg::{
    category_probs, fit_cumulative, linear_predictor, loglik_and_gradient, OrdinalFit,
    OrdinalProblem,
};
use ordelta::rng::stream;
use rand::Rng;

fn design(rows: &[Vec<f64>]) -> Design {
    let p = rows[0].len();
    Design {
        names: (0..p).map(|j| format!("v{j}")).collect(),
        n: rows.len(),
        p,
        data: rows.iter().flatten().copied().collect(),
    }
}

/// Three-category response driven by one binary and one continuous predictor.
fn sample_problem(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
    let mut rng = stream(seed, &[]);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let x = vec![(i % 2) as f64, rng.random::<f64>() * 2.0 - 1.0];
        let theta = 0.8 * x[0] - 0.5 * x[1] + std_normal(&mut rng);
        y.push(classify_latent(theta, &[-0.3, 0.6]));
        rows.push(x);
    }
    (rows, y)
}

#[test]
fn gradient_matches_central_differences_at_random_points() {
    let (rows, y) = sample_problem(200, 1);
    let d = design(&rows);
    let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
    let mut rng = stream(2, &[]);
    for link in [Link::Probit, Link::Logit] {
        for _ in 0..20 {
            let z1 = rng.random::<f64>() * 2.0 - 1.5;
            let params = vec![
                rng.random::<f64>() * 2.0 - 1.0,
                rng.random::<f64>() * 2.0 - 1.0,
                z1,
                z1 + 0.2 + rng.random::<f64>() * 1.5,
            ];
            let (_, g) = loglik_and_gradient(&params, &prob, link).unwrap();
            let h = 1e-6;
            let fd: Vec<f64> = (0..params.len())
                .map(|j| {
                    let mut up = params.clone();
                    let mut dn = params.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fu = loglik_and_gradient(&up, &prob, link).unwrap().0;
                    let fl = loglik_and_gradient(&dn, &prob, link).unwrap().0;
                    (fu - fl) / (2.0 * h)
                })
                .collect();
            let err: f64 = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
            assert!(
                err / norm < 1e-6,
                "relative gradient error {} at {params:?}",
                err / norm
            );
        }
    }
}

#[test]
fn intercept_only_thresholds_are_normal_quantiles() {
    // a design with no columns leaves only the thresholds
    let y: Vec<u32> = (0..90).map(|i| (i % 3) as u32 + 1).collect();
    let d = Design {
        names: vec![],
        n: 90,
        p: 0,
        data: vec![],
    };
    let fit = fit_cumulative(&OrdinalProblem::new(&d, &y, 3).unwrap(), Link::Probit).unwrap();
    assert!((fit.zeta[0] + 0.430_727_299_295_457_5).abs() < 1e-8);
    assert!((fit.zeta[1] - normal_quantile(2.0 / 3.0)).abs() < 1e-8);

    let y: Vec<u32> = [1; 10]
        .iter()
        .chain(&[2; 25])
        .chain(&[3; 40])
        .chain(&[4; 25])
        .copied()
        .collect();
    let d = Design {
        names: vec![],
        n: 100,
        p: 0,
        data: vec![],
    };
    let fit = fit_cumulative(&OrdinalProblem::new(&d, &y, 4).unwrap(), Link::Probit).unwrap();
    for (z, c) in fit.zeta.iter().zip([0.10, 0.35, 0.75]) {
        assert!((z - normal_quantile(c)).abs() < 1e-8);
    }
}

#[test]
fn grid_search_never_beats_the_optimum() {
    let mut rng = stream(11, &[]);
    let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![(i % 2) as f64]).collect();
    let y: Vec<u32> = rows
        .iter()
        .map(|x| classify_latent(0.7 * x[0] + std_normal(&mut rng), &[-0.2, 0.5]))
        .collect();
    let d = design(&rows);
    let prob = OrdinalProblem::new(&d, &y, 3).unwrap();
    let fit = fit_cumulative(&prob, Link::Probit).unwrap();
    let mut best = f64::NEG_INFINITY;
    let steps: Vec<f64> = (-15..=15).map(|s| s as f64 * 0.01).collect();
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                let params = [fit.beta[0] + a, fit.zeta[0] + b, fit.zeta[1] + c];
                if params[1] < params[2] {
                    best = best.max(loglik_and_gradient(&params, &prob, Link::Probit).unwrap().0);
                }
            }
        }
    }
    assert!(
        best <= fit.loglik + 1e-6,
        "grid {best} vs optimum {}",
        fit.loglik
    );
    let (_, g) = loglik_and_gradient(&fit.params(), &prob, Link::Probit).unwrap();
    assert!(g.iter().all(|v| v.abs() < 1e-8));
}

#[test]
fn permuting_rows_leaves_the_likelihood_unchanged() {
    let (rows, y) = sample_problem(120, 4);
    let d = design(&rows);
    let mut order: Vec<usize> = (0..120).rev().collect();
    order.rotate_left(17);
    let d2 = d.select(&order);
    let y2: Vec<u32> = order.iter().map(|&i| y[i]).collect();
    let params = [0.3, -0.2, -0.4, 0.7];
    let a = loglik_and_gradient(
        &params,
        &OrdinalProblem::new(&d, &y, 3).unwrap(),
        Link::Probit,
    )
    .unwrap()
    .0;
    let b = loglik_and_gradient(
        &params,
        &OrdinalProblem::new(&d2, &y2, 3).unwrap(),
        Link::Probit,
    )
    .unwrap()
    .0;
    assert!((a - b).abs() < 1e-10 * a.abs());
}

#[test]
fn linear_predictor_matches_naive_sum() {
    let fit = OrdinalFit::from_parameters(vec![1.0, 2.0], vec![0.0, 1.0], Link::Probit).unwrap();
    assert_eq!(linear_predictor(&fit, &[0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(linear_predictor(&fit, &[1.0, 1.0]).unwrap(), 3.0);
    assert!(linear_predictor(&fit, &[1.0]).is_err());

    let mut rng = stream(5, &[]);
    for _ in 0..100 {
        let beta: Vec<f64> = (0..6).map(|_| std_normal(&mut rng)).collect();
        let row: Vec<f64> = (0..6)
            .map(|_| (rng.random::<f64>() < 0.5) as u8 as f64)
            .collect();
        let fit = OrdinalFit::from_parameters(beta.clone(), vec![0.0], Link::Probit).unwrap();
        let mut naive = 0.0;
        for j in 0..6 {
            naive += beta[j] * row[j];
        }
        assert!((linear_predictor(&fit, &row).unwrap() - naive).abs() < 1e-14);
    }
}

#[test]
fn latent_draws_reproduce_category_probabilities() {
    let fit =
        OrdinalFit::from_parameters(vec![0.4], vec![-1.2, -0.3, 0.5, 1.4], Link::Probit).unwrap();
    let probs = category_probs(&fit, &[1.0]).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let n = 1_000_000;
    let mut counts = [0usize; 5];
    let mut rng = stream(6, &[]);
    for _ in 0..n {
        let theta = 0.4 + std_normal(&mut rng);
        counts[classify_latent(theta, &fit.zeta) as usize - 1] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let freq = *c as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 4.0 * se, "freq {freq} vs {p}");
    }
}

#[test]
fn two_category_symmetry() {
    let fit = OrdinalFit::from_parameters(vec![], vec![0.0], Link::Probit).unwrap();
    assert_eq!(category_probs(&fit, &[]).unwrap(), vec![0.5, 0.5]);
}
