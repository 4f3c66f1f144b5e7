//! Gauss–Hermite quadrature rules for the weight `exp(-x²)`.

/// Nodes and weights of the `n`-point Gauss–Hermite rule, nodes ascending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        // initial guesses for the i-th largest root
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly() {
        // ∫ x^{2k} e^{-x²} dx = Γ(k + 1/2)
        let sqrt_pi = std::f64::consts::PI.sqrt();
        for n in [1, 2, 5, 15, 25] {
            let (x, w) = gauss_hermite(n);
            assert!(x.windows(2).all(|p| p[0] < p[1]));
            let i0: f64 = w.iter().sum();
            assert!((i0 - sqrt_pi).abs() < 1e-12, "n={n}: {i0}");
            if n >= 3 {
                let i2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
                assert!((i2 - 0.5 * sqrt_pi).abs() < 1e-12);
                let i4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
                assert!((i4 - 0.75 * sqrt_pi).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn odd_rule_has_zero_node() {
        let (x, _) = gauss_hermite(15);
        assert!(x[7].abs() < 1e-14);
    }
}
