use igsaft_core::diagnostics::{chi2_upper, relevance_f_test, Covariance};
use igsaft_core::interactions::MomentSpec;
use igsaft_core::nuisance::estimate_means;
use igsaft_core::simulate::{generate, SimConfig};
use nalgebra::{DMatrix, DVector};

/// Asymptotic Kolmogorov–Smirnov p-value for the uniform distribution.
fn ks_uniform_p(mut p: Vec<f64>) -> f64 {
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let d = p
        .iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let s: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    s.clamp(0.0, 1.0)
}

#[test]
fn null_relevance_p_values_are_uniform() {
    let sim = SimConfig { n: 2000, p: 3, target_cr: 0.2, null_interactions: true, seed: 5, ..SimConfig::default() };
    let spec = MomentSpec::full(3, 2).unwrap();
    let p: Vec<f64> = (0..200)
        .map(|r| {
            let (d, _) = generate(&sim, r).unwrap();
            relevance_f_test(&d, &spec, &estimate_means(&d), Covariance::HC0).unwrap().p_value
        })
        .collect();
    let ks = ks_uniform_p(p);
    assert!(ks > 0.01, "KS p = {ks}");
}

#[test]
fn strong_interactions_are_detected() {
    let sim = SimConfig { n: 2000, p: 5, target_cr: 0.2, seed: 78, ..SimConfig::default() };
    let spec = MomentSpec::full(5, 2).unwrap();
    let (d, _) = generate(&sim, 0).unwrap();
    let t = relevance_f_test(&d, &spec, &estimate_means(&d), Covariance::HC3).unwrap();
    assert!(t.p_value < 1e-3);
    assert_eq!(t.df, vec![10.0, (2000 - 16) as f64]);
}

#[test]
fn wald_statistic_matches_direct_computation() {
    let sim = SimConfig { n: 400, p: 3, target_cr: 0.2, seed: 79, ..SimConfig::default() };
    let spec = MomentSpec::full(3, 2).unwrap();
    let (d, _) = generate(&sim, 0).unwrap();
    let zeta = estimate_means(&d);
    let t = relevance_f_test(&d, &spec, &zeta, Covariance::HC0).unwrap();

    let n = d.n();
    let pairs = [(0, 1), (0, 2), (1, 2)];
    let x = DMatrix::from_fn(n, 7, |i, j| {
        let z = &d.get(i).z;
        match j {
            0 => 1.0,
            1..=3 => z[j - 1],
            _ => {
                let (a, b) = pairs[j - 4];
                (z[a] - zeta[a]) * (z[b] - zeta[b])
            }
        }
    });
    let y = DVector::from_vec(d.exposure());
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let coef = &xtx_inv * x.transpose() * &y;
    let e = &y - &x * &coef;
    let mut meat = DMatrix::zeros(7, 7);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += &xi * xi.transpose() * (e[i] * e[i]);
    }
    let v = &xtx_inv * meat * &xtx_inv;
    let b = coef.rows(4, 3).into_owned();
    let w = b.dot(&(v.view((4, 4), (3, 3)).into_owned().try_inverse().unwrap() * &b));
    assert!((t.statistic - w / 3.0).abs() < 1e-8 * w.max(1.0));
    assert!((t.p_value - chi2_upper(w, 3.0)).abs() < 1e-12);
}

#[test]
fn chi_square_tail_matches_known_values() {
    // qchisq(0.95, df) from standard tables
    for (x, df) in [(3.841458820694124, 1.0), (11.070497693516351, 5.0), (60.48088658233645, 44.0)] {
        assert!((chi2_upper(x, df) - 0.05).abs() < 1e-9);
    }
    assert_eq!(chi2_upper(0.0, 3.0), 1.0);
}
