use igsaft_core::data::Dataset;
use igsaft_core::interactions::MomentSpec;
use igsaft_core::moments::{build_moment_matrix, eval_g, eval_psi, psi_rows, AffineMoment, MomentMatrix};
use igsaft_core::nuisance::{KernelConfig, KmConditioning, NuisanceFit};
use igsaft_core::simulate::oracle::OracleNuisance;
use igsaft_core::simulate::{generate, SimConfig};
use proptest::prelude::*;

fn fitted(data: &Dataset, spec: &MomentSpec, cond: KmConditioning) -> (Vec<usize>, Vec<NuisanceFit>) {
    let n = data.n();
    let folds: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let cfg = KernelConfig {
        conditioning: Some(cond),
        ..KernelConfig::default()
    };
    let fits = (0..2)
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            NuisanceFit::fit(&data.subset(&train).unwrap(), train, spec, &cfg).unwrap()
        })
        .collect();
    (folds, fits)
}

fn max_abs_diff(a: &AffineMoment, b: &AffineMoment) -> f64 {
    a.a.iter()
        .zip(&b.a)
        .chain(a.b.iter().zip(&b.b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn batched_psi_matches_term_by_term_evaluation() {
    let sim = SimConfig { n: 300, p: 4, target_cr: 0.35, seed: 11, ..SimConfig::default() };
    let (data, _) = generate(&sim, 0).unwrap();
    let spec = MomentSpec::full(4, 2).unwrap();
    for cond in [KmConditioning::Full, KmConditioning::DOnly, KmConditioning::Marginal] {
        let (folds, fits) = fitted(&data, &spec, cond);
        let mm = build_moment_matrix(&data, &folds, &fits, true).unwrap();
        for i in 0..data.n() {
            let slow = eval_psi(data.get(i), &fits[folds[i]]);
            let fast = mm.row(i);
            let scale = 1.0 + slow.a.iter().chain(&slow.b).map(|v| v.abs()).fold(0.0, f64::max);
            assert!(max_abs_diff(&slow, &fast) < 1e-9 * scale, "{cond:?} row {i}");
        }
    }
}

#[test]
fn uncensored_psi_is_g() {
    let sim = SimConfig { n: 400, p: 5, target_cr: 0.0, seed: 3, ..SimConfig::default() };
    let (data, _) = generate(&sim, 0).unwrap();
    assert_eq!(data.censoring_rate(), 0.0);
    let spec = MomentSpec::full(5, 2).unwrap();
    let (folds, fits) = fitted(&data, &spec, KmConditioning::Full);
    let psi = build_moment_matrix(&data, &folds, &fits, true).unwrap();
    let g = build_moment_matrix(&data, &folds, &fits, false).unwrap();
    let worst = (psi.intercepts() - g.intercepts())
        .abs()
        .max()
        .max((psi.slopes() - g.slopes()).abs().max());
    assert!(worst <= 1e-12, "max |psi - g| = {worst}");
}

#[test]
fn oracle_psi_is_unbiased_at_truth() {
    let sim = SimConfig { n: 20_000, p: 4, target_cr: 0.4, seed: 21, ..SimConfig::default() };
    let (data, truth) = generate(&sim, 0).unwrap();
    let spec = MomentSpec::full(4, 2).unwrap();
    let oracle = OracleNuisance::new(truth, spec.clone()).unwrap();
    let mm = MomentMatrix::from_rows(&psi_rows(&data, &oracle), spec, vec![0; data.n()]).unwrap();
    let psi = mm.at(1.0);
    let n = data.n() as f64;
    for j in 0..mm.m() {
        let col = psi.column(j);
        let mean = col.sum() / n;
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 4.0 * sd / n.sqrt(), "moment {j}: mean {mean}, sd {sd}");
    }
}

#[test]
fn oracle_g_matches_hand_computation() {
    let sim = SimConfig { n: 200, p: 3, target_cr: 0.0, seed: 2, ..SimConfig::default() };
    let (data, truth) = generate(&sim, 0).unwrap();
    let spec = MomentSpec::full(3, 2).unwrap();
    let oracle = OracleNuisance::new(truth.clone(), spec).unwrap();
    let pairs = [(0, 1), (0, 2), (1, 2)];
    for obs in data.iter().take(20) {
        let z = &obs.z;
        let lin_d: f64 = truth.theta.iter().zip(z).map(|(t, v)| t * v).sum();
        let lin_y: f64 = truth.phi.iter().zip(z).map(|(f, v)| f * v).sum::<f64>() + truth.beta0 * lin_d;
        let g = eval_g(obs, &oracle);
        for (k, &(a, b)) in pairs.iter().enumerate() {
            let c = z[a] * z[b];
            let beta = 0.7;
            let expect = c * ((obs.y - lin_y) - beta * (obs.d - lin_d));
            assert!((g.at(beta)[k] - expect).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn moments_are_affine_in_beta(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
        b1 in -3.0f64..3.0,
        b2 in -3.0f64..3.0,
        w in 0.0f64..1.0,
    ) {
        let m = AffineMoment::new(a, b);
        let mid = w * b1 + (1.0 - w) * b2;
        for j in 0..4 {
            let lhs = m.at(mid)[j];
            let rhs = w * m.at(b1)[j] + (1.0 - w) * m.at(b2)[j];
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn moment_matrix_rows_round_trip(seed in 0u64..50) {
        let sim = SimConfig { n: 150, p: 3, target_cr: 0.3, seed, ..SimConfig::default() };
        let (data, truth) = generate(&sim, 0).unwrap();
        let spec = MomentSpec::full(3, 2).unwrap();
        let oracle = OracleNuisance::new(truth, spec.clone()).unwrap();
        let rows = psi_rows(&data, &oracle);
        let mm = MomentMatrix::from_rows(&rows, spec, vec![0; data.n()]).unwrap();
        let beta = 0.3 + seed as f64 / 25.0;
        let stacked = mm.at(beta);
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.at(beta).into_iter().enumerate() {
                prop_assert!((stacked[(i, j)] - v).abs() < 1e-12);
            }
        }
    }
}
