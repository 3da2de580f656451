//! Adaptive-lasso pre-selection of interaction moments from the exposure regression.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interactions::MomentSpec;
use crate::linalg::{least_squares, ridge_cholesky};

const PATH_LEN: usize = 50;
const PATH_RATIO: f64 = 1e-3;
const FALLBACK_KEEP: usize = 10;

#[derive(Debug, Clone, Serialize)]
pub struct ScreenResult {
    pub selected: MomentSpec,
    /// Positions of the selected interactions within the candidate spec.
    pub selected_positions: Vec<usize>,
    pub pilot_coefs: Vec<f64>,
    /// Chosen penalty; `None` when the fallback rule picked the set.
    pub penalty: Option<f64>,
    /// `(penalty, support size)` along the computed path.
    pub path: Vec<(f64, usize)>,
    pub fallback: bool,
}

/// Centered candidate interactions residualized on `[1, Z]`, plus the residualized exposure.
fn residualized_design(dataset: &Dataset, candidates: &MomentSpec, zeta: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = dataset.n();
    let p = dataset.p();
    let r = candidates.m();
    let base = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { dataset.get(i).z[j - 1] });
    let x = DMatrix::from_fn(n, r, |i, t| candidates.indices()[t].centered_product(&dataset.get(i).z, zeta));
    let d = DVector::from_vec(dataset.exposure());
    let cols: Vec<DVector<f64>> = (0..r).map(|t| x.column(t).into_owned()).collect();
    let mut targets: Vec<&DVector<f64>> = cols.iter().collect();
    targets.push(&d);
    let fits = least_squares(&base, &targets)?;
    let mut xr = DMatrix::zeros(n, r);
    for t in 0..r {
        let res = &cols[t] - &base * &fits[t].coef;
        xr.set_column(t, &res);
    }
    let dr = &d - &base * &fits[r].coef;
    Ok((xr, dr))
}

/// Lasso on a Gram matrix by cyclic coordinate descent, warm-started from `coef`.
fn lasso_cd(gram: &DMatrix<f64>, xty: &DVector<f64>, n: f64, lambda: f64, coef: &mut DVector<f64>) {
    let r = coef.len();
    // grad_t = (x_t' y - Σ_s G_ts coef_s) / n
    let mut corr = xty - gram * &*coef;
    for _ in 0..10_000 {
        let mut max_delta: f64 = 0.0;
        for t in 0..r {
            let g = gram[(t, t)];
            if g <= 0.0 {
                continue;
            }
            let rho = corr[t] + g * coef[t];
            let z = rho / n;
            let new = z.signum() * (z.abs() - lambda).max(0.0) * n / g;
            let delta = new - coef[t];
            if delta != 0.0 {
                for s in 0..r {
                    corr[s] -= gram[(s, t)] * delta;
                }
                coef[t] = new;
                max_delta = max_delta.max(delta.abs() * g.sqrt());
            }
        }
        if max_delta < 1e-10 * n.sqrt() {
            break;
        }
    }
}

/// Screen `candidates` by an adaptive lasso of the exposure on the centered interactions.
///
/// The instruments' main effects are partialled out first and left unpenalized.
pub fn screen_interactions(dataset: &Dataset, candidates: &MomentSpec, max_keep: usize, zeta: &[f64]) -> Result<ScreenResult> {
    if candidates.m() == 0 {
        return Err(Error::domain("no candidate interactions"));
    }
    if max_keep == 0 {
        return Err(Error::domain("max_keep must be at least 1"));
    }
    let n = dataset.n();
    let nf = n as f64;
    let r = candidates.m();
    let (x, d) = residualized_design(dataset, candidates, zeta)?;
    let gram = x.tr_mul(&x);
    let xtd = x.tr_mul(&d);
    let pilot_chol = ridge_cholesky(&(&gram + DMatrix::identity(r, r) * (1e-4 * nf)), 0.0)?;
    let pilot = pilot_chol.solve(&xtd);
    // rescale column t by 1/w_t = |pilot_t| + 1e-8 so the weighted problem is a plain lasso
    let scale: Vec<f64> = pilot.iter().map(|b| b.abs() + 1e-8).collect();
    let sgram = DMatrix::from_fn(r, r, |s, t| gram[(s, t)] * scale[s] * scale[t]);
    let sxtd = DVector::from_fn(r, |t, _| xtd[t] * scale[t]);
    let lambda_max = sxtd.iter().fold(0.0_f64, |a, v| a.max(v.abs())) / nf;

    let mut path = Vec::with_capacity(PATH_LEN);
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    let dtd = d.dot(&d);
    let mut coef = DVector::zeros(r);
    if lambda_max > 0.0 {
        for k in 0..PATH_LEN {
            let lambda = lambda_max * PATH_RATIO.powf(k as f64 / (PATH_LEN - 1) as f64);
            lasso_cd(&sgram, &sxtd, nf, lambda, &mut coef);
            let df = coef.iter().filter(|c| **c != 0.0).count();
            path.push((lambda, df));
            let rss = (dtd - 2.0 * coef.dot(&sxtd) + coef.dot(&(&sgram * &coef))).max(1e-300);
            let bic = nf * (rss / nf).ln() + df as f64 * nf.ln();
            if best.as_ref().map_or(true, |b| bic < b.0) {
                best = Some((bic, lambda, coef.clone()));
            }
        }
    }
    let mut picked: Vec<(usize, f64)> = match &best {
        Some((_, _, c)) => c
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(t, v)| (t, (v * scale[t]).abs()))
            .collect(),
        None => vec![],
    };
    let fallback = picked.is_empty();
    let penalty = if fallback { None } else { best.map(|b| b.1) };
    if fallback {
        picked = pilot.iter().enumerate().map(|(t, v)| (t, v.abs())).collect();
        picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        picked.truncate(max_keep.min(FALLBACK_KEEP));
    } else {
        picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        picked.truncate(max_keep);
    }
    let mut positions: Vec<usize> = picked.into_iter().map(|(t, _)| t).collect();
    positions.sort_unstable();
    Ok(ScreenResult {
        selected: candidates.select(&positions)?,
        selected_positions: positions,
        pilot_coefs: pilot.iter().copied().collect(),
        penalty,
        path,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn data(n: usize, p: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let obs = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
                let e: f64 = StandardNormal.sample(&mut rng);
                Observation::new(z.clone(), f(&z) + e, 1.0, true)
            })
            .collect();
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn recovers_planted_interaction() {
        let ds = data(2000, 5, 1, |z| z[0] + z[0] * z[1] * 0.8);
        let spec = MomentSpec::full(5, 2).unwrap();
        let res = screen_interactions(&ds, &spec, 100, &[0.0; 5]).unwrap();
        assert!(!res.fallback);
        assert!(res.selected.indices().iter().any(|i| i.members() == [1, 2]));
        for w in res.path.windows(2) {
            assert!(w[0].0 > w[1].0);
        }
    }

    #[test]
    fn single_candidate_is_always_kept() {
        let ds = data(300, 3, 2, |z| z[0]);
        let spec = MomentSpec::from_index_lists(3, vec![vec![2, 3]]).unwrap();
        let res = screen_interactions(&ds, &spec, 100, &[0.0; 3]).unwrap();
        assert_eq!(res.selected, spec);
    }

    #[test]
    fn max_keep_truncates() {
        let ds = data(2000, 5, 3, |z| z[0] * z[1] + z[2] * z[3] + z[1] * z[4]);
        let spec = MomentSpec::full(5, 2).unwrap();
        let res = screen_interactions(&ds, &spec, 2, &[0.0; 5]).unwrap();
        assert_eq!(res.selected.m(), 2);
    }

    #[test]
    fn deterministic() {
        let ds = data(500, 4, 4, |z| z[0] * z[3]);
        let spec = MomentSpec::full(4, 2).unwrap();
        let a = screen_interactions(&ds, &spec, 100, &[0.0; 4]).unwrap();
        let b = screen_interactions(&ds, &spec, 100, &[0.0; 4]).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.pilot_coefs, b.pilot_coefs);
    }
}
