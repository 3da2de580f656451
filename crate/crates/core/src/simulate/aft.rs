//! Normal-error accelerated failure time model fitted by censored maximum likelihood.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::simulate::oracle::{log_normal_sf, mills_ratio};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AftFit {
    pub intercept: f64,
    pub beta: f64,
    pub sigma: f64,
    pub se: f64,
    pub log_likelihood: f64,
    pub converged: bool,
}

/// Log-likelihood and gradient in `(a, β, log σ)`.
fn loglik(data: &Dataset, theta: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let (a, b, s) = (theta[0], theta[1], theta[2]);
    let sigma = s.exp();
    let mut ll = 0.0;
    let mut g = Vector3::zeros();
    for o in data.iter() {
        let r = (o.y - a - b * o.d) / sigma;
        if o.delta {
            ll += -s - 0.5 * r * r - 0.5 * (2.0 * std::f64::consts::PI).ln();
            g += Vector3::new(r / sigma, r * o.d / sigma, r * r - 1.0);
        } else {
            ll += log_normal_sf(r);
            let m = mills_ratio(r);
            g += Vector3::new(m / sigma, m * o.d / sigma, m * r);
        }
    }
    (ll, g)
}

fn hessian(data: &Dataset, theta: &Vector3<f64>) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for j in 0..3 {
        let step = 1e-5 * theta[j].abs().max(1.0);
        let mut up = *theta;
        let mut dn = *theta;
        up[j] += step;
        dn[j] -= step;
        let col = (loglik(data, &up).1 - loglik(data, &dn).1) / (2.0 * step);
        h.set_column(j, &col);
    }
    (h + h.transpose()) * 0.5
}

/// Regress `Y` on `D` ignoring instruments; censored rows enter through the survival function.
pub fn aft_benchmark(data: &Dataset) -> AftFit {
    let n = data.n() as f64;
    let (my, md) = data.iter().fold((0.0, 0.0), |acc, o| (acc.0 + o.y / n, acc.1 + o.d / n));
    let sxy: f64 = data.iter().map(|o| (o.d - md) * (o.y - my)).sum();
    let sxx: f64 = data.iter().map(|o| (o.d - md).powi(2)).sum();
    let b0 = sxy / sxx;
    let a0 = my - b0 * md;
    let rss: f64 = data.iter().map(|o| (o.y - a0 - b0 * o.d).powi(2)).sum();
    let mut theta = Vector3::new(a0, b0, (rss / n).sqrt().max(1e-8).ln());
    let (mut ll, mut grad) = loglik(data, &theta);
    let mut converged = false;
    for _ in 0..200 {
        if grad.norm() < 1e-8 * n {
            converged = true;
            break;
        }
        let h = hessian(data, &theta);
        let step = match (-h).cholesky() {
            Some(c) => c.solve(&grad),
            None => grad / n,
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let cand = theta + step * t;
            let (lc, gc) = loglik(data, &cand);
            if lc.is_finite() && lc >= ll {
                theta = cand;
                ll = lc;
                grad = gc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = grad.norm() < 1e-5 * n;
            break;
        }
    }
    let info = -hessian(data, &theta);
    let se = info
        .try_inverse()
        .map(|v| v[(1, 1)])
        .filter(|v| *v > 0.0)
        .map_or(f64::NAN, f64::sqrt);
    if !converged || !se.is_finite() {
        return AftFit {
            intercept: f64::NAN,
            beta: f64::NAN,
            sigma: f64::NAN,
            se: f64::NAN,
            log_likelihood: ll,
            converged: false,
        };
    }
    AftFit {
        intercept: theta[0],
        beta: theta[1],
        sigma: theta[2].exp(),
        se,
        log_likelihood: ll,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    #[test]
    fn uncensored_reduces_to_ols() {
        let obs: Vec<Observation> = (0..200)
            .map(|i| {
                let d = (i as f64 * 0.37).sin() * 2.0;
                let y = 0.3 + 1.7 * d + (i as f64 * 1.3).cos();
                Observation::new(vec![0.0], d, y, true)
            })
            .collect();
        let data = Dataset::new(obs).unwrap();
        let fit = aft_benchmark(&data);
        let n = 200.0;
        let md: f64 = data.iter().map(|o| o.d).sum::<f64>() / n;
        let my: f64 = data.iter().map(|o| o.y).sum::<f64>() / n;
        let ols = data.iter().map(|o| (o.d - md) * (o.y - my)).sum::<f64>()
            / data.iter().map(|o| (o.d - md).powi(2)).sum::<f64>();
        assert!(fit.converged);
        assert!((fit.beta - ols).abs() < 1e-10);
    }

    #[test]
    fn recovers_slope_under_censoring() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal, Uniform};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let cu = Uniform::new(0.0, 4.0);
        let obs: Vec<Observation> = (0..4000)
            .map(|_| {
                let d: f64 = nd.sample(&mut rng);
                let t = 1.0 + 0.5 * d + 0.8 * nd.sample(&mut rng);
                let c: f64 = cu.sample(&mut rng);
                Observation::new(vec![0.0], d, t.min(c), t <= c)
            })
            .collect();
        let fit = aft_benchmark(&Dataset::new(obs).unwrap());
        assert!((fit.beta - 0.5).abs() < 4.0 * fit.se);
        assert!((fit.sigma - 0.8).abs() < 0.05);
    }
}
