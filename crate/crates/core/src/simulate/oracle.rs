//! Closed-form nuisance functions of the simulation design, for checking the
//! moment construction against its population counterpart.

use statrs::function::erf::erfc;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::interactions::MomentSpec;
use crate::moments::{AffineMoment, Augmentation, MomentNuisance};
use crate::simulate::Truth;

const SQRT_2PI: f64 = 2.506_628_274_631_000_2;
const PANELS: usize = 8;

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// `P(N(0,1) > x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// `M(a) - a` where `M` is the inverse Mills ratio; accurate in the far right tail.
fn mills_excess(a: f64) -> f64 {
    if a > 35.0 {
        let r = 1.0 / (a * a);
        (1.0 - 2.0 * r + 10.0 * r * r) / a
    } else {
        normal_pdf(a) / normal_sf(a) - a
    }
}

/// Inverse Mills ratio `φ(a) / (1 − Φ(a))`.
pub fn mills_ratio(a: f64) -> f64 {
    if a > 35.0 {
        a + mills_excess(a)
    } else {
        normal_pdf(a) / normal_sf(a)
    }
}

/// `log(1 − Φ(x))` without underflow.
pub fn log_normal_sf(x: f64) -> f64 {
    if x > 35.0 {
        -0.5 * x * x - SQRT_2PI.ln() - mills_ratio(x).ln()
    } else {
        normal_sf(x).ln()
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Censoring survival used by the oracle, relative to the true uniform law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CensorPath {
    True,
    /// `G₀(u)·exp(−t)`.
    Scaled(f64),
    /// `1 − s·(1 − G₀(u))`.
    Shrunk(f64),
}

/// True `ζ`, `ϑ`, `ω`, `G` and `ξ` for an order-2 moment spec, with optional
/// perturbations along nuisance directions.
#[derive(Debug, Clone)]
pub struct OracleNuisance {
    pub truth: Truth,
    pub spec: MomentSpec,
    pub zeta: Vec<f64>,
    /// Coefficients of `[1, Z]` for the outcome and the exposure.
    pub theta_y: Vec<f64>,
    pub theta_d: Vec<f64>,
    /// Adds `c·(1 − Φ((u − μ)/σ))` to the intercept part of every `ξ` component.
    pub xi_shift: f64,
    pub censor: CensorPath,
    nodes: Vec<(f64, f64)>,
}

impl OracleNuisance {
    pub fn new(truth: Truth, spec: MomentSpec) -> Result<Self> {
        if spec.q() != 2 {
            return Err(Error::domain("the oracle covers pairwise interaction moments only"));
        }
        let p = spec.p();
        let mut theta_y = vec![0.0];
        let mut theta_d = vec![0.0];
        for j in 0..p {
            theta_y.push(truth.beta0 * truth.theta[j] + truth.phi[j]);
            theta_d.push(truth.theta[j]);
        }
        Ok(Self {
            zeta: vec![0.0; p],
            theta_y,
            theta_d,
            xi_shift: 0.0,
            censor: CensorPath::True,
            nodes: gauss_legendre(16),
            truth,
            spec,
        })
    }

    fn g_survival(&self, u: f64) -> f64 {
        let g0 = self.truth.censor_survival(u);
        match self.censor {
            CensorPath::True => g0,
            CensorPath::Scaled(t) => g0 * (-t).exp(),
            CensorPath::Shrunk(s) => 1.0 - s * (1.0 - g0),
        }
    }

    /// `(τ₂ − u) / G(u)` on the censoring window.
    fn window_weight(&self, u: f64) -> f64 {
        let (t1, t2) = self.truth.tau;
        let w = t2 - t1;
        match self.censor {
            CensorPath::True => w,
            CensorPath::Scaled(t) => w * t.exp(),
            CensorPath::Shrunk(_) => (t2 - u) / self.g_survival(u),
        }
    }

    fn centered(&self, z: &[f64]) -> Vec<f64> {
        self.spec.indices().iter().map(|i| i.centered_product(z, &self.zeta)).collect()
    }

    fn linear(coef: &[f64], z: &[f64]) -> f64 {
        coef[0] + coef[1..].iter().zip(z).map(|(c, v)| c * v).sum::<f64>()
    }

    /// `∫_{-∞}^{y} f'(u) / G(u) du` for the two scalar profiles: the truncated
    /// mean `E[T | T ≥ u]` and the shift profile `1 − Φ((u − μ)/σ)`.
    fn integrals(&self, y: f64, mu: f64, sigma: f64) -> (f64, f64) {
        let mean_at = |u: f64| mu + sigma * mills_ratio((u - mu) / sigma);
        let shift_at = |u: f64| normal_sf((u - mu) / sigma);
        let (t1, t2) = self.truth.tau;
        let g_flat = self.g_survival(f64::NEG_INFINITY);
        let upper = if t1.is_finite() { y.min(t1) } else { y };
        let mut j_mean = (mean_at(upper) - mu) / g_flat;
        let mut j_shift = (shift_at(upper) - 1.0) / g_flat;
        if t1.is_finite() && y > t1 {
            let v0 = -(t2 - t1).ln();
            let v1 = -(t2 - y).ln();
            let h = (v1 - v0) / PANELS as f64;
            for k in 0..PANELS {
                let mid = v0 + h * (k as f64 + 0.5);
                for &(x, w) in &self.nodes {
                    let v = mid + 0.5 * h * x;
                    let u = t2 - (-v).exp();
                    let a = (u - mu) / sigma;
                    let ex = mills_excess(a);
                    let m = a + ex;
                    let weight = 0.5 * h * w * self.window_weight(u);
                    j_mean += weight * m * ex;
                    j_shift -= weight * normal_pdf(a) / sigma;
                }
            }
        }
        (j_mean, j_shift)
    }
}

impl MomentNuisance for OracleNuisance {
    fn m(&self) -> usize {
        self.spec.m()
    }

    fn g(&self, obs: &Observation) -> AffineMoment {
        let ry = obs.y - Self::linear(&self.theta_y, &obs.z);
        let rd = obs.d - Self::linear(&self.theta_d, &obs.z);
        let c = self.centered(&obs.z);
        AffineMoment::new(c.iter().map(|v| v * ry).collect(), c.iter().map(|v| -v * rd).collect())
    }

    fn censor_survival(&self, obs: &Observation) -> f64 {
        self.g_survival(obs.y)
    }

    fn augmentation(&self, obs: &Observation) -> Augmentation {
        let mu = self.truth.outcome_mean(&obs.z, obs.d);
        let sigma = self.truth.outcome_sd();
        let fy = Self::linear(&self.theta_y, &obs.z);
        let rd = obs.d - Self::linear(&self.theta_d, &obs.z);
        let c = self.centered(&obs.z);
        let a_y = (obs.y - mu) / sigma;
        let mean_y = mu + sigma * mills_ratio(a_y);
        let shift_y = self.xi_shift * normal_sf(a_y);
        let (j_mean, j_shift) = self.integrals(obs.y, mu, sigma);
        let b: Vec<f64> = c.iter().map(|v| -v * rd).collect();
        Augmentation {
            xi_at_y: AffineMoment::new(c.iter().map(|v| v * (mean_y - fy) + shift_y).collect(), b.clone()),
            xi_start: AffineMoment::new(c.iter().map(|v| v * (mu - fy) + self.xi_shift).collect(), b),
            integral: AffineMoment::new(
                c.iter().map(|v| v * j_mean + self.xi_shift * j_shift).collect(),
                vec![0.0; c.len()],
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_is_exact_for_polynomials() {
        let nodes = gauss_legendre(16);
        let s: f64 = nodes.iter().map(|(x, w)| w * x.powi(30)).sum();
        assert!((s - 2.0 / 31.0).abs() < 1e-14);
        assert!((nodes.iter().map(|n| n.1).sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn mills_ratio_branches_agree() {
        for a in [-5.0, 0.0, 1.0, 10.0, 34.9] {
            let direct = normal_pdf(a) / normal_sf(a);
            assert!((mills_ratio(a) - direct).abs() < 1e-10 * direct.max(1e-3));
        }
        let a = 35.0001;
        assert!((mills_ratio(a) - mills_ratio(34.9999)).abs() < 1e-3);
        assert!((log_normal_sf(1.0) - normal_sf(1.0).ln()).abs() < 1e-14);
        assert!(log_normal_sf(50.0).is_finite());
    }

    fn truth(tau: (f64, f64)) -> Truth {
        Truth {
            beta0: 1.0,
            theta: vec![1.0, 1.0],
            phi: vec![0.2, 0.0],
            phi_d: vec![(0, 1, 0.5)],
            tau,
        }
    }

    #[test]
    fn integral_matches_brute_force() {
        let o = OracleNuisance::new(truth((0.0, 3.0)), MomentSpec::full(2, 2).unwrap()).unwrap();
        let (mu, sigma, y) = (0.7, 0.55, 2.4);
        let (jm, _) = o.integrals(y, mu, sigma);
        // midpoint rule in u on a fine grid
        let mean_at = |u: f64| mu + sigma * mills_ratio((u - mu) / sigma);
        let mut brute = mean_at(0.0) - mu;
        let k = 200_000;
        let h = (y - 0.0) / k as f64;
        for i in 0..k {
            let u = (i as f64 + 0.5) * h;
            let d = (mean_at(u + 1e-6) - mean_at(u - 1e-6)) / 2e-6;
            brute += d / ((3.0 - u) / 3.0) * h;
        }
        assert!((jm - brute).abs() < 1e-6, "{jm} vs {brute}");
    }
}
