//! Generalized empirical likelihood for a scalar β with moments affine in β.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::psd_cholesky;
use crate::moments::{mean_and_cov, MomentMatrix};

/// EL domain guard: every `λᵀψ_i` must stay below this.
const EL_GUARD: f64 = 1.0 - 1e-6;
const INNER_TOL: f64 = 1e-9;
const INNER_MAX_IT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoFamily {
    El,
    Et,
    Cue,
}

impl RhoFamily {
    pub const ALL: [RhoFamily; 3] = [RhoFamily::El, RhoFamily::Et, RhoFamily::Cue];

    pub fn name(self) -> &'static str {
        match self {
            RhoFamily::El => "EL",
            RhoFamily::Et => "ET",
            RhoFamily::Cue => "CUE",
        }
    }
}

impl std::str::FromStr for RhoFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "el" => Ok(Self::El),
            "et" => Ok(Self::Et),
            "cue" => Ok(Self::Cue),
            o => Err(Error::domain(format!("unknown GEL family `{o}`"))),
        }
    }
}

impl std::fmt::Display for RhoFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `(ρ(v), ρ′(v), ρ″(v))`.
pub fn rho(v: f64, family: RhoFamily) -> Result<(f64, f64, f64)> {
    match family {
        RhoFamily::El => {
            if v >= 1.0 - 1e-10 {
                return Err(Error::domain(format!("EL rho undefined at v = {v}")));
            }
            let w = 1.0 - v;
            Ok((w.ln(), -1.0 / w, -1.0 / (w * w)))
        }
        RhoFamily::Et => {
            let e = v.exp();
            Ok((1.0 - e, -e, -e))
        }
        RhoFamily::Cue => Ok((-v - 0.5 * v * v, -1.0 - v, -1.0)),
    }
}

/// Result of the inner maximization over λ at one β.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub lambda: DVector<f64>,
    pub q: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn objective(psi: &DMatrix<f64>, lambda: &DVector<f64>, family: RhoFamily) -> Option<f64> {
    let v = psi * lambda;
    if family == RhoFamily::El && v.iter().any(|&x| x > EL_GUARD) {
        return None;
    }
    let mut total = 0.0;
    for &x in v.iter() {
        total += rho(x, family).ok()?.0;
    }
    Some(total / psi.nrows() as f64)
}

/// Maximize `(1/n) Σ ρ(λᵀψ_i)` over λ for the moment rows `psi` (`n x m`).
pub fn inner_lambda(psi: &DMatrix<f64>, family: RhoFamily, warm: Option<&DVector<f64>>) -> InnerSolution {
    let (n, m) = psi.shape();
    let nf = n as f64;
    // ρ(0) = 0, so a warm start is only worth keeping when it beats λ = 0
    let mut lambda = match warm {
        Some(w) if objective(psi, w, family).is_some_and(|q| q >= 0.0) => w.clone(),
        _ => DVector::zeros(m),
    };
    let mut q = objective(psi, &lambda, family).unwrap_or(0.0);
    let psi_t = psi.transpose();
    for it in 0..INNER_MAX_IT {
        let v = psi * &lambda;
        let mut d1 = DVector::zeros(n);
        let mut d2 = DVector::zeros(n);
        for i in 0..n {
            let (_, r1, r2) = rho(v[i], family).expect("iterate kept inside the domain");
            d1[i] = r1;
            d2[i] = -r2;
        }
        let grad = &psi_t * &d1 / nf;
        if grad.norm() < INNER_TOL {
            return InnerSolution {
                lambda,
                q,
                converged: true,
                iterations: it,
            };
        }
        let mut weighted = psi.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&d2);
        }
        let neg_hess = &psi_t * weighted / nf;
        let step = match psd_cholesky(&neg_hess, 1e-10) {
            Ok(c) => c.solve(&grad),
            Err(_) => grad.clone(),
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &lambda + &step * t;
            if let Some(qc) = objective(psi, &cand, family) {
                if qc >= q - 1e-15 * q.abs().max(1.0) {
                    lambda = cand;
                    q = qc;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            let converged = grad.norm() < 1e-7;
            return InnerSolution {
                lambda,
                q,
                converged,
                iterations: it,
            };
        }
    }
    let v = psi * &lambda;
    let d1 = DVector::from_iterator(n, v.iter().map(|&x| rho(x, family).unwrap().1));
    let converged = (psi_t * d1 / nf).norm() < INNER_TOL;
    InnerSolution {
        lambda,
        q,
        converged,
        iterations: INNER_MAX_IT,
    }
}

/// `Q̂(β)` with its maximizing λ.
pub fn q_hat(mm: &MomentMatrix, beta: f64, family: RhoFamily, warm: Option<&DVector<f64>>) -> InnerSolution {
    inner_lambda(&mm.at(beta), family, warm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GelOptions {
    pub lower: f64,
    pub upper: f64,
    pub grid_points: usize,
    pub tol: f64,
    pub alpha: f64,
}

impl Default for GelOptions {
    fn default() -> Self {
        Self {
            lower: -10.0,
            upper: 10.0,
            grid_points: 41,
            tol: 1e-8,
            alpha: 0.05,
        }
    }
}

impl GelOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) || !self.lower.is_finite() || !self.upper.is_finite() {
            return Err(Error::domain("search interval must be finite with lower < upper"));
        }
        if self.grid_points < 3 {
            return Err(Error::domain("need at least 3 grid points"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpScale {
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GelFit {
    pub family: RhoFamily,
    pub n: usize,
    pub m: usize,
    pub beta_hat: f64,
    pub lambda_hat: Vec<f64>,
    pub q_hat: f64,
    pub h_hat: f64,
    pub v_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    pub exp_scale: ExpScale,
    pub clip_count: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

struct Evaluator<'a> {
    mm: &'a MomentMatrix,
    family: RhoFamily,
    warm: Option<DVector<f64>>,
}

impl Evaluator<'_> {
    fn q(&mut self, beta: f64) -> f64 {
        let mut sol = q_hat(self.mm, beta, self.family, self.warm.as_ref());
        if !sol.converged && self.warm.is_some() {
            sol = q_hat(self.mm, beta, self.family, None);
        }
        self.warm = Some(sol.lambda);
        sol.q
    }
}

/// Minimize `Q̂(β)` over the search interval: coarse grid, golden section, Newton polish.
pub fn minimize_beta(mm: &MomentMatrix, family: RhoFamily, opts: &GelOptions) -> Result<GelFit> {
    opts.validate()?;
    let mut ev = Evaluator {
        mm,
        family,
        warm: None,
    };
    let k = opts.grid_points;
    let step = (opts.upper - opts.lower) / (k - 1) as f64;
    let grid: Vec<f64> = (0..k).map(|i| opts.lower + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&b| ev.q(b)).collect();
    let best = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Estimation("Q̂ was not finite at any grid point".into()))?;
    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(k - 1)];

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    ev.warm = None;
    let mut f1 = ev.q(x1);
    let mut f2 = ev.q(x2);
    while hi - lo > opts.tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = ev.q(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = ev.q(x2);
        }
    }
    let (mut beta, mut q) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    let mid = 0.5 * (lo + hi);
    let qm = ev.q(mid);
    if qm < q {
        beta = mid;
        q = qm;
    }

    // Newton polish from finite differences
    let h = 1e-4 * beta.abs().max(1.0);
    let (qp, qn) = (ev.q(beta + h), ev.q(beta - h));
    let d1 = (qp - qn) / (2.0 * h);
    let d2 = (qp - 2.0 * q + qn) / (h * h);
    if d2 > 0.0 {
        let cand = beta - d1 / d2;
        if (cand - beta).abs() <= h && cand >= opts.lower && cand <= opts.upper {
            let qc = ev.q(cand);
            if qc < q {
                beta = cand;
            }
        }
    }
    let sol = q_hat(mm, beta, family, ev.warm.as_ref());
    let mut warnings = Vec::new();
    if (beta - opts.lower).abs() < 1e-3 || (opts.upper - beta).abs() < 1e-3 {
        warnings.push(format!("beta_hat = {beta} lies on the search boundary"));
    }
    if !sol.converged {
        warnings.push("inner maximization did not converge at beta_hat".into());
    }
    Ok(GelFit {
        family,
        n: mm.n(),
        m: mm.m(),
        beta_hat: beta,
        lambda_hat: sol.lambda.iter().copied().collect(),
        q_hat: sol.q.max(0.0),
        h_hat: f64::NAN,
        v_hat: f64::NAN,
        se: f64::NAN,
        ci: (beta, beta),
        alpha: opts.alpha,
        exp_scale: ExpScale {
            estimate: beta.exp(),
            se: f64::NAN,
        },
        clip_count: mm.clip_count,
        converged: sol.converged,
        warnings,
    })
}

/// Fill in `Ĥ`, `V̂₁`, the standard error and the confidence interval.
pub fn variance(mm: &MomentMatrix, mut fit: GelFit) -> Result<GelFit> {
    let beta = fit.beta_hat;
    let family = fit.family;
    let warm = DVector::from_vec(fit.lambda_hat.clone());
    let h = (1e-4 * beta.abs()).max(1e-4);
    let q0 = q_hat(mm, beta, family, Some(&warm));
    let qp = q_hat(mm, beta + h, family, Some(&warm));
    let qn = q_hat(mm, beta - h, family, Some(&warm));
    let h_hat = (qp.q - 2.0 * q0.q + qn.q) / (h * h);
    fit.h_hat = h_hat;
    if !(h_hat > 0.0) || !h_hat.is_finite() {
        fit.converged = false;
        fit.se = f64::NAN;
        fit.v_hat = f64::NAN;
        fit.ci = (f64::NAN, f64::NAN);
        fit.exp_scale.se = f64::NAN;
        fit.warnings
            .push("nonpositive curvature of Q̂ at beta_hat: β is not identified by these moments".into());
        return Ok(fit);
    }
    let psi = mm.at(beta);
    let v = &psi * &q0.lambda;
    let mut num = DVector::zeros(mm.m());
    let mut den = 0.0;
    for i in 0..mm.n() {
        let r1 = rho(v[i], family)?.1;
        num += mm.slopes().row(i).transpose() * r1;
        den += r1;
    }
    let d_hat = num / den;
    let (_, omega) = mean_and_cov(mm, beta);
    let chol = psd_cholesky(&omega, 1e-10)?;
    let dod = d_hat.dot(&chol.solve(&d_hat));
    let v_hat = dod / (h_hat * h_hat);
    let se = (v_hat / mm.n() as f64).sqrt();
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - fit.alpha / 2.0);
    fit.v_hat = v_hat;
    fit.se = se;
    fit.ci = (beta - z * se, beta + z * se);
    fit.exp_scale.se = beta.exp() * se;
    Ok(fit)
}

/// Point estimate and standard error for one GEL family.
pub fn estimate(mm: &MomentMatrix, family: RhoFamily, opts: &GelOptions) -> Result<GelFit> {
    variance(mm, minimize_beta(mm, family, opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interactions::MomentSpec;
    use crate::moments::AffineMoment;

    #[test]
    fn rho_normalization() {
        for fam in RhoFamily::ALL {
            assert_eq!(rho(0.0, fam).unwrap(), (0.0, -1.0, -1.0));
        }
        assert_eq!(rho(2.0, RhoFamily::Cue).unwrap(), (-4.0, -3.0, -1.0));
        assert!((rho(0.5, RhoFamily::El).unwrap().0 - 0.5f64.ln()).abs() < 1e-15);
        assert!(rho(1.0, RhoFamily::El).is_err());
    }

    #[test]
    fn zero_mean_moments_give_zero_lambda() {
        let psi = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 2.0, -2.0]);
        for fam in RhoFamily::ALL {
            let s = inner_lambda(&psi, fam, None);
            assert!(s.lambda.norm() < 1e-12 && s.q.abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_cue_lambda() {
        let psi = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -0.5]);
        let s = inner_lambda(&psi, RhoFamily::Cue, None);
        let mean = 2.5 / 3.0;
        let omega = (1.0 + 4.0 + 0.25) / 3.0;
        assert!((s.lambda[0] + mean / omega).abs() < 1e-12);
    }

    #[test]
    fn exp_scale_at_zero() {
        // a-parts symmetric about zero, so the just-identified root is β = 0
        let rows: Vec<AffineMoment> = (0..40)
            .map(|i| {
                let x = if i % 2 == 0 { 0.5 + i as f64 * 0.01 } else { -(0.5 + (i - 1) as f64 * 0.01) };
                AffineMoment::new(vec![x], vec![-(1.0 + 0.3 * ((i / 2) as f64).sin())])
            })
            .collect();
        let mm = MomentMatrix::from_rows(&rows, MomentSpec::full(2, 2).unwrap(), vec![0; 40]).unwrap();
        let fit = estimate(&mm, RhoFamily::Cue, &GelOptions::default()).unwrap();
        assert!(fit.beta_hat.abs() < 1e-8);
        assert!((fit.exp_scale.estimate - 1.0).abs() < 1e-8);
        assert!((fit.exp_scale.se - fit.se).abs() < 1e-7 * fit.se);
        assert!(fit.ci.0 < fit.beta_hat && fit.beta_hat < fit.ci.1);
    }
}
