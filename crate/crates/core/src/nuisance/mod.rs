//! Nuisance estimation: instrument means, partialling regressions, the local
//! Kaplan–Meier censoring model and the conditional moment `ξ̂`.

mod censoring;
mod kernel;

pub use censoring::{fit_local_km, CensorCurve, FoldLayout, LocalKm};
pub use kernel::{kernel_weights, Bandwidth, KernelConfig, KernelFamily, KernelSmoother, KmConditioning, WeightStatus};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::interactions::{build_vk, vk_row, vk_width, MomentSpec};
use crate::linalg::least_squares;
use crate::moments::AffineMoment;

/// Componentwise sample mean of the instruments.
pub fn estimate_means(fold: &Dataset) -> Vec<f64> {
    let n = fold.n() as f64;
    let mut zeta = vec![0.0; fold.p()];
    for o in fold.iter() {
        for (acc, v) in zeta.iter_mut().zip(&o.z) {
            *acc += v;
        }
    }
    zeta.iter_mut().for_each(|v| *v /= n);
    zeta
}

/// Coefficients of `Y` and `D` regressed on `V_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartialFit {
    pub order: usize,
    pub theta_y: Vec<f64>,
    pub theta_d: Vec<f64>,
    /// The design was rank deficient and a ridge was added.
    pub jittered: bool,
}

pub fn fit_partials(fold: &Dataset, k: usize) -> Result<PartialFit> {
    let width = vk_width(fold.p(), k);
    if width >= fold.n() {
        return Err(Error::IllPosed(format!(
            "V_{k} has {width} columns but the fold has only {} rows",
            fold.n()
        )));
    }
    let v = build_vk(fold, k)?;
    let y = DVector::from_vec(fold.outcome());
    let d = DVector::from_vec(fold.exposure());
    let fits = least_squares(&v, &[&y, &d])?;
    Ok(PartialFit {
        order: k,
        theta_y: fits[0].coef.iter().copied().collect(),
        theta_d: fits[1].coef.iter().copied().collect(),
        jittered: fits[0].jittered,
    })
}

/// Per-target quantities shared by `Ĝ` and `ξ̂` evaluations.
#[derive(Debug, Clone)]
pub struct TargetState {
    pub curve: CensorCurve,
    /// `B_s δ_s / Ĝ(Y_s)` in sorted order (zero for censored positions).
    pub event_weight: Vec<f64>,
    /// Weighted risk-set size at `u_0 = -∞, u_1, ..., u_K`.
    pub den: Vec<f64>,
    /// Largest grid index with a nonzero denominator.
    pub last_live: Option<usize>,
}

/// Linear representation of `ψ_i` in terms of `g`: `ψ = self_weight·g_i + Σ_s coef_s g_s`.
#[derive(Debug, Clone)]
pub struct AugmentationWeights {
    pub self_weight: f64,
    /// Coefficients over the training fold in sorted order.
    pub coef: DVector<f64>,
    pub clipped: bool,
    /// The integral reached past the last nonempty risk set.
    pub carried: bool,
    /// Every risk set was empty, so `ξ̂ ≡ 0`.
    pub empty: bool,
}

/// All nuisance functions fitted on one auxiliary fold.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    zeta: Vec<f64>,
    partials: Vec<PartialFit>,
    spec: MomentSpec,
    censor: LocalKm,
    /// Training-fold `g` intercept and slope parts, sorted by `Y`.
    train_a: DMatrix<f64>,
    train_b: DMatrix<f64>,
    training_ids: Vec<usize>,
}

impl NuisanceFit {
    /// Fit everything on `fold`; `training_ids` records which dataset rows it holds.
    pub fn fit(fold: &Dataset, training_ids: Vec<usize>, spec: &MomentSpec, cfg: &KernelConfig) -> Result<Self> {
        let zeta = estimate_means(fold);
        Self::fit_with_zeta(fold, training_ids, spec, cfg, zeta)
    }

    pub fn fit_with_zeta(
        fold: &Dataset,
        training_ids: Vec<usize>,
        spec: &MomentSpec,
        cfg: &KernelConfig,
        zeta: Vec<f64>,
    ) -> Result<Self> {
        if fold.p() != spec.p() {
            return Err(Error::domain(format!("spec expects p = {}, data has {}", spec.p(), fold.p())));
        }
        let partials = spec
            .orders()
            .into_iter()
            .map(|k| fit_partials(fold, k))
            .collect::<Result<Vec<_>>>()?;
        let censor = LocalKm::fit(fold, cfg)?;
        let mut fit = Self {
            zeta,
            partials,
            spec: spec.clone(),
            censor,
            train_a: DMatrix::zeros(0, 0),
            train_b: DMatrix::zeros(0, 0),
            training_ids,
        };
        let m = spec.m();
        let perm = fit.censor.layout().perm.clone();
        let mut a = DMatrix::zeros(perm.len(), m);
        let mut b = DMatrix::zeros(perm.len(), m);
        for (s, &row) in perm.iter().enumerate() {
            let g = fit.g(fold.get(row));
            for j in 0..m {
                a[(s, j)] = g.a[j];
                b[(s, j)] = g.b[j];
            }
        }
        fit.train_a = a;
        fit.train_b = b;
        Ok(fit)
    }

    /// Replace the fitted partialling coefficients, e.g. with known values.
    pub fn from_parts(
        fold: &Dataset,
        training_ids: Vec<usize>,
        spec: &MomentSpec,
        cfg: &KernelConfig,
        zeta: Vec<f64>,
        partials: Vec<PartialFit>,
    ) -> Result<Self> {
        let mut fit = Self::fit_with_zeta(fold, training_ids, spec, cfg, zeta.clone())?;
        for k in spec.orders() {
            if !partials.iter().any(|p| p.order == k) {
                return Err(Error::domain(format!("no partial fit for order {k}")));
            }
        }
        fit.partials = partials;
        fit.zeta = zeta;
        let perm = fit.censor.layout().perm.clone();
        for (s, &row) in perm.iter().enumerate() {
            let g = fit.g(fold.get(row));
            for j in 0..spec.m() {
                fit.train_a[(s, j)] = g.a[j];
                fit.train_b[(s, j)] = g.b[j];
            }
        }
        Ok(fit)
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn partials(&self) -> &[PartialFit] {
        &self.partials
    }

    pub fn spec(&self) -> &MomentSpec {
        &self.spec
    }

    pub fn censor_model(&self) -> &LocalKm {
        &self.censor
    }

    pub fn training_ids(&self) -> &[usize] {
        &self.training_ids
    }

    pub fn bandwidth(&self) -> f64 {
        self.censor.smoother().bandwidth()
    }

    fn partial(&self, k: usize) -> &PartialFit {
        self.partials.iter().find(|p| p.order == k).expect("partial fitted for every order")
    }

    /// Uncensored moment `g(β; O)` in affine form.
    pub fn g(&self, obs: &Observation) -> AffineMoment {
        let q = self.spec.q();
        let v = vk_row(&obs.z, q);
        let orders = self.spec.orders();
        let resid: Vec<(usize, f64, f64)> = orders
            .iter()
            .map(|&k| {
                let pf = self.partial(k);
                let w = pf.theta_y.len();
                let fy: f64 = v[..w].iter().zip(&pf.theta_y).map(|(x, c)| x * c).sum();
                let fd: f64 = v[..w].iter().zip(&pf.theta_d).map(|(x, c)| x * c).sum();
                (k, obs.y - fy, obs.d - fd)
            })
            .collect();
        let m = self.spec.m();
        let mut a = Vec::with_capacity(m);
        let mut b = Vec::with_capacity(m);
        for idx in self.spec.indices() {
            let c = idx.centered_product(&obs.z, &self.zeta);
            let &(_, ry, rd) = resid.iter().find(|r| r.0 == idx.order()).unwrap();
            a.push(c * ry);
            b.push(-c * rd);
        }
        AffineMoment::new(a, b)
    }

    /// Clipped `Ĝ(y | z, d)`.
    pub fn censor_survival(&self, y: f64, z: &[f64], d: f64) -> f64 {
        self.censor.survival(y, z, d)
    }

    pub fn target_state(&self, z: &[f64], d: f64) -> TargetState {
        let layout = self.censor.layout();
        let curve = self.censor.curve(z, d);
        let n = layout.n();
        let mut event_weight = vec![0.0; n];
        for s in 0..n {
            let t = layout.event_grid[s];
            if t > 0 {
                event_weight[s] = curve.weights[s] / curve.at_count(layout.grid_last[t] + 1);
            }
        }
        let mut suffix = vec![0.0; n + 1];
        for s in (0..n).rev() {
            suffix[s] = suffix[s + 1] + event_weight[s];
        }
        let k = layout.grid.len();
        let mut den = Vec::with_capacity(k + 1);
        den.push(suffix[0]);
        for t in 1..=k {
            den.push(suffix[layout.grid_start[t]]);
        }
        let last_live = (0..=k).rev().find(|&t| den[t] > 0.0);
        TargetState {
            curve,
            event_weight,
            den,
            last_live,
        }
    }

    /// `ξ̂(u_t)` for `t = 0..=K` (with `u_0 = -∞`), carried forward past empty risk sets.
    pub fn xi_grid(&self, state: &TargetState) -> Vec<AffineMoment> {
        let layout = self.censor.layout();
        let m = self.spec.m();
        let k = layout.grid.len();
        let n = layout.n();
        // suffix sums of weighted g rows, accumulated per grid point from the top
        let mut acc_a = vec![0.0; m];
        let mut acc_b = vec![0.0; m];
        let mut out = vec![AffineMoment::zeros(m); k + 1];
        let mut s = n;
        for t in (0..=k).rev() {
            let start = if t == 0 { 0 } else { layout.grid_start[t] };
            while s > start {
                s -= 1;
                let w = state.event_weight[s];
                if w != 0.0 {
                    for j in 0..m {
                        acc_a[j] += w * self.train_a[(s, j)];
                        acc_b[j] += w * self.train_b[(s, j)];
                    }
                }
            }
            if state.den[t] > 0.0 {
                out[t] = AffineMoment::new(
                    acc_a.iter().map(|v| v / state.den[t]).collect(),
                    acc_b.iter().map(|v| v / state.den[t]).collect(),
                );
            }
        }
        if let Some(live) = state.last_live {
            for t in live + 1..=k {
                out[t] = out[live].clone();
            }
        }
        out
    }

    /// `ξ̂(β; u, z, d)` with the risk set `Y_j >= u`, carried forward past the last event.
    ///
    /// The boolean is true when the value came from carry-forward or an all-empty risk set.
    pub fn cond_moment(&self, u: f64, z: &[f64], d: f64) -> (AffineMoment, bool) {
        let layout = self.censor.layout();
        let state = self.target_state(z, d);
        let grid = self.xi_grid(&state);
        let k = layout.grid.len();
        // grid points strictly below u drop out of the risk set
        let c = layout.grid.partition_point(|&g| g < u);
        match state.last_live {
            None => (AffineMoment::zeros(self.spec.m()), true),
            Some(l) if c >= k || c + 1 > l => (grid[l].clone(), true),
            Some(_) => (grid[if c == 0 { 0 } else { c + 1 }].clone(), false),
        }
    }

    /// Coefficients expressing `ψ_i` as a linear map of `g` (see [`AugmentationWeights`]).
    pub fn augmentation_weights(&self, obs: &Observation, state: &TargetState) -> AugmentationWeights {
        let layout = self.censor.layout();
        let n = layout.n();
        let count = layout.count_le(obs.y);
        let g_y = state.curve.at_count(count);
        let clipped = state.curve.is_clipped_at_count(count);
        let self_weight = if obs.delta { 1.0 / g_y } else { 0.0 };
        let t_star = layout.grid_index(obs.y);
        let gamma = |t: usize| 1.0 / state.curve.at_count(layout.grid_last[t] + 1);
        let mut kappa = vec![0.0; t_star + 1];
        if t_star == 0 {
            kappa[0] = 1.0 - self_weight;
        } else {
            kappa[0] = 1.0 - gamma(1);
            for (t, kt) in kappa.iter_mut().enumerate().take(t_star).skip(1) {
                *kt = gamma(t) - gamma(t + 1);
            }
            kappa[t_star] = gamma(t_star) - self_weight;
        }
        let mut coef = DVector::zeros(n);
        let Some(live) = state.last_live else {
            return AugmentationWeights {
                self_weight,
                coef,
                clipped,
                carried: false,
                empty: true,
            };
        };
        let carried = t_star > live;
        if carried {
            let extra: f64 = kappa[live + 1..].iter().sum();
            kappa[live] += extra;
            kappa.truncate(live + 1);
        }
        let top = kappa.len() - 1;
        let mut prefix = Vec::with_capacity(top + 1);
        let mut run = 0.0;
        for (t, kt) in kappa.iter().enumerate() {
            if *kt != 0.0 {
                run += kt / state.den[t];
            }
            prefix.push(run);
        }
        for s in 0..n {
            let w = state.event_weight[s];
            if w != 0.0 {
                let t = layout.event_grid[s].min(top);
                coef[s] = w * prefix[t];
            }
        }
        AugmentationWeights {
            self_weight,
            coef,
            clipped,
            carried,
            empty: false,
        }
    }

    /// [`psi_fast`](Self::psi_fast) for a block of rows, with the training-fold
    /// products done as one matrix multiply.
    pub fn psi_batch(&self, obs: &[&Observation]) -> Vec<(AffineMoment, AugmentationWeights)> {
        let n = self.train_a.nrows();
        let mut coefs = DMatrix::zeros(n, obs.len());
        let mut weights = Vec::with_capacity(obs.len());
        for (c, o) in obs.iter().enumerate() {
            let state = self.target_state(&o.z, o.d);
            let w = self.augmentation_weights(o, &state);
            coefs.set_column(c, &w.coef);
            weights.push(w);
        }
        let ca = self.train_a.transpose() * &coefs;
        let cb = self.train_b.transpose() * &coefs;
        obs.iter()
            .zip(weights)
            .enumerate()
            .map(|(c, (o, w))| {
                let g = self.g(o);
                let a = g.a.iter().zip(ca.column(c).iter()).map(|(gi, v)| w.self_weight * gi + v).collect();
                let b = g.b.iter().zip(cb.column(c).iter()).map(|(gi, v)| w.self_weight * gi + v).collect();
                (AffineMoment::new(a, b), w)
            })
            .collect()
    }

    /// `ψ_i` from its linear representation, plus whether `Ĝ(Y_i)` was clipped.
    pub fn psi_fast(&self, obs: &Observation) -> (AffineMoment, AugmentationWeights) {
        let state = self.target_state(&obs.z, obs.d);
        let w = self.augmentation_weights(obs, &state);
        let g = self.g(obs);
        let ca = self.train_a.tr_mul(&w.coef);
        let cb = self.train_b.tr_mul(&w.coef);
        let a = g.a.iter().zip(ca.iter()).map(|(gi, c)| w.self_weight * gi + c).collect();
        let b = g.b.iter().zip(cb.iter()).map(|(gi, c)| w.self_weight * gi + c).collect();
        (AffineMoment::new(a, b), w)
    }
}
