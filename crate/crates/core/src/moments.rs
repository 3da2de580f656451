//! The uncensored interaction moment `g`, its AIPCW transform `ψ`, and the
//! stacked moment matrix consumed by the GEL estimator.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::interactions::{vk_width, MomentSpec};
use crate::nuisance::NuisanceFit;

/// Rows per block when evaluating `ψ` against a training fold.
const BATCH: usize = 256;

/// A moment vector that is affine in β: `a + b·β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMoment {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineMoment {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Self {
        debug_assert_eq!(a.len(), b.len());
        Self { a, b }
    }

    pub fn zeros(m: usize) -> Self {
        Self::new(vec![0.0; m], vec![0.0; m])
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn at(&self, beta: f64) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a + b * beta).collect()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(
            self.a.iter().zip(&other.a).map(|(x, y)| x + y).collect(),
            self.b.iter().zip(&other.b).map(|(x, y)| x + y).collect(),
        )
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.a.iter().map(|v| v * c).collect(), self.b.iter().map(|v| v * c).collect())
    }
}

/// The pieces of the AIPCW augmentation for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    /// `ξ(Y | z, d)`, the value subtracted inside the IPCW term.
    pub xi_at_y: AffineMoment,
    /// `ξ(-∞ | z, d)`.
    pub xi_start: AffineMoment,
    /// `∫_{-∞}^{Y} dξ(u) / G(u)`.
    pub integral: AffineMoment,
}

/// Anything that supplies `g`, `G` and `ξ` for the AIPCW moment.
///
/// The fitted [`NuisanceFit`] implements it; so does the simulation oracle.
pub trait MomentNuisance {
    fn m(&self) -> usize;
    fn g(&self, obs: &Observation) -> AffineMoment;
    /// Censoring survival at the observation's own `Y`.
    fn censor_survival(&self, obs: &Observation) -> f64;
    fn augmentation(&self, obs: &Observation) -> Augmentation;
}

impl MomentNuisance for NuisanceFit {
    fn m(&self) -> usize {
        self.spec().m()
    }

    fn g(&self, obs: &Observation) -> AffineMoment {
        NuisanceFit::g(self, obs)
    }

    fn censor_survival(&self, obs: &Observation) -> f64 {
        self.censor_survival(obs.y, &obs.z, obs.d)
    }

    fn augmentation(&self, obs: &Observation) -> Augmentation {
        let layout = self.censor_model().layout();
        let state = self.target_state(&obs.z, obs.d);
        let grid = self.xi_grid(&state);
        let t_star = layout.grid_index(obs.y);
        let mut integral = AffineMoment::zeros(self.spec().m());
        for t in 1..=t_star {
            let gamma = 1.0 / state.curve.at_count(layout.grid_last[t] + 1);
            integral = integral.add(&grid[t].sub(&grid[t - 1]).scale(gamma));
        }
        Augmentation {
            xi_at_y: grid[t_star].clone(),
            xi_start: grid[0].clone(),
            integral,
        }
    }
}

/// Uncensored moment `g` of one observation.
pub fn eval_g<N: MomentNuisance + ?Sized>(obs: &Observation, nuis: &N) -> AffineMoment {
    nuis.g(obs)
}

/// AIPCW moment `ψ = δ/G(Y)·(g − ξ(Y)) + ξ(−∞) + ∫ dξ/G`, assembled term by term.
pub fn eval_psi<N: MomentNuisance + ?Sized>(obs: &Observation, nuis: &N) -> AffineMoment {
    let aug = nuis.augmentation(obs);
    let base = aug.xi_start.add(&aug.integral);
    if obs.delta {
        let ipcw = nuis.g(obs).sub(&aug.xi_at_y).scale(1.0 / nuis.censor_survival(obs));
        ipcw.add(&base)
    } else {
        base
    }
}

/// Stacked moment rows in dataset order.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    spec: MomentSpec,
    fold_tags: Vec<usize>,
    pub clip_count: usize,
    pub carry_count: usize,
    pub empty_risk_count: usize,
}

impl MomentMatrix {
    pub fn from_rows(rows: &[AffineMoment], spec: MomentSpec, fold_tags: Vec<usize>) -> Result<Self> {
        let m = spec.m();
        if rows.is_empty() {
            return Err(Error::domain("moment matrix needs at least one row"));
        }
        if rows.iter().any(|r| r.m() != m) {
            return Err(Error::domain(format!("every moment row must have length {m}")));
        }
        let n = rows.len();
        Ok(Self {
            a: DMatrix::from_fn(n, m, |i, j| rows[i].a[j]),
            b: DMatrix::from_fn(n, m, |i, j| rows[i].b[j]),
            spec,
            fold_tags,
            clip_count: 0,
            carry_count: 0,
            empty_risk_count: 0,
        })
    }

    /// Build directly from `n x m` intercept and slope matrices.
    pub fn from_parts(a: DMatrix<f64>, b: DMatrix<f64>, spec: MomentSpec) -> Result<Self> {
        if a.shape() != b.shape() || a.ncols() != spec.m() || a.nrows() == 0 {
            return Err(Error::domain("intercept and slope matrices must both be n x m with n > 0"));
        }
        let n = a.nrows();
        Ok(Self {
            a,
            b,
            spec,
            fold_tags: vec![0; n],
            clip_count: 0,
            carry_count: 0,
            empty_risk_count: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.ncols()
    }

    pub fn spec(&self) -> &MomentSpec {
        &self.spec
    }

    pub fn fold_tags(&self) -> &[usize] {
        &self.fold_tags
    }

    pub fn intercepts(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn slopes(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn row(&self, i: usize) -> AffineMoment {
        AffineMoment::new(
            self.a.row(i).iter().copied().collect(),
            self.b.row(i).iter().copied().collect(),
        )
    }

    /// `ψ_i(β)` for every row, as an `n x m` matrix.
    pub fn at(&self, beta: f64) -> DMatrix<f64> {
        &self.a + &self.b * beta
    }

    /// Restrict to the columns at `positions` of the current spec.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        let spec = self.spec.select(positions)?;
        // the selected spec is canonical-ordered; map its indices back to columns
        let cols = self
            .spec
            .positions_of(&spec)
            .ok_or_else(|| Error::domain("selected indices not in spec"))?;
        Ok(Self {
            a: self.a.select_columns(&cols),
            b: self.b.select_columns(&cols),
            spec,
            fold_tags: self.fold_tags.clone(),
            clip_count: self.clip_count,
            carry_count: self.carry_count,
            empty_risk_count: self.empty_risk_count,
        })
    }

    /// Write the `(a, b)` rows as CSV: `row,fold,a_1..a_m,b_1..b_m`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let m = self.m();
        let mut header = vec!["row".to_string(), "fold".to_string()];
        header.extend((1..=m).map(|j| format!("a_{j}")));
        header.extend((1..=m).map(|j| format!("b_{j}")));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![(i + 1).to_string(), self.fold_tags[i].to_string()];
            rec.extend(self.a.row(i).iter().map(|v| format!("{v:?}")));
            rec.extend(self.b.row(i).iter().map(|v| format!("{v:?}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `ψ̄(β)` and the uncentered second moment `Ω̄(β)`.
pub fn mean_and_cov(mm: &MomentMatrix, beta: f64) -> (DVector<f64>, DMatrix<f64>) {
    let psi = mm.at(beta);
    let n = mm.n() as f64;
    let mean = psi.row_sum().transpose() / n;
    let omega = psi.tr_mul(&psi) / n;
    (mean, omega)
}

/// Evaluate every row with the fit trained on the other fold.
///
/// `folds[i]` is the fold (0 or 1) holding row `i`; `nuisances[f]` must have been
/// trained on the rows *not* in fold `f`. With `augment = false` the rows are the
/// uncensored moments `g`.
pub fn build_moment_matrix(
    dataset: &Dataset,
    folds: &[usize],
    nuisances: &[NuisanceFit],
    augment: bool,
) -> Result<MomentMatrix> {
    if folds.len() != dataset.n() {
        return Err(Error::domain("fold assignment length differs from dataset size"));
    }
    let spec = nuisances
        .first()
        .ok_or_else(|| Error::domain("no nuisance fits"))?
        .spec()
        .clone();
    let min_rows = vk_width(spec.p(), spec.q()) + 2;
    for (f, nf) in nuisances.iter().enumerate() {
        let size = folds.iter().filter(|&&x| x == f).count();
        if size < min_rows || nf.training_ids().len() < min_rows {
            return Err(Error::IllPosed(format!(
                "fold {f} has {size} rows; at least {min_rows} are needed"
            )));
        }
        if nf.training_ids().iter().any(|&i| folds[i] == f) {
            return Err(Error::domain(format!("nuisance for fold {f} was trained on its own rows")));
        }
    }
    if folds.iter().any(|&f| f >= nuisances.len()) {
        return Err(Error::domain("fold index without a nuisance fit"));
    }
    let rows: Vec<(AffineMoment, bool, bool, bool)> = if augment {
        let mut blocks = Vec::new();
        for f in 0..nuisances.len() {
            let ids: Vec<usize> = (0..dataset.n()).filter(|&i| folds[i] == f).collect();
            blocks.extend(ids.chunks(BATCH).map(|c| (f, c.to_vec())));
        }
        let done: Vec<Vec<(usize, (AffineMoment, bool, bool, bool))>> = blocks
            .par_iter()
            .map(|(f, ids)| {
                let obs: Vec<&Observation> = ids.iter().map(|&i| dataset.get(i)).collect();
                ids.iter()
                    .zip(nuisances[*f].psi_batch(&obs))
                    .map(|(&i, (psi, w))| (i, (psi, w.clipped, w.carried, w.empty)))
                    .collect()
            })
            .collect();
        let mut rows = vec![None; dataset.n()];
        for (i, r) in done.into_iter().flatten() {
            rows[i] = Some(r);
        }
        rows.into_iter().map(|r| r.expect("every row belongs to a fold")).collect()
    } else {
        dataset
            .observations()
            .par_iter()
            .zip(folds.par_iter())
            .map(|(obs, &f)| (nuisances[f].g(obs), false, false, false))
            .collect()
    };
    let mut mm = MomentMatrix::from_rows(
        &rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
        spec,
        folds.to_vec(),
    )?;
    mm.clip_count = rows.iter().filter(|r| r.1).count();
    mm.carry_count = rows.iter().filter(|r| r.2).count();
    mm.empty_risk_count = rows.iter().filter(|r| r.3).count();
    Ok(mm)
}

/// Row-by-row `ψ` through the generic [`eval_psi`] path.
pub fn psi_rows<N: MomentNuisance + Sync>(dataset: &Dataset, nuis: &N) -> Vec<AffineMoment> {
    dataset.observations().par_iter().map(|o| eval_psi(o, nuis)).collect()
}

/// One point of an orthogonality probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbePoint {
    pub t: f64,
    /// `‖ψ̄(β₀, η_t)‖`.
    pub mean_norm: f64,
    /// `‖ψ̄(β₀, η_t) − ψ̄(β₀, η₀)‖` on the same sample.
    pub deviation: f64,
}

/// Mean-moment norm along the nuisance path `t ↦ path(t)`, with `path(0) = η₀`.
///
/// The deviation column compares each point with `t = 0` on the same sample,
/// which removes the sampling noise shared by every point of the path.
pub fn orthogonality_probe<N, F>(dataset: &Dataset, beta0: f64, t_grid: &[f64], path: F) -> Vec<ProbePoint>
where
    N: MomentNuisance + Sync,
    F: Fn(f64) -> N,
{
    let mean_at = |nuis: &N| -> DVector<f64> {
        let rows = psi_rows(dataset, nuis);
        let m = nuis.m();
        let mut acc = DVector::zeros(m);
        for r in &rows {
            for (j, v) in r.at(beta0).into_iter().enumerate() {
                acc[j] += v;
            }
        }
        acc / dataset.n() as f64
    };
    let base = mean_at(&path(0.0));
    t_grid
        .iter()
        .map(|&t| {
            let mean = mean_at(&path(t));
            ProbePoint {
                t,
                mean_norm: mean.norm(),
                deviation: (&mean - &base).norm(),
            }
        })
        .collect()
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
