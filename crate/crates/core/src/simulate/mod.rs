//! Simulation designs with invalid instruments and weak interaction
//! instruments, censoring calibration, the naive AFT benchmark and a Monte
//! Carlo harness.

mod aft;
pub mod oracle;

pub use aft::{aft_benchmark, AftFit};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, Observation};
use crate::error::{Error, Result};
use crate::gel::RhoFamily;
use crate::pipeline::{fit_igsaft, FitConfig};

const PILOT_DRAWS: usize = 100_000;
const ERROR_VAR: f64 = 0.4;
const ERROR_COV: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Design 1–4.
    pub case: u8,
    pub n: usize,
    pub p: usize,
    /// Target censoring rate; 0 disables censoring.
    pub target_cr: f64,
    /// Interaction scale `c` in `φ_D = c·n^(-1/4)`.
    pub c_weak: f64,
    pub beta0: f64,
    pub reps: usize,
    pub seed: u64,
    /// Share of pairwise interactions that are nonzero when `p > 10`.
    pub nonzero_frac: f64,
    /// Draw the nonzero interaction set once from `seed` instead of per replication.
    pub fix_support: bool,
    /// Set every interaction coefficient to zero (size studies).
    pub null_interactions: bool,
    /// Explicit censoring interval, bypassing calibration.
    pub tau: Option<(f64, f64)>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            case: 1,
            n: 2000,
            p: 10,
            target_cr: 0.2,
            c_weak: 4.0,
            beta0: 1.0,
            reps: 100,
            seed: 1,
            nonzero_frac: 0.4,
            fix_support: false,
            null_interactions: false,
            tau: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.case) {
            return Err(Error::domain(format!("case must be 1, 2, 3 or 4, got {}", self.case)));
        }
        if self.n < 100 {
            return Err(Error::domain(format!("n must be at least 100, got {}", self.n)));
        }
        if self.p < 2 {
            return Err(Error::domain("p must be at least 2"));
        }
        if self.reps == 0 {
            return Err(Error::domain("reps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.target_cr) {
            return Err(Error::domain(format!("target censoring rate must lie in [0, 1), got {}", self.target_cr)));
        }
        if !(0.0..=1.0).contains(&self.nonzero_frac) {
            return Err(Error::domain("nonzero_frac must lie in [0, 1]"));
        }
        if let Some((a, b)) = self.tau {
            if !(a < b) {
                return Err(Error::domain("censoring interval needs tau1 < tau2"));
            }
        }
        Ok(())
    }

    /// `φ_D = c·n^(-1/4)`.
    pub fn interaction_scale(&self) -> f64 {
        self.c_weak * (self.n as f64).powf(-0.25)
    }
}

/// Coefficients drawn for one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta0: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    /// Nonzero pairwise interactions `(j, k, coefficient)`, 0-based `j < k`.
    pub phi_d: Vec<(usize, usize, f64)>,
    /// Censoring interval; infinite when there is no censoring.
    pub tau: (f64, f64),
}

impl Truth {
    /// `E[D | Z]`.
    pub fn exposure_mean(&self, z: &[f64]) -> f64 {
        let main: f64 = self.theta.iter().zip(z).map(|(t, v)| t * v).sum();
        main + self.phi_d.iter().map(|&(j, k, c)| c * z[j] * z[k]).sum::<f64>()
    }

    /// `E[T | Z, D]`, using `E[ε | ν] = ν/2`.
    pub fn outcome_mean(&self, z: &[f64], d: f64) -> f64 {
        let nu = d - self.exposure_mean(z);
        let direct: f64 = self.phi.iter().zip(z).map(|(f, v)| f * v).sum();
        self.beta0 * d + direct + ERROR_COV / ERROR_VAR * nu
    }

    /// `SD(T | Z, D)`.
    pub fn outcome_sd(&self) -> f64 {
        (ERROR_VAR - ERROR_COV * ERROR_COV / ERROR_VAR).sqrt()
    }

    /// `P(C > u)`.
    pub fn censor_survival(&self, u: f64) -> f64 {
        let (a, b) = self.tau;
        if !a.is_finite() || u < a {
            1.0
        } else if u >= b {
            0.0
        } else {
            (b - u) / (b - a)
        }
    }
}

/// Normal draws by inverse CDF of the uniform stream.
struct NormalStream<R: Rng> {
    rng: R,
    dist: Normal,
}

impl<R: Rng> NormalStream<R> {
    fn new(rng: R) -> Self {
        Self {
            rng,
            dist: Normal::new(0.0, 1.0).unwrap(),
        }
    }

    fn next(&mut self) -> f64 {
        // open interval (0, 1)
        let u: f64 = ((self.rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        self.dist.inverse_cdf(u)
    }
}

fn rep_stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_support(p: usize, frac: f64, rng: &mut ChaCha20Rng) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j + 1..p).map(move |k| (j, k))).collect();
    if p > 10 {
        let keep = (frac * pairs.len() as f64).round() as usize;
        pairs.shuffle(rng);
        pairs.truncate(keep);
        pairs.sort_unstable();
    }
    pairs
}

fn draw_truth(cfg: &SimConfig, rep: usize) -> Truth {
    let p = cfg.p;
    let mut rng = rep_stream(cfg.seed, 2 * rep as u64);
    let pick = |count: usize, rng: &mut ChaCha20Rng| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..p).collect();
        idx.shuffle(rng);
        idx.truncate(count);
        idx
    };
    let share = |f: f64| (f * p as f64).round() as usize;
    let mut theta = vec![1.0; p];
    let mut phi = vec![0.0; p];
    match cfg.case {
        1 => {
            for j in pick(share(0.3), &mut rng) {
                phi[j] = 0.2;
            }
        }
        2 => {
            let invalid = pick(share(0.6), &mut rng);
            let third = invalid.len() / 3;
            for (r, j) in invalid.into_iter().enumerate() {
                phi[j] = match (r / third.max(1)).min(2) {
                    0 => 0.2,
                    1 => 0.4,
                    _ => 0.6,
                };
            }
        }
        3 => {
            let mut ns = NormalStream::new(ChaCha20Rng::seed_from_u64(rng.gen()));
            for j in 0..p {
                theta[j] = 1.0 + ns.next();
                phi[j] = 0.2 + 0.2f64.sqrt() * ns.next();
            }
        }
        _ => {
            let mut ns = NormalStream::new(ChaCha20Rng::seed_from_u64(rng.gen()));
            for t in theta.iter_mut() {
                *t = 1.0 + ns.next();
            }
            for j in pick(share(0.7), &mut rng) {
                phi[j] = 0.5 * theta[j];
            }
        }
    }
    let support = if cfg.fix_support {
        draw_support(p, cfg.nonzero_frac, &mut rep_stream(cfg.seed, u64::MAX))
    } else {
        draw_support(p, cfg.nonzero_frac, &mut rng)
    };
    let scale = if cfg.null_interactions { 0.0 } else { cfg.interaction_scale() };
    let phi_d = support.into_iter().map(|(j, k)| (j, k, scale)).collect();
    Truth {
        beta0: cfg.beta0,
        theta,
        phi,
        phi_d,
        tau: (f64::INFINITY, f64::INFINITY),
    }
}

/// One draw of `(Z, D, T)`.
fn draw_unit(truth: &Truth, ns: &mut NormalStream<ChaCha20Rng>) -> (Vec<f64>, f64, f64) {
    let p = truth.theta.len();
    let z: Vec<f64> = (0..p).map(|_| ns.next()).collect();
    let e1 = ns.next();
    let e2 = ns.next();
    let eps = ERROR_VAR.sqrt() * e1;
    let nu = ERROR_COV / ERROR_VAR * eps + (ERROR_VAR - ERROR_COV * ERROR_COV / ERROR_VAR).sqrt() * e2;
    let d = truth.exposure_mean(&z) + nu;
    let direct: f64 = truth.phi.iter().zip(&z).map(|(f, v)| f * v).sum();
    let t = truth.beta0 * d + direct + eps;
    (z, d, t)
}

/// Expected censoring rate of `C ~ U[tau1, tau2]` over the pilot times.
fn expected_rate(times: &[f64], tau1: f64, tau2: f64) -> f64 {
    let width = tau2 - tau1;
    times.iter().map(|&t| ((t - tau1) / width).clamp(0.0, 1.0)).sum::<f64>() / times.len() as f64
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f(lo) and f(hi) have opposite signs
    let up = f(lo) < 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) < 0.0) == up {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() < 1e-12 * (1.0 + hi.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Censoring interval hitting `target_cr` for the replication's coefficients.
///
/// `tau2` never falls below the largest pilot failure time, so every failure
/// time keeps a positive chance of being observed. Low rates fix `tau1` at the
/// pilot minimum and move `tau2` up; higher rates fix `tau2` at the pilot
/// maximum and move `tau1` down.
pub fn calibrate_censoring(cfg: &SimConfig, truth: &Truth, rep: usize) -> Result<(f64, f64)> {
    if let Some(t) = cfg.tau {
        return Ok(t);
    }
    if cfg.target_cr == 0.0 {
        return Ok((f64::INFINITY, f64::INFINITY));
    }
    if !(cfg.target_cr > 0.0 && cfg.target_cr < 1.0) {
        return Err(Error::Calibration(format!("target rate {} outside (0, 1)", cfg.target_cr)));
    }
    let mut ns = NormalStream::new(rep_stream(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, rep as u64));
    let times: Vec<f64> = (0..PILOT_DRAWS).map(|_| draw_unit(truth, &mut ns).2).collect();
    let lo_t = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_t = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let target = cfg.target_cr;
    let tau = if expected_rate(&times, lo_t, hi_t) >= target {
        let f = |tau2: f64| expected_rate(&times, lo_t, tau2) - target;
        let mut far = hi_t + (hi_t - lo_t);
        while f(far) > 0.0 {
            far += 2.0 * (far - lo_t);
        }
        (lo_t, bisect(hi_t, far, f))
    } else {
        // lowering tau1 moves censoring earlier
        let f = |tau1: f64| expected_rate(&times, tau1, hi_t) - target;
        let mut far = lo_t - (hi_t - lo_t);
        while f(far) < 0.0 {
            far -= 2.0 * (hi_t - far);
        }
        (bisect(far, lo_t, f), hi_t)
    };
    let miss = expected_rate(&times, tau.0, tau.1) - target;
    if miss.abs() > 0.005 {
        return Err(Error::Calibration(format!("calibrated rate misses target by {miss}")));
    }
    Ok(tau)
}

/// Simulate replication `rep`: the dataset and the coefficients that generated it.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<(Dataset, Truth)> {
    cfg.validate()?;
    let mut truth = draw_truth(cfg, rep);
    truth.tau = calibrate_censoring(cfg, &truth, rep)?;
    let (tau1, tau2) = truth.tau;
    let mut rng = rep_stream(cfg.seed, 2 * rep as u64 + 1);
    let cens_rng = ChaCha20Rng::seed_from_u64(rng.gen());
    let mut ns = NormalStream::new(rng);
    let mut cens = cens_rng;
    let obs: Vec<Observation> = (0..cfg.n)
        .map(|_| {
            let (z, d, t) = draw_unit(&truth, &mut ns);
            let c = if tau1.is_finite() {
                tau1 + (tau2 - tau1) * cens.gen::<f64>()
            } else {
                f64::INFINITY
            };
            Observation::new(z, d, t.min(c), t <= c)
        })
        .collect();
    Ok((Dataset::new(obs)?, truth))
}

/// Uncensored failure times for replication `rep` (oracle access, same draws as [`generate`]).
pub fn latent_times(cfg: &SimConfig, rep: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let truth = draw_truth(cfg, rep);
    let mut rng = rep_stream(cfg.seed, 2 * rep as u64 + 1);
    let _: u64 = rng.gen();
    let mut ns = NormalStream::new(rng);
    Ok((0..cfg.n).map(|_| draw_unit(&truth, &mut ns).2).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Gel(RhoFamily),
    Aft,
    /// Reports the true β₀ with unit SE; checks the summary arithmetic.
    Truth,
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Gel(f) => format!("iGSAFT-{}", f.name()),
            Estimator::Aft => "AFT".into(),
            Estimator::Truth => "truth".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEstimate {
    pub beta: f64,
    pub se: f64,
    pub covered: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub censoring_rate: f64,
    pub estimates: Vec<RepEstimate>,
    pub m: Option<usize>,
    pub p_f: Option<f64>,
    /// Overidentification p-value of the first GEL estimator.
    pub p_overid: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub bias_pct: f64,
    /// `None` with fewer than two usable replications.
    pub sd: Option<f64>,
    pub mean_se: f64,
    pub coverage: f64,
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub config: SimConfig,
    pub estimators: Vec<Estimator>,
    pub rows: Vec<SummaryRow>,
    pub replications: Vec<RepRecord>,
}

impl McSummary {
    pub fn row(&self, est: Estimator) -> Option<&SummaryRow> {
        let i = self.estimators.iter().position(|e| *e == est)?;
        self.rows.get(i)
    }

    /// Comma-separated `Method,Bias,SD,SE,CP` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method,Bias,SD,SE,CP\n");
        for r in &self.rows {
            let sd = r.sd.map_or("NA".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{},{:.3}%,{},{:.4},{:.3}\n",
                r.method, r.bias_pct, sd, r.mean_se, r.coverage
            ));
        }
        out
    }
}

/// Neumaier-compensated sum, so the mean does not depend on summation quirks.
fn stable_sum(v: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in v {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn summarize(method: String, beta0: f64, ests: &[&RepEstimate]) -> SummaryRow {
    let used: Vec<&&RepEstimate> = ests.iter().filter(|e| e.converged && e.beta.is_finite()).collect();
    let k = used.len();
    let kf = k as f64;
    let mean = stable_sum(used.iter().map(|e| e.beta)) / kf;
    let sd = (k >= 2).then(|| (stable_sum(used.iter().map(|e| (e.beta - mean).powi(2))) / (kf - 1.0)).sqrt());
    SummaryRow {
        method,
        bias_pct: 100.0 * (mean - beta0) / beta0,
        sd,
        mean_se: stable_sum(used.iter().map(|e| e.se)) / kf,
        coverage: used.iter().filter(|e| e.covered).count() as f64 / kf,
        used: k,
        excluded: ests.len() - k,
    }
}

fn run_rep(sim: &SimConfig, fit: &FitConfig, estimators: &[Estimator], rep: usize) -> RepRecord {
    let failed = |msg: String| RepRecord {
        rep,
        censoring_rate: f64::NAN,
        estimates: estimators
            .iter()
            .map(|_| RepEstimate {
                beta: f64::NAN,
                se: f64::NAN,
                covered: false,
                converged: false,
            })
            .collect(),
        m: None,
        p_f: None,
        p_overid: None,
        error: Some(msg),
    };
    let (data, truth) = match generate(sim, rep) {
        Ok(x) => x,
        Err(e) => return failed(e.to_string()),
    };
    let beta0 = truth.beta0;
    let families: Vec<RhoFamily> = estimators
        .iter()
        .filter_map(|e| match e {
            Estimator::Gel(f) => Some(*f),
            _ => None,
        })
        .collect();
    let mut fit_cfg = fit.clone();
    fit_cfg.seed = fit.seed.wrapping_add(rep as u64);
    let report = if families.is_empty() {
        None
    } else {
        fit_cfg.families = families;
        Some(fit_igsaft(&data, &fit_cfg))
    };
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - fit.gel.alpha / 2.0);
    let mut error = None;
    let estimates = estimators
        .iter()
        .map(|e| match e {
            Estimator::Gel(f) => match report.as_ref().unwrap() {
                Ok(r) => {
                    let g = r.fit_for(*f).unwrap();
                    RepEstimate {
                        beta: g.beta_hat,
                        se: g.se,
                        covered: g.ci.0 <= beta0 && beta0 <= g.ci.1,
                        converged: g.converged && g.se.is_finite(),
                    }
                }
                Err(err) => {
                    error = Some(err.to_string());
                    RepEstimate {
                        beta: f64::NAN,
                        se: f64::NAN,
                        covered: false,
                        converged: false,
                    }
                }
            },
            Estimator::Aft => {
                let a = aft_benchmark(&data);
                RepEstimate {
                    beta: a.beta,
                    se: a.se,
                    covered: (a.beta - beta0).abs() <= z * a.se,
                    converged: a.converged,
                }
            }
            Estimator::Truth => RepEstimate {
                beta: beta0,
                se: 1.0,
                covered: true,
                converged: true,
            },
        })
        .collect();
    let ok = report.as_ref().and_then(|r| r.as_ref().ok());
    RepRecord {
        rep,
        censoring_rate: data.censoring_rate(),
        estimates,
        m: ok.map(|r| r.m),
        p_f: ok.and_then(|r| r.relevance_f.as_ref().map(|t| t.p_value)),
        p_overid: ok.and_then(|r| r.over_id[0].as_ref().map(|t| t.p_value)),
        error,
    }
}

/// Replicate `generate → fit` and summarize each estimator.
pub fn run_monte_carlo(sim: &SimConfig, fit: &FitConfig, estimators: &[Estimator]) -> Result<McSummary> {
    sim.validate()?;
    if estimators.is_empty() {
        return Err(Error::domain("no estimators requested"));
    }
    let replications: Vec<RepRecord> = (0..sim.reps)
        .into_par_iter()
        .map(|rep| run_rep(sim, fit, estimators, rep))
        .collect();
    let rows = estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let ests: Vec<&RepEstimate> = replications.iter().map(|r| &r.estimates[k]).collect();
            summarize(e.label(), sim.beta0, &ests)
        })
        .collect();
    Ok(McSummary {
        config: sim.clone(),
        estimators: estimators.to_vec(),
        rows,
        replications,
    })
}
