//! End-to-end estimation: fold split, nuisance fits, moment construction,
//! screening, GEL estimation and diagnostics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diagnostics::{overid_test, relevance_f_test, Covariance, TestResult};
use crate::error::{Error, Result, StageExt};
use crate::gel::{estimate, GelFit, GelOptions, RhoFamily};
use crate::interactions::MomentSpec;
use crate::moments::{build_moment_matrix, AffineMoment, MomentMatrix};
use crate::nuisance::{estimate_means, KernelConfig, KmConditioning, NuisanceFit};
use crate::screening::{screen_interactions, ScreenResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_RECOMMENDED_N: usize = 200;

/// Where the exposure-side screen runs relative to moment construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScreenStage {
    /// Screen first and build only the selected moments.
    #[default]
    Pre,
    /// Build every candidate moment, then keep the selected columns.
    Post,
}

impl std::str::FromStr for ScreenStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::Pre),
            "post" => Ok(Self::Post),
            o => Err(Error::domain(format!("unknown screen stage `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Highest interaction order.
    pub q: usize,
    /// Families to estimate; the first is the primary one.
    pub families: Vec<RhoFamily>,
    pub kernel: KernelConfig,
    pub screening: bool,
    pub max_keep: usize,
    pub screen_stage: ScreenStage,
    pub gel: GelOptions,
    pub seed: u64,
    /// Evaluate each row with nuisances trained on the other fold. Turning
    /// this off trains and evaluates on the full sample (debugging only).
    pub cross_fit: bool,
    /// `false` uses the uncensored moment `g` in place of `ψ`.
    pub censoring_adjustment: bool,
    pub covariance: Covariance,
    /// Explicit candidate interactions instead of every order `2..=q` subset.
    pub candidates: Option<Vec<Vec<usize>>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            q: 2,
            families: vec![RhoFamily::El],
            kernel: KernelConfig::default(),
            screening: true,
            max_keep: 100,
            screen_stage: ScreenStage::Pre,
            gel: GelOptions::default(),
            seed: 0,
            cross_fit: true,
            censoring_adjustment: true,
            covariance: Covariance::HC0,
            candidates: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.q < 2 || self.q > p {
            return Err(Error::domain(format!("interaction order q = {} must lie in 2..={p}", self.q)));
        }
        if self.families.is_empty() {
            return Err(Error::domain("at least one GEL family is required"));
        }
        if self.max_keep == 0 {
            return Err(Error::domain("max_keep must be at least 1"));
        }
        self.kernel.validate()?;
        self.gel.validate()
    }

    fn candidate_spec(&self, p: usize) -> Result<MomentSpec> {
        match &self.candidates {
            Some(lists) => MomentSpec::from_index_lists(p, lists.clone()),
            None => MomentSpec::full(p, self.q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceSummary {
    pub bandwidths: Vec<f64>,
    pub km_conditioning: KmConditioning,
    pub clip_count: usize,
    pub carry_forward_count: usize,
    pub empty_risk_set_count: usize,
    pub jittered_partials: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub candidates_m: usize,
    pub spec: MomentSpec,
    pub fold_sizes: Vec<usize>,
    pub screen: Option<ScreenResult>,
    /// One fit per requested family, primary first.
    pub fits: Vec<GelFit>,
    #[serde(rename = "relevance_F")]
    pub relevance_f: Option<TestResult>,
    /// Overidentification test per fit; `None` when just identified.
    pub over_id: Vec<Option<TestResult>>,
    pub nuisance: NuisanceSummary,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn gel_fit(&self) -> &GelFit {
        &self.fits[0]
    }

    pub fn fit_for(&self, family: RhoFamily) -> Option<&GelFit> {
        self.fits.iter().find(|f| f.family == family)
    }
}

/// Seeded random halving: `folds[i]` is 0 or 1, with fold 0 taking the extra row.
pub fn assign_folds(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut folds = vec![1; n];
    for &i in &idx[..n.div_ceil(2)] {
        folds[i] = 0;
    }
    folds
}

/// Moment matrix and nuisance fits for one configuration, before GEL.
pub struct PreparedMoments {
    pub moments: MomentMatrix,
    pub screen: Option<ScreenResult>,
    pub candidates_m: usize,
    pub zeta_full: Vec<f64>,
    pub folds: Vec<usize>,
    pub nuisances: Vec<NuisanceFit>,
}

fn fit_nuisances(dataset: &Dataset, folds: &[usize], spec: &MomentSpec, cfg: &FitConfig) -> Result<Vec<NuisanceFit>> {
    if !cfg.cross_fit {
        let all: Vec<usize> = (0..dataset.n()).collect();
        return Ok(vec![NuisanceFit::fit(dataset, all, spec, &cfg.kernel)?]);
    }
    (0..2)
        .map(|f| {
            let train: Vec<usize> = (0..dataset.n()).filter(|&i| folds[i] != f).collect();
            NuisanceFit::fit(&dataset.subset(&train)?, train, spec, &cfg.kernel)
        })
        .collect()
}

fn moment_matrix(dataset: &Dataset, folds: &[usize], nuisances: &[NuisanceFit], cfg: &FitConfig) -> Result<MomentMatrix> {
    if cfg.cross_fit {
        return build_moment_matrix(dataset, folds, nuisances, cfg.censoring_adjustment);
    }
    let nf = &nuisances[0];
    let mut clipped = 0;
    let rows: Vec<AffineMoment> = dataset
        .iter()
        .map(|o| {
            if cfg.censoring_adjustment {
                let (psi, w) = nf.psi_fast(o);
                clipped += w.clipped as usize;
                psi
            } else {
                nf.g(o)
            }
        })
        .collect();
    let mut mm = MomentMatrix::from_rows(&rows, nf.spec().clone(), vec![0; dataset.n()])?;
    mm.clip_count = clipped;
    Ok(mm)
}

/// Steps up to the stacked moment matrix: folds, screening, nuisances, `ψ`.
pub fn prepare_moments(dataset: &Dataset, cfg: &FitConfig) -> Result<PreparedMoments> {
    cfg.validate(dataset.p()).stage("config")?;
    let candidates = cfg.candidate_spec(dataset.p()).stage("config")?;
    let folds = assign_folds(dataset.n(), cfg.seed);
    let zeta_full = estimate_means(dataset);
    let screen_now = cfg.screening && cfg.screen_stage == ScreenStage::Pre;
    let screen = if screen_now {
        Some(screen_interactions(dataset, &candidates, cfg.max_keep, &zeta_full).stage("screening")?)
    } else {
        None
    };
    let spec = screen.as_ref().map_or_else(|| candidates.clone(), |s| s.selected.clone());
    let nuisances = fit_nuisances(dataset, &folds, &spec, cfg).stage("nuisance")?;
    let mut moments = moment_matrix(dataset, &folds, &nuisances, cfg).stage("moments")?;
    let mut screen = screen;
    if cfg.screening && cfg.screen_stage == ScreenStage::Post {
        let s = screen_interactions(dataset, &candidates, cfg.max_keep, &zeta_full).stage("screening")?;
        moments = moments.select(&s.selected_positions).stage("screening")?;
        screen = Some(s);
    }
    Ok(PreparedMoments {
        moments,
        screen,
        candidates_m: candidates.m(),
        zeta_full,
        folds,
        nuisances,
    })
}

/// Run the full estimation procedure.
pub fn fit_igsaft(dataset: &Dataset, cfg: &FitConfig) -> Result<FitReport> {
    let prep = prepare_moments(dataset, cfg)?;
    fit_prepared(dataset, cfg, prep)
}

/// GEL fits and diagnostics on moments from [`prepare_moments`].
pub fn fit_prepared(dataset: &Dataset, cfg: &FitConfig, prep: PreparedMoments) -> Result<FitReport> {
    let mut warnings = Vec::new();
    if dataset.n() < MIN_RECOMMENDED_N {
        warnings.push(format!(
            "n = {} is below the recommended minimum of {MIN_RECOMMENDED_N}",
            dataset.n()
        ));
    }
    let mm = &prep.moments;
    let mut fits = Vec::with_capacity(cfg.families.len());
    for &fam in &cfg.families {
        fits.push(estimate(mm, fam, &cfg.gel).stage("gel")?);
    }
    let relevance_f = match relevance_f_test(dataset, mm.spec(), &prep.zeta_full, cfg.covariance) {
        Ok(t) => Some(t),
        Err(e) => {
            warnings.push(format!("relevance test unavailable: {e}"));
            None
        }
    };
    let over_id = fits.iter().map(|f| overid_test(f).ok()).collect();
    let jittered_partials = prep.nuisances.iter().any(|nf| nf.partials().iter().any(|p| p.jittered));
    if jittered_partials {
        warnings.push("partialling design was rank deficient; a ridge jitter was added".into());
    }
    if let Some(s) = &prep.screen {
        if s.fallback {
            warnings.push("adaptive lasso selected nothing; kept the largest pilot coefficients".into());
        }
    }
    for f in &fits {
        warnings.extend(f.warnings.iter().map(|w| format!("{}: {w}", f.family)));
    }
    let fold_sizes = if cfg.cross_fit {
        vec![
            prep.folds.iter().filter(|&&f| f == 0).count(),
            prep.folds.iter().filter(|&&f| f == 1).count(),
        ]
    } else {
        vec![dataset.n()]
    };
    Ok(FitReport {
        schema_version: SCHEMA_VERSION,
        n: dataset.n(),
        p: dataset.p(),
        q: mm.spec().q(),
        m: mm.m(),
        candidates_m: prep.candidates_m,
        spec: mm.spec().clone(),
        fold_sizes,
        screen: prep.screen,
        fits,
        relevance_f,
        over_id,
        nuisance: NuisanceSummary {
            bandwidths: prep.nuisances.iter().map(|nf| nf.bandwidth()).collect(),
            km_conditioning: cfg.kernel.conditioning_for(dataset.p()),
            clip_count: mm.clip_count,
            carry_forward_count: mm.carry_count,
            empty_risk_set_count: mm.empty_risk_count,
            jittered_partials,
        },
        warnings,
    })
}

/// Time ratio `exp(β̂·Δd)` for an exposure change `Δd`, with its delta-method SE.
pub fn predict_effect(fit: &GelFit, delta_d: f64) -> (f64, f64) {
    let ratio = (fit.beta_hat * delta_d).exp();
    (ratio, ratio * delta_d.abs() * fit.se)
}
