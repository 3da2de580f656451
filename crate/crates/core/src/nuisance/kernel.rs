use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[default]
    Gaussian,
    Uniform,
    Epanechnikov,
}

impl KernelFamily {
    /// Kernel value for a standardized offset `u` (one coordinate).
    fn eval(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp(),
            KernelFamily::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelFamily::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            "epanechnikov" => Ok(Self::Epanechnikov),
            o => Err(Error::domain(format!("unknown kernel `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "rule", content = "h")]
pub enum Bandwidth {
    /// `1.06 * n^(-1/(4+dim))` on standardized coordinates.
    #[default]
    Silverman,
    /// Fixed bandwidth on standardized coordinates.
    Fixed(f64),
}

/// Which covariates the local Kaplan–Meier smooths over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmConditioning {
    /// The full `(Z, D)` vector.
    Full,
    /// The exposure only.
    DOnly,
    /// No conditioning: uniform weights, i.e. the ordinary Kaplan–Meier.
    Marginal,
}

impl std::str::FromStr for KmConditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "d_only" | "d-only" => Ok(Self::DOnly),
            "marginal" => Ok(Self::Marginal),
            o => Err(Error::domain(format!("unknown km conditioning `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub kernel: KernelFamily,
    pub bandwidth: Bandwidth,
    /// Lower clip for the censoring survival estimate.
    pub trunc_eps: f64,
    /// `None` picks `Full` for `p <= 5` and `DOnly` otherwise.
    pub conditioning: Option<KmConditioning>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Gaussian,
            bandwidth: Bandwidth::Silverman,
            trunc_eps: 0.01,
            conditioning: None,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Bandwidth::Fixed(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::domain(format!("fixed bandwidth must be positive, got {h}")));
            }
        }
        if !(self.trunc_eps > 0.0 && self.trunc_eps < 1.0) {
            return Err(Error::domain(format!("trunc_eps must lie in (0, 1), got {}", self.trunc_eps)));
        }
        Ok(())
    }

    pub fn conditioning_for(&self, p: usize) -> KmConditioning {
        self.conditioning.unwrap_or(if p > 5 {
            KmConditioning::DOnly
        } else {
            KmConditioning::Full
        })
    }
}

/// How a weight vector was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStatus {
    Kernel,
    /// The compact kernel window was empty and had to be widened.
    Widened,
    /// Still empty after widening; uniform weights were used.
    UniformFallback,
}

/// Kernel smoother over a fold's standardized `(z, d)` coordinates.
#[derive(Debug, Clone)]
pub struct KernelSmoother {
    kernel: KernelFamily,
    conditioning: KmConditioning,
    dim: usize,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Row-major `n x dim` standardized coordinates, in fold order.
    coords: Vec<f64>,
    n: usize,
    h: f64,
}

impl KernelSmoother {
    pub fn new(fold: &Dataset, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        let conditioning = cfg.conditioning_for(fold.p());
        let raw: Vec<Vec<f64>> = fold
            .iter()
            .map(|o| match conditioning {
                KmConditioning::Full => {
                    let mut v = o.z.clone();
                    v.push(o.d);
                    v
                }
                KmConditioning::DOnly => vec![o.d],
                KmConditioning::Marginal => vec![],
            })
            .collect();
        let n = fold.n();
        let dim = raw.first().map_or(0, |r| r.len());
        let mut center = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for c in 0..dim {
            let col: Vec<f64> = raw.iter().map(|r| r[c]).collect();
            let (mean, sd) = crate::linalg::mean_and_sd(&col);
            center[c] = mean;
            if sd > 0.0 {
                scale[c] = sd;
            }
        }
        let coords = raw
            .iter()
            .flat_map(|r| r.iter().enumerate().map(|(c, v)| (v - center[c]) / scale[c]).collect::<Vec<_>>())
            .collect();
        let h = match cfg.bandwidth {
            Bandwidth::Silverman => 1.06 * (n as f64).powf(-1.0 / (4.0 + dim as f64)),
            Bandwidth::Fixed(h) => h,
        };
        Ok(Self {
            kernel: cfg.kernel,
            conditioning,
            dim,
            center,
            scale,
            coords,
            n,
            h,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn conditioning(&self) -> KmConditioning {
        self.conditioning
    }

    fn target_coords(&self, z: &[f64], d: f64) -> Vec<f64> {
        let raw: Vec<f64> = match self.conditioning {
            KmConditioning::Full => z.iter().copied().chain(std::iter::once(d)).collect(),
            KmConditioning::DOnly => vec![d],
            KmConditioning::Marginal => vec![],
        };
        raw.iter()
            .enumerate()
            .map(|(c, v)| (v - self.center[c]) / self.scale[c])
            .collect()
    }

    /// Normalized weights `B_nj(z, d)` over the fold, in fold order.
    pub fn weights(&self, z: &[f64], d: f64) -> (Vec<f64>, WeightStatus) {
        let uniform = || vec![1.0 / self.n as f64; self.n];
        if self.dim == 0 {
            return (uniform(), WeightStatus::Kernel);
        }
        let target = self.target_coords(z, d);
        if self.kernel == KernelFamily::Gaussian {
            // log-domain normalization: never underflows to all-zero
            let inv_h2 = 1.0 / (self.h * self.h);
            let mut sq: Vec<f64> = self
                .coords
                .chunks_exact(self.dim)
                .map(|row| row.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * inv_h2)
                .collect();
            let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
            let mut total = 0.0;
            for v in sq.iter_mut() {
                *v = (-0.5 * (*v - min)).exp();
                total += *v;
            }
            sq.iter_mut().for_each(|v| *v /= total);
            return (sq, WeightStatus::Kernel);
        }
        let mut h = self.h;
        for attempt in 0..=5 {
            let w: Vec<f64> = self
                .coords
                .chunks_exact(self.dim)
                .map(|row| row.iter().zip(&target).map(|(a, b)| self.kernel.eval((a - b) / h)).product())
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                let status = if attempt == 0 {
                    WeightStatus::Kernel
                } else {
                    WeightStatus::Widened
                };
                return (w.into_iter().map(|v| v / total).collect(), status);
            }
            h *= 1.5;
        }
        (uniform(), WeightStatus::UniformFallback)
    }
}

/// Kernel weights of `target = (z, d)` against every observation of `fold`.
pub fn kernel_weights(z: &[f64], d: f64, fold: &Dataset, cfg: &KernelConfig) -> Result<Vec<f64>> {
    Ok(KernelSmoother::new(fold, cfg)?.weights(z, d).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;

    fn fold(points: &[(f64, f64)]) -> Dataset {
        Dataset::new(
            points
                .iter()
                .map(|&(z, d)| Observation::new(vec![z], d, 0.0, true))
                .collect(),
        )
        .unwrap()
    }

    fn cfg(kernel: KernelFamily, bandwidth: Bandwidth) -> KernelConfig {
        KernelConfig {
            kernel,
            bandwidth,
            trunc_eps: 0.01,
            conditioning: Some(KmConditioning::Full),
        }
    }

    #[test]
    fn wide_uniform_kernel_is_flat() {
        let f = fold(&[(0.0, 0.0), (1.0, 2.0), (-1.0, 0.5), (0.3, -1.0)]);
        let w = kernel_weights(&[0.1], 0.2, &f, &cfg(KernelFamily::Uniform, Bandwidth::Fixed(100.0))).unwrap();
        assert!(w.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn narrow_gaussian_concentrates_on_coincident_point() {
        let f = fold(&[(0.0, 0.0), (1.0, 2.0), (-1.0, 0.5)]);
        let w = kernel_weights(&[1.0], 2.0, &f, &cfg(KernelFamily::Gaussian, Bandwidth::Fixed(1e-3))).unwrap();
        assert!((w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_matches_hand_computation() {
        let pts = [(0.0, 0.0), (1.0, 2.0), (-1.0, 0.5)];
        let f = fold(&pts);
        let h = 0.8;
        let w = kernel_weights(&[0.2], 0.4, &f, &cfg(KernelFamily::Gaussian, Bandwidth::Fixed(h))).unwrap();
        // standardize by fold population SDs, then exp(-|.|^2 / 2)
        let (mz, sz) = crate::linalg::mean_and_sd(&[0.0, 1.0, -1.0]);
        let (md, sd) = crate::linalg::mean_and_sd(&[0.0, 2.0, 0.5]);
        let raw: Vec<f64> = pts
            .iter()
            .map(|&(z, d)| {
                let a = ((0.2 - mz) / sz - (z - mz) / sz) / h;
                let b = ((0.4 - md) / sd - (d - md) / sd) / h;
                (-(a * a + b * b) / 2.0).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (got, r) in w.iter().zip(&raw) {
            assert!((got - r / total).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_window_widens_then_falls_back() {
        let f = fold(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        let s = KernelSmoother::new(&f, &cfg(KernelFamily::Uniform, Bandwidth::Fixed(0.01))).unwrap();
        let (w, status) = s.weights(&[50.0], 50.0);
        assert_eq!(status, WeightStatus::UniformFallback);
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = KernelSmoother::new(&f, &cfg(KernelFamily::Epanechnikov, Bandwidth::Fixed(0.1))).unwrap();
        let (w, status) = s.weights(&[0.5], 0.5);
        assert_eq!(status, WeightStatus::Widened);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = KernelConfig::default();
        assert!(c.validate().is_ok());
        c.bandwidth = Bandwidth::Fixed(0.0);
        assert!(c.validate().is_err());
        let c = KernelConfig {
            trunc_eps: 1.0,
            ..KernelConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(KernelConfig::default().conditioning_for(5), KmConditioning::Full);
        assert_eq!(KernelConfig::default().conditioning_for(10), KmConditioning::DOnly);
    }
}
