//! Kernel-weighted product-limit estimate of the censoring survival function.

use crate::data::Dataset;
use crate::error::Result;

use super::kernel::{KernelConfig, KernelSmoother, WeightStatus};

/// Training fold sorted by observed time, with tie groups and the event-time grid.
#[derive(Debug, Clone)]
pub struct FoldLayout {
    /// Sorted position -> row of the training fold.
    pub perm: Vec<usize>,
    pub y: Vec<f64>,
    pub delta: Vec<bool>,
    /// First sorted position of each position's tie group.
    pub group_start: Vec<usize>,
    /// Distinct event times `u_1 < ... < u_K`.
    pub grid: Vec<f64>,
    /// For each grid point `t` (1-based, index 0 unused), first sorted position with `Y >= u_t`.
    pub grid_start: Vec<usize>,
    /// For each grid point, last sorted position with `Y <= u_t`.
    pub grid_last: Vec<usize>,
    /// Grid index of each sorted position if it is an event, else 0.
    pub event_grid: Vec<usize>,
}

impl FoldLayout {
    pub fn new(fold: &Dataset) -> Self {
        let n = fold.n();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by(|&a, &b| fold.get(a).y.total_cmp(&fold.get(b).y).then(a.cmp(&b)));
        let y: Vec<f64> = perm.iter().map(|&i| fold.get(i).y).collect();
        let delta: Vec<bool> = perm.iter().map(|&i| fold.get(i).delta).collect();
        let mut group_start = vec![0; n];
        for s in 1..n {
            group_start[s] = if y[s] == y[s - 1] { group_start[s - 1] } else { s };
        }
        let mut grid = Vec::new();
        let mut event_grid = vec![0; n];
        for s in 0..n {
            if delta[s] {
                if grid.last() != Some(&y[s]) {
                    grid.push(y[s]);
                }
                event_grid[s] = grid.len();
            }
        }
        let mut grid_start = vec![0; grid.len() + 1];
        let mut grid_last = vec![0; grid.len() + 1];
        for (t, &u) in grid.iter().enumerate() {
            grid_start[t + 1] = y.partition_point(|&v| v < u);
            grid_last[t + 1] = y.partition_point(|&v| v <= u) - 1;
        }
        Self {
            perm,
            y,
            delta,
            group_start,
            grid,
            grid_start,
            grid_last,
            event_grid,
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of grid points `<= y`, i.e. the index of the last one (0 if none).
    pub fn grid_index(&self, y: f64) -> usize {
        self.grid.partition_point(|&u| u <= y)
    }

    /// Number of sorted positions with `Y <= y`.
    pub fn count_le(&self, y: f64) -> usize {
        self.y.partition_point(|&v| v <= y)
    }
}

/// `Ĝ(· | z, d)` for one target, evaluated at every sorted training position.
#[derive(Debug, Clone)]
pub struct CensorCurve {
    /// Kernel weights in sorted order.
    pub weights: Vec<f64>,
    /// Unclipped survival just after each sorted position's tie group.
    pub after: Vec<f64>,
    pub trunc_eps: f64,
    pub status: WeightStatus,
}

impl CensorCurve {
    /// Clipped value at the `count`-th sorted position (`count` positions have `Y <= y`).
    pub fn at_count(&self, count: usize) -> f64 {
        if count == 0 {
            1.0
        } else {
            self.after[count - 1].max(self.trunc_eps)
        }
    }

    pub fn is_clipped_at_count(&self, count: usize) -> bool {
        count > 0 && self.after[count - 1] < self.trunc_eps
    }
}

/// Local Kaplan–Meier estimator of the censoring distribution fitted on one fold.
#[derive(Debug, Clone)]
pub struct LocalKm {
    layout: FoldLayout,
    smoother: KernelSmoother,
    trunc_eps: f64,
}

impl LocalKm {
    pub fn fit(fold: &Dataset, cfg: &KernelConfig) -> Result<Self> {
        Ok(Self {
            layout: FoldLayout::new(fold),
            smoother: KernelSmoother::new(fold, cfg)?,
            trunc_eps: cfg.trunc_eps,
        })
    }

    pub fn layout(&self) -> &FoldLayout {
        &self.layout
    }

    pub fn smoother(&self) -> &KernelSmoother {
        &self.smoother
    }

    pub fn trunc_eps(&self) -> f64 {
        self.trunc_eps
    }

    pub fn curve(&self, z: &[f64], d: f64) -> CensorCurve {
        let (w_fold, status) = self.smoother.weights(z, d);
        let weights: Vec<f64> = self.layout.perm.iter().map(|&i| w_fold[i]).collect();
        self.curve_from_weights(weights, status)
    }

    /// Product-limit curve for arbitrary sorted-order weights.
    pub fn curve_from_weights(&self, weights: Vec<f64>, status: WeightStatus) -> CensorCurve {
        let n = self.layout.n();
        let mut suffix = vec![0.0; n + 1];
        for s in (0..n).rev() {
            suffix[s] = suffix[s + 1] + weights[s];
        }
        let mut after = vec![1.0; n];
        let mut surv = 1.0;
        let mut s = 0;
        while s < n {
            let start = s;
            let risk = suffix[start];
            // tied censorings share one factor, as in the grouped Kaplan–Meier
            let mut censored = 0.0;
            while s < n && self.layout.group_start[s] == start {
                if !self.layout.delta[s] {
                    censored += weights[s];
                }
                s += 1;
            }
            if censored > 0.0 && risk > 0.0 {
                surv *= 1.0 - censored / risk;
            }
            after[start..s].iter_mut().for_each(|v| *v = surv);
        }
        CensorCurve {
            weights,
            after,
            trunc_eps: self.trunc_eps,
            status,
        }
    }

    /// Clipped `Ĝ(y | z, d)`.
    pub fn survival(&self, y: f64, z: &[f64], d: f64) -> f64 {
        self.curve(z, d).at_count(self.layout.count_le(y))
    }
}

/// Fit the local Kaplan–Meier censoring model on `fold`.
pub fn fit_local_km(fold: &Dataset, cfg: &KernelConfig) -> Result<LocalKm> {
    LocalKm::fit(fold, cfg)
}
