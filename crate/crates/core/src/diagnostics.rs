//! Interaction-relevance F test and the GEL overidentification test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gel::GelFit;
use crate::interactions::MomentSpec;
use crate::linalg::{least_squares, ridge_cholesky};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    #[serde(rename = "relevance_F")]
    RelevanceF,
    Overidentification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Covariance {
    #[default]
    HC0,
    HC3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    /// `[m, n - k]` for the F test, `[m - 1]` for the overidentification test.
    pub df: Vec<f64>,
    pub p_value: f64,
}

/// Upper tail of `χ²(df)` at `x`.
pub fn chi2_upper(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("positive degrees of freedom");
    dist.sf(x).clamp(0.0, 1.0)
}

/// Robust Wald test that the centered interactions in `spec` add nothing to
/// the regression of `D` on `[1, Z]`.
///
/// The statistic is `W / m` with `W` the Wald statistic; the p-value is the
/// `χ²(m)` upper tail of `W`.
pub fn relevance_f_test(dataset: &Dataset, spec: &MomentSpec, zeta: &[f64], cov: Covariance) -> Result<TestResult> {
    let n = dataset.n();
    let p = dataset.p();
    let m = spec.m();
    let k = 1 + p + m;
    if m == 0 {
        return Err(Error::domain("relevance test needs at least one interaction"));
    }
    if n <= k {
        return Err(Error::IllPosed(format!("relevance test needs n > {k}, got {n}")));
    }
    let x = DMatrix::from_fn(n, k, |i, j| {
        let z = &dataset.get(i).z;
        match j {
            0 => 1.0,
            j if j <= p => z[j - 1],
            j => spec.indices()[j - 1 - p].centered_product(z, zeta),
        }
    });
    let d = DVector::from_vec(dataset.exposure());
    let fit = least_squares(&x, &[&d])?;
    let coef = &fit[0].coef;
    let resid = &d - &x * coef;
    let bread = ridge_cholesky(&x.tr_mul(&x), 0.0)?.inverse();
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let xi = x.row(i).transpose();
        let mut e2 = resid[i] * resid[i];
        if cov == Covariance::HC3 {
            let h = xi.dot(&(&bread * &xi));
            e2 /= (1.0 - h).powi(2);
        }
        meat += &xi * xi.transpose() * e2;
    }
    let vcov = &bread * meat * &bread;
    let sub = vcov.view((1 + p, 1 + p), (m, m)).into_owned();
    let b = coef.rows(1 + p, m).into_owned();
    let chol = ridge_cholesky(&sub, 0.0).map_err(|_| Error::IllPosed("singular robust covariance".into()))?;
    let wald = b.dot(&chol.solve(&b));
    Ok(TestResult {
        kind: TestKind::RelevanceF,
        statistic: wald / m as f64,
        df: vec![m as f64, (n - k) as f64],
        p_value: chi2_upper(wald, m as f64),
    })
}

/// `2nQ̂(β̂)` against `χ²(m − 1)`.
pub fn overid_test(fit: &GelFit) -> Result<TestResult> {
    if fit.m < 2 {
        return Err(Error::TestUndefined(
            "not applicable (just identified): overidentification needs m >= 2".into(),
        ));
    }
    let stat = 2.0 * fit.n as f64 * fit.q_hat.max(0.0);
    let df = (fit.m - 1) as f64;
    Ok(TestResult {
        kind: TestKind::Overidentification,
        statistic: stat,
        df: vec![df],
        p_value: chi2_upper(stat, df),
    })
}
