//! Small dense linear-algebra helpers shared by the regression steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Least-squares coefficients of `y` on the columns of `x`.
///
/// Uses a QR factorization; if `R` is numerically singular the normal
/// equations are solved with a relative ridge of `1e-8` instead and
/// `jittered` is set.
pub struct LeastSquares {
    pub coef: DVector<f64>,
    pub jittered: bool,
}

pub fn least_squares(x: &DMatrix<f64>, ys: &[&DVector<f64>]) -> Result<Vec<LeastSquares>> {
    let (n, w) = x.shape();
    if w >= n {
        return Err(Error::IllPosed(format!("design has {w} columns but only {n} rows")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = r.diagonal().iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let rank_ok = r.diagonal().iter().all(|v| v.abs() > 1e-10 * max_diag.max(f64::MIN_POSITIVE));
    if rank_ok {
        let mut out = Vec::with_capacity(ys.len());
        for y in ys {
            let mut qty = (*y).clone();
            qr.q_tr_mul(&mut qty);
            let rhs = qty.rows(0, w).into_owned();
            let coef = r
                .solve_upper_triangular(&rhs)
                .ok_or_else(|| Error::IllPosed("triangular solve failed".into()))?;
            out.push(LeastSquares { coef, jittered: false });
        }
        return Ok(out);
    }
    let xtx = x.tr_mul(x);
    let chol = ridge_cholesky(&xtx, 1e-8)?;
    Ok(ys
        .iter()
        .map(|y| LeastSquares {
            coef: chol.solve(&x.tr_mul(*y)),
            jittered: true,
        })
        .collect())
}

/// Cholesky of `a + jitter * (trace(a)/dim) * I`, escalating the jitter by
/// factors of 100 until the factorization succeeds.
pub fn ridge_cholesky(a: &DMatrix<f64>, jitter: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let dim = a.nrows();
    let scale = (a.trace() / dim as f64).abs().max(f64::MIN_POSITIVE);
    let mut eps = jitter;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..dim {
            m[(i, i)] += eps * scale;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        eps = if eps == 0.0 { 1e-12 } else { eps * 100.0 };
    }
    Err(Error::IllPosed("matrix not positive definite after ridge jitter".into()))
}

/// Cholesky of a symmetric PSD matrix with a minimal relative jitter only if
/// the plain factorization fails.
pub fn psd_cholesky(a: &DMatrix<f64>, jitter: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    ridge_cholesky(a, jitter)
}

pub fn mean_and_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_recovers_coefficients() {
        let x = DMatrix::from_fn(30, 3, |i, j| if j == 0 { 1.0 } else { ((i * (j + 3)) as f64 * 0.71).sin() });
        let c = DVector::from_vec(vec![0.5, -2.0, 3.25]);
        let y = &x * &c;
        let fit = least_squares(&x, &[&y]).unwrap();
        assert!(!fit[0].jittered);
        assert!((&fit[0].coef - &c).amax() < 1e-12);
    }

    #[test]
    fn collinear_design_falls_back_to_ridge() {
        let x = DMatrix::from_fn(20, 3, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(20, |i, _| 2.0 * i as f64 + 1.0);
        let fit = least_squares(&x, &[&y]).unwrap();
        assert!(fit[0].jittered);
        assert!((&x * &fit[0].coef - &y).amax() < 1e-4);
    }

    #[test]
    fn too_wide_is_ill_posed() {
        let x = DMatrix::<f64>::zeros(3, 3);
        let y = DVector::zeros(3);
        assert!(matches!(least_squares(&x, &[&y]), Err(Error::IllPosed(_))));
    }
}
