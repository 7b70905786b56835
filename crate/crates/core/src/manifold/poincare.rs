//! Poincare-ball maps anchored at the origin, for curvature `c < 0`
//! (ball radius `1/sqrt(-c)`).

use ndarray::{Array2, ArrayView1};

use super::special::{atanhc, tanhc};
use super::{dot, norm, norm_sq};
use crate::error::{GeoError, Result};

/// Distance from the boundary (in units of `sqrt|c| * norm`) at which points
/// are treated as lying on it.
pub const BOUNDARY_EPS: f64 = 1e-12;

fn ball_k(c: f64) -> Result<f64> {
    if !(c < 0.0) || !c.is_finite() {
        return Err(GeoError::InvalidSpec(format!(
            "Poincare ball needs negative curvature, got {c}"
        )));
    }
    Ok(-c)
}

fn check_inside(x: &[f64], k: f64) -> Result<()> {
    let n = norm(x);
    if k.sqrt() * n >= 1.0 - BOUNDARY_EPS || !n.is_finite() {
        return Err(GeoError::OutOfDomain {
            norm: n,
            radius: 1.0 / k.sqrt(),
        });
    }
    Ok(())
}

/// `tanh(sqrt|c| |v|) v / (sqrt|c| |v|)`.
pub fn poincare_exp0(v: &[f64], c: f64) -> Result<Vec<f64>> {
    let sk = ball_k(c)?.sqrt();
    let f = tanhc(sk * norm(v));
    Ok(v.iter().map(|x| f * x).collect())
}

/// `artanh(sqrt|c| |y|) y / (sqrt|c| |y|)`; `y` must be strictly inside the
/// ball.
pub fn poincare_log0(y: &[f64], c: f64) -> Result<Vec<f64>> {
    let k = ball_k(c)?;
    check_inside(y, k)?;
    let f = atanhc(k.sqrt() * norm(y));
    Ok(y.iter().map(|x| f * x).collect())
}

/// Mobius addition `x (+)_c y` on the ball of curvature `c`.
pub fn mobius_add(x: &[f64], y: &[f64], c: f64) -> Result<Vec<f64>> {
    let k = ball_k(c)?;
    if x.len() != y.len() {
        return Err(GeoError::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    check_inside(x, k)?;
    check_inside(y, k)?;
    let xy = dot(x, y);
    let x2 = norm_sq(x);
    let y2 = norm_sq(y);
    let a = 1.0 + 2.0 * k * xy + k * y2;
    let b = 1.0 - k * x2;
    let den = 1.0 + 2.0 * k * xy + k * k * x2 * y2;
    Ok(x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect())
}

/// `exp0(M log0(x))`.
pub fn mobius_matvec(m: &Array2<f64>, x: &[f64], c: f64) -> Result<Vec<f64>> {
    if m.ncols() != x.len() {
        return Err(GeoError::Dimension {
            expected: m.ncols(),
            got: x.len(),
        });
    }
    let u = poincare_log0(x, c)?;
    let mu = m.dot(&ArrayView1::from(&u[..]));
    poincare_exp0(mu.as_slice().expect("contiguous"), c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exp0_examples() {
        assert_eq!(poincare_exp0(&[0.0, 0.0], -1.0).unwrap(), vec![0.0, 0.0]);
        let y = poincare_exp0(&[0.5f64.atanh(), 0.0], -1.0).unwrap();
        assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-15);
        assert!(poincare_exp0(&[1.0], 0.0).is_err());
    }

    #[test]
    fn log0_examples() {
        assert_eq!(poincare_log0(&[0.0, 0.0], -1.0).unwrap(), vec![0.0, 0.0]);
        let u = poincare_log0(&[0.5, 0.0], -1.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.5493061443340549, epsilon = 1e-15);
        assert!(matches!(
            poincare_log0(&[1.0, 0.0], -1.0),
            Err(GeoError::OutOfDomain { .. })
        ));
        assert!(poincare_log0(&[1.0 - 1e-13, 0.0], -1.0).is_err());
        assert!(poincare_log0(&[0.6, 0.0], -4.0).is_err());
    }

    #[test]
    fn mobius_add_examples() {
        let x = [0.3, -0.2];
        assert_eq!(mobius_add(&x, &[0.0, 0.0], -1.0).unwrap(), x.to_vec());
        assert_eq!(mobius_add(&[0.0, 0.0], &x, -1.0).unwrap(), x.to_vec());
        let s = mobius_add(&[0.3, 0.0], &[0.4, 0.0], -1.0).unwrap();
        assert_abs_diff_eq!(s[0], 0.625, epsilon = 1e-15);
        assert!(mobius_add(&[1.2, 0.0], &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn mobius_matvec_examples() {
        let x = [0.5, 0.0];
        let id = Array2::<f64>::eye(2);
        let y = mobius_matvec(&id, &x, -1.0).unwrap();
        assert_abs_diff_eq!(y[0], 0.5, epsilon = 1e-12);
        let y = mobius_matvec(&(2.0 * &id), &x, -1.0).unwrap();
        assert_abs_diff_eq!(y[0], 0.8, epsilon = 1e-12);
        let m = Array2::from_shape_vec((2, 2), vec![3.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(mobius_matvec(&m, &[0.0, 0.0], -1.0).unwrap(), vec![0.0, 0.0]);
    }
}
