//! Dense numerical primitives: PSD square roots, projection out of a column
//! space, and the distribution functions used for calibration and data
//! generation.

use libm::erfc;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative tolerance for symmetry and negative-eigenvalue clamping.
pub const PSD_TOL: f64 = 1e-10;

/// Relative threshold on singular values below which Z is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

pub(crate) fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Symmetric square root of a positive semidefinite matrix via its
/// eigendecomposition. Eigenvalues in `[-tol, 0)` are clamped to zero.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "psd_sqrt needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    ensure_finite(s, "covariance matrix")?;
    let scale = max_abs(s);
    if scale == 0.0 {
        return Ok(Matrix::zeros(s.nrows(), s.ncols()));
    }
    let tol = PSD_TOL * scale;
    let asym = (s - s.transpose()).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if asym > tol {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    let r = &scaled * v.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Orthonormal basis of col(Z) from a thin QR, after checking full column rank.
pub fn column_basis(z: &Matrix) -> Result<Matrix> {
    let (n, q) = z.shape();
    if q == 0 || n <= q {
        return Err(Error::TooFewRows { needed: q + 1, got: n });
    }
    ensure_finite(z, "Z")?;
    let sv = z.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if smax == 0.0 || smin <= RANK_TOL * smax {
        return Err(Error::RankDeficientZ);
    }
    Ok(z.clone().qr().q())
}

/// `W = (I - Z (Z'Z)^{-1} Z') X`, computed as `X - Q (Q'X)` from a thin QR of Z.
pub fn project_out(z: &Matrix, x: &Matrix) -> Result<Matrix> {
    if z.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Z has {} rows but X has {}",
            z.nrows(),
            x.nrows()
        )));
    }
    ensure_finite(x, "X")?;
    let q = column_basis(z)?;
    Ok(project_with_basis(&q, x))
}

pub(crate) fn project_with_basis(q: &Matrix, x: &Matrix) -> Matrix {
    let coef = q.tr_mul(x);
    x - q * coef
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal upper tail `1 - Φ(x)`, accurate far into the tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    check_prob(p)?;
    Ok(-SQRT_2 * erfc_inv(2.0 * p))
}

pub(crate) fn check_prob(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::TauOutOfRange(tau))
    }
}

/// Centered, unit-scale innovation laws used for covariates and errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Normal,
    Laplace,
    Logistic,
    #[serde(rename = "t2")]
    StudentT2,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 4] = [
        DistributionKind::Normal,
        DistributionKind::Laplace,
        DistributionKind::Logistic,
        DistributionKind::StudentT2,
    ];

    /// `F^{-1}(tau)` for the unit-scale form.
    pub fn quantile(self, tau: f64) -> Result<f64> {
        check_prob(tau)?;
        Ok(match self {
            DistributionKind::Normal => -SQRT_2 * erfc_inv(2.0 * tau),
            DistributionKind::Laplace => {
                if tau < 0.5 {
                    (2.0 * tau).ln()
                } else {
                    -(2.0 * (1.0 - tau)).ln()
                }
            }
            DistributionKind::Logistic => (tau / (1.0 - tau)).ln(),
            DistributionKind::StudentT2 => (2.0 * tau - 1.0) / (2.0 * tau * (1.0 - tau)).sqrt(),
        })
    }

    pub fn cdf(self, x: f64) -> f64 {
        match self {
            DistributionKind::Normal => std_normal_cdf(x),
            DistributionKind::Laplace => {
                if x < 0.0 {
                    0.5 * x.exp()
                } else {
                    1.0 - 0.5 * (-x).exp()
                }
            }
            DistributionKind::Logistic => 1.0 / (1.0 + (-x).exp()),
            DistributionKind::StudentT2 => 0.5 + x / (2.0 * (2.0 + x * x).sqrt()),
        }
    }

    /// Variance of the unit-scale form; `None` when it is infinite.
    pub fn variance(self) -> Option<f64> {
        match self {
            DistributionKind::Normal => Some(1.0),
            DistributionKind::Laplace => Some(2.0),
            DistributionKind::Logistic => Some(PI * PI / 3.0),
            DistributionKind::StudentT2 => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            DistributionKind::Normal => rng.sample(StandardNormal),
            _ => {
                let u: f64 = rng.sample(Open01);
                // u is strictly inside (0, 1), so the quantile is defined.
                self.quantile(u).expect("open unit interval")
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Normal => "normal",
            DistributionKind::Laplace => "laplace",
            DistributionKind::Logistic => "logistic",
            DistributionKind::StudentT2 => "t2",
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(DistributionKind::Normal),
            "laplace" => Ok(DistributionKind::Laplace),
            "logistic" => Ok(DistributionKind::Logistic),
            "t2" | "student_t2" | "studentt2" => Ok(DistributionKind::StudentT2),
            other => Err(Error::InvalidConfig(format!("unknown distribution `{other}`"))),
        }
    }
}

/// `F^{-1}_d(tau)` for the unit-scale form of `d`.
pub fn base_quantile(d: DistributionKind, tau: f64) -> Result<f64> {
    d.quantile(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frob_rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i3 = Matrix::identity(3, 3);
        assert!(frob_rel(&psd_sqrt(&i3).unwrap(), &i3) < 1e-14);

        let d = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0]));
        let r = psd_sqrt(&d).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((r[(1, 1)] - 3.0).abs() < 1e-12);
        assert!(r[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn sqrt_reproduces_ar_covariance() {
        let s = Matrix::from_fn(3, 3, |i, j| 0.5_f64.powi((i as i32 - j as i32).abs()));
        let r = psd_sqrt(&s).unwrap();
        assert!(frob_rel(&(&r * &r), &s) < 1e-8);
        assert!(frob_rel(&r, &r.transpose()) < 1e-15);
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(psd_sqrt(&a), Err(Error::NotSymmetric(_))));
        let b = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(psd_sqrt(&b), Err(Error::NotPsd(_))));
    }

    #[test]
    fn sqrt_clamps_tiny_negative_eigenvalues() {
        // rank-one matrix: one eigenvalue is zero up to rounding
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let s = &v * v.transpose();
        let r = psd_sqrt(&s).unwrap();
        assert!(frob_rel(&(&r * &r), &s) < 1e-8);
    }

    #[test]
    fn projection_centers_against_intercept() {
        let z = Matrix::from_element(4, 1, 1.0);
        let x = Matrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let w = project_out(&z, &x).unwrap();
        for (got, want) in w.iter().zip([-1.5, -0.5, 0.5, 1.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_fixed_point_and_orthogonality() {
        let z = Matrix::from_element(4, 1, 1.0);
        let x = Matrix::from_column_slice(4, 1, &[1.0, -1.0, 2.0, -2.0]);
        let w = project_out(&z, &x).unwrap();
        assert!((&w - &x).amax() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Matrix::from_fn(6, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let x = Matrix::from_fn(6, 3, |_, _| rng.sample(StandardNormal));
        let w = project_out(&z, &x).unwrap();
        assert!(z.tr_mul(&w).amax() <= 1e-10);
        let ww = project_out(&z, &w).unwrap();
        assert!((&ww - &w).amax() <= 1e-10);
    }

    #[test]
    fn projection_rejects_collinear_z() {
        let z = Matrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { 1.0 + 0.0 * i as f64 });
        let x = Matrix::from_element(5, 1, 1.0);
        assert_eq!(project_out(&z, &x), Err(Error::RankDeficientZ));
    }

    #[test]
    fn quantiles_closed_forms() {
        assert_eq!(base_quantile(DistributionKind::StudentT2, 0.5).unwrap(), 0.0);
        assert!((base_quantile(DistributionKind::Logistic, 0.75).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((base_quantile(DistributionKind::Normal, 0.975).unwrap() - 1.959963984540054).abs() < 1e-12);
        assert!((base_quantile(DistributionKind::Laplace, 0.25).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        assert_eq!(base_quantile(DistributionKind::Normal, 0.0), Err(Error::TauOutOfRange(0.0)));
        assert_eq!(base_quantile(DistributionKind::Laplace, 1.0), Err(Error::TauOutOfRange(1.0)));
        for d in DistributionKind::ALL {
            for tau in [0.01, 0.25, 0.5, 0.75, 0.99] {
                let q = d.quantile(tau).unwrap();
                assert!((d.cdf(q) - tau).abs() < 1e-12, "{d} {tau}");
            }
        }
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        // reference values from a 50-digit evaluation of erfc
        assert!((std_normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((std_normal_cdf(-3.0) - 0.0013498980316300946).abs() < 1e-12);
        assert!((std_normal_sf(1.6448536269514722) - 0.05).abs() < 1e-12);
        assert!((std_normal_sf(8.0) / 6.22096057427178e-16 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sampler_agrees_with_quantile() {
        let m = 1_000_000usize;
        for d in DistributionKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut xs: Vec<f64> = (0..m).map(|_| d.sample(&mut rng)).collect();
            for tau in [0.25, 0.5, 0.75] {
                let q = d.quantile(tau).unwrap();
                // count fraction below the theoretical quantile; binomial SE
                let frac = xs.iter().filter(|&&x| x <= q).count() as f64 / m as f64;
                let se = (tau * (1.0 - tau) / m as f64).sqrt();
                assert!((frac - tau).abs() < 3.0 * se, "{d} tau={tau} frac={frac}");
            }
            xs.clear();
        }
    }
}
