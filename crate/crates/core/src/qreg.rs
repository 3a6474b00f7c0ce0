//! Nuisance quantile regression of Y on Z and the score vector fed to both
//! test statistics.
//!
//! The check-loss problem is solved through its bounded dual
//!
//! ```text
//!   min  -Y'a   s.t.  Z'a = (1 - tau) Z'1,  0 <= a <= 1
//! ```
//!
//! with a Mehrotra predictor-corrector interior-point method. Every
//! iterate stays primal and dual feasible, so the duality gap is exactly
//! the sum of the complementarity products. Once the gap is small the
//! fit is snapped to a basic solution (q observations fitted exactly)
//! whenever that does not raise the objective.

use nalgebra::{DVector, Dyn, OMatrix, SVD};

use crate::error::{Error, Result};
use crate::numlin::{check_prob, ensure_finite, Matrix};

pub type Vector = DVector<f64>;

/// Relative duality gap at which the interior-point loop stops.
pub const GAP_TOL: f64 = 1e-9;
pub const MAX_ITER: usize = 200;
const STEP_DAMPING: f64 = 0.99995;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFit {
    pub alpha_hat: Vector,
    /// Scores; rows interpolated by a vertex fit count as zero residuals.
    pub psi_hat: Vector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `rho_tau(t) = t (tau - I(t < 0))`.
pub fn check_loss(t: f64, tau: f64) -> Result<f64> {
    check_prob(tau)?;
    Ok(rho(t, tau))
}

#[inline]
fn rho(t: f64, tau: f64) -> f64 {
    if t < 0.0 {
        t * (tau - 1.0)
    } else {
        t * tau
    }
}

/// Total check loss of the residuals `Y - Z alpha`.
pub fn objective(y: &Vector, z: &Matrix, alpha: &Vector, tau: f64) -> f64 {
    let fitted = z * alpha;
    y.iter().zip(fitted.iter()).map(|(yi, fi)| rho(yi - fi, tau)).sum()
}

/// `psi_i = I(Y_i - Z_i'alpha <= 0) - tau`.
pub fn quantile_score(y: &Vector, z: &Matrix, alpha_hat: &Vector, tau: f64) -> Result<Vector> {
    check_prob(tau)?;
    if z.nrows() != y.len() || z.ncols() != alpha_hat.len() {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} entries, Z is {}x{}, alpha has {}",
            y.len(),
            z.nrows(),
            z.ncols(),
            alpha_hat.len()
        )));
    }
    let fitted = z * alpha_hat;
    Ok(Vector::from_iterator(
        y.len(),
        y.iter().zip(fitted.iter()).map(|(yi, fi)| score_of_residual(yi - fi, tau)),
    ))
}

#[inline]
pub(crate) fn score_of_residual(r: f64, tau: f64) -> f64 {
    if r <= 0.0 {
        1.0 - tau
    } else {
        -tau
    }
}

/// Fit `argmin_alpha sum rho_tau(Y_i - Z_i'alpha)` and derive the scores.
pub fn fit_nuisance(y: &Vector, z: &Matrix, tau: f64) -> Result<QuantileFit> {
    check_prob(tau)?;
    let (n, q) = z.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} entries but Z has {} rows",
            y.len(),
            n
        )));
    }
    if q == 0 || n < q + 1 {
        return Err(Error::TooFewRows { needed: q + 1, got: n });
    }
    ensure_finite(z, "Z")?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Y"));
    }
    let sv = z.clone().singular_values();
    if sv.max() == 0.0 || sv.min() <= crate::numlin::RANK_TOL * sv.max() {
        return Err(Error::RankDeficientZ);
    }

    let ip = interior_point(y, z, tau)?;
    let mut alpha = ip.alpha;
    let mut obj = objective(y, z, &alpha, tau);
    let mut interpolated = Vec::new();
    if let Some((vertex, rows)) = basic_solution(y, z, &alpha) {
        let vobj = objective(y, z, &vertex, tau);
        if vobj <= obj + 1e-12 * (1.0 + obj.abs()) {
            alpha = vertex;
            obj = vobj;
            interpolated = rows;
        }
    }

    if !ip.converged {
        return Err(Error::NoConvergence { iterations: ip.iterations, gap: ip.gap });
    }
    let mut psi_hat = quantile_score(y, z, &alpha, tau)?;
    // interpolated rows have zero residual up to rounding
    for i in interpolated {
        psi_hat[i] = score_of_residual(0.0, tau);
    }
    Ok(QuantileFit {
        alpha_hat: alpha,
        psi_hat,
        objective: obj,
        iterations: ip.iterations,
        converged: ip.converged,
    })
}

struct IpOutcome {
    alpha: Vector,
    iterations: usize,
    gap: f64,
    converged: bool,
}

/// Largest step in (0, 1] keeping `v + step * dv` positive, damped.
fn max_step(v: &Vector, dv: &Vector) -> f64 {
    let mut step = f64::INFINITY;
    for (vi, di) in v.iter().zip(dv.iter()) {
        if *di < 0.0 {
            step = step.min(-vi / di);
        }
    }
    (STEP_DAMPING * step).min(1.0)
}

/// Solve `(Z' diag(w) Z) d = Z' (w .* h)` for the Newton direction.
fn weighted_normal_solve(z: &Matrix, w: &Vector, h: &Vector) -> Vector {
    let q = z.ncols();
    let mut m = Matrix::zeros(q, q);
    let mut rhs = Vector::zeros(q);
    for (i, row) in z.row_iter().enumerate() {
        let wi = w[i];
        for a in 0..q {
            let za = row[a] * wi;
            rhs[a] += za * h[i];
            for b in 0..=a {
                m[(a, b)] += za * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => SVD::new(m, true, true)
            .solve(&rhs, 1e-14)
            .unwrap_or_else(|_| Vector::zeros(q)),
    }
}

fn interior_point(y: &Vector, z: &Matrix, tau: f64) -> Result<IpOutcome> {
    let n = y.len();
    let c = -y;
    let b = z.tr_mul(&Vector::from_element(n, 1.0 - tau));

    // primal: x in (0,1) with Z'x = b, s = 1 - x
    let mut x = Vector::from_element(n, 1.0 - tau);
    let mut s = Vector::from_element(n, tau);

    // dual: least-squares start, then split the residual into z - w
    let mut dual = SVD::new(z.clone(), true, true)
        .solve(&c, 1e-14)
        .map_err(|_| Error::RankDeficientZ)?;
    let r0 = &c - z * &dual;
    let shift = 1e-3 * (1.0 + r0.iter().map(|v| v.abs()).sum::<f64>() / n as f64);
    let mut zs = r0.map(|v| v.max(0.0) + shift);
    let mut ws = r0.map(|v| (-v).max(0.0) + shift);

    let gap_of = |x: &Vector, s: &Vector, zs: &Vector, ws: &Vector, dual: &Vector| {
        let gap = x.dot(zs) + s.dot(ws);
        let primal = c.dot(x);
        let dual_obj = b.dot(dual) - ws.sum();
        gap / (1.0 + primal.abs() + dual_obj.abs())
    };

    let mut rel_gap = gap_of(&x, &s, &zs, &ws, &dual);
    let mut it = 0;
    while rel_gap > GAP_TOL && it < MAX_ITER {
        it += 1;

        // affine-scaling direction
        let weight = Vector::from_iterator(n, (0..n).map(|i| 1.0 / (zs[i] / x[i] + ws[i] / s[i])));
        let r = &zs - &ws;
        let mut dy = weighted_normal_solve(z, &weight, &r);
        let mut dx = weight.component_mul(&(z * &dy - &r));
        let mut ds = -&dx;
        let mut dz = Vector::from_iterator(n, (0..n).map(|i| -zs[i] * (dx[i] / x[i] + 1.0)));
        let mut dw = Vector::from_iterator(n, (0..n).map(|i| -ws[i] * (ds[i] / s[i] + 1.0)));

        let mut fp = max_step(&x, &dx).min(max_step(&s, &ds));
        let mut fd = max_step(&zs, &dz).min(max_step(&ws, &dw));

        if fp.min(fd) < 1.0 {
            // Mehrotra centering and second-order correction
            let mu = zs.dot(&x) + ws.dot(&s);
            let g = (&zs + fd * &dz).dot(&(&x + fp * &dx)) + (&ws + fd * &dw).dot(&(&s + fp * &ds));
            let mu = mu * (g / mu).powi(3) / (2.0 * n as f64);

            let dxdz = dx.component_mul(&dz);
            let dsdw = ds.component_mul(&dw);
            let h = Vector::from_iterator(
                n,
                (0..n).map(|i| {
                    let xi = mu * (1.0 / x[i] - 1.0 / s[i]);
                    r[i] - xi + dxdz[i] / x[i] - dsdw[i] / s[i]
                }),
            );
            dy = weighted_normal_solve(z, &weight, &h);
            dx = weight.component_mul(&(z * &dy - &h));
            ds = -&dx;
            dz = Vector::from_iterator(
                n,
                (0..n).map(|i| mu / x[i] - zs[i] - zs[i] * dx[i] / x[i] - dxdz[i] / x[i]),
            );
            dw = Vector::from_iterator(
                n,
                (0..n).map(|i| mu / s[i] - ws[i] - ws[i] * ds[i] / s[i] - dsdw[i] / s[i]),
            );
            fp = max_step(&x, &dx).min(max_step(&s, &ds));
            fd = max_step(&zs, &dz).min(max_step(&ws, &dw));
        }

        x.axpy(fp, &dx, 1.0);
        s.axpy(fp, &ds, 1.0);
        dual.axpy(fd, &dy, 1.0);
        zs.axpy(fd, &dz, 1.0);
        ws.axpy(fd, &dw, 1.0);

        rel_gap = gap_of(&x, &s, &zs, &ws, &dual);
        if !rel_gap.is_finite() {
            break;
        }
    }

    Ok(IpOutcome {
        alpha: -dual,
        iterations: it,
        gap: rel_gap,
        converged: rel_gap <= GAP_TOL,
    })
}

/// Interpolate the q observations closest to the fit that span R^q.
fn basic_solution(y: &Vector, z: &Matrix, alpha: &Vector) -> Option<(Vector, Vec<usize>)> {
    let (n, q) = z.shape();
    let resid = y - z * alpha;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()).then(a.cmp(&b)));

    let scale = z.amax().max(1.0);
    let mut basis: Vec<Vector> = Vec::with_capacity(q);
    let mut rows = Vec::with_capacity(q);
    for &i in &order {
        let mut v = z.row(i).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for e in &basis {
            let proj = e.dot(&v);
            v.axpy(-proj, e, 1.0);
        }
        let nv = v.norm();
        if nv > 1e-8 * norm0.max(1e-300) && nv > 1e-12 * scale {
            basis.push(v / nv);
            rows.push(i);
            if rows.len() == q {
                break;
            }
        }
    }
    if rows.len() < q {
        return None;
    }
    let zh = OMatrix::<f64, Dyn, Dyn>::from_fn(q, q, |a, b| z[(rows[a], b)]);
    let yh = Vector::from_iterator(q, rows.iter().map(|&i| y[i]));
    zh.lu().solve(&yh).map(|a| (a, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn intercept(n: usize) -> Matrix {
        Matrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn check_loss_values() {
        assert_eq!(check_loss(1.0, 0.5).unwrap(), 0.5);
        assert_eq!(check_loss(-2.0, 0.25).unwrap(), 1.5);
        for tau in [0.1, 0.5, 0.9] {
            assert_eq!(check_loss(0.0, tau).unwrap(), 0.0);
        }
        assert_eq!(check_loss(1.0, 1.0), Err(Error::TauOutOfRange(1.0)));
    }

    #[test]
    fn score_convention() {
        let z = intercept(3);
        let a = Vector::from_element(1, 0.0);
        let y = Vector::from_vec(vec![-0.3, 0.3, 0.0]);
        let s = quantile_score(&y, &z, &a, 0.25).unwrap();
        assert_eq!(s[0], 0.75);
        assert_eq!(s[1], -0.25);
        let s = quantile_score(&y, &z, &a, 0.5).unwrap();
        assert_eq!(s[2], 0.5);
        let bad = Vector::from_element(2, 0.0);
        assert!(matches!(quantile_score(&y, &z, &bad, 0.5), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn intercept_only_median() {
        let y = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let fit = fit_nuisance(&y, &intercept(3), 0.5).unwrap();
        assert!((fit.alpha_hat[0] - 2.0).abs() < 1e-9);
        assert!(fit.converged);
    }

    #[test]
    fn intercept_only_flat_region() {
        let y = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let fit = fit_nuisance(&y, &intercept(4), 0.25).unwrap();
        assert!(fit.alpha_hat[0] >= 1.0 - 1e-9 && fit.alpha_hat[0] <= 2.0 + 1e-9);
        // all minimizers share the loss at alpha = 1: 0.25 * (0 + 1 + 2 + 3)
        let at_one = objective(&y, &intercept(4), &Vector::from_element(1, 1.0), 0.25);
        assert!((fit.objective - at_one).abs() < 1e-12);
        assert!((at_one - 1.5).abs() < 1e-12);
    }

    /// Nested grid refinement over a 2-d coefficient; independent of the solver.
    fn grid_oracle(y: &Vector, z: &Matrix, tau: f64) -> f64 {
        let mut center = [0.0_f64, 0.0];
        let mut half = 20.0;
        let mut best = f64::INFINITY;
        for _ in 0..60 {
            let steps = 40;
            let mut arg = center;
            for i in 0..=steps {
                for j in 0..=steps {
                    let a = center[0] - half + 2.0 * half * i as f64 / steps as f64;
                    let b = center[1] - half + 2.0 * half * j as f64 / steps as f64;
                    let v = objective(y, z, &Vector::from_vec(vec![a, b]), tau);
                    if v < best {
                        best = v;
                        arg = [a, b];
                    }
                }
            }
            center = arg;
            half *= 0.25;
        }
        best
    }

    #[test]
    fn two_dimensional_fit_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tau in [0.25, 0.5, 0.75] {
            let z = Matrix::from_fn(6, 2, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            let y = Vector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0 + 0.5);
            let fit = fit_nuisance(&y, &z, tau).unwrap();
            let oracle = grid_oracle(&y, &z, tau);
            assert!(fit.objective <= oracle + 1e-6, "tau {tau}: {} vs {}", fit.objective, oracle);
            assert!((fit.objective - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let y = Vector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(fit_nuisance(&y, &intercept(2), 1.5), Err(Error::TauOutOfRange(_))));
        let z = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(fit_nuisance(&y, &z, 0.5), Err(Error::RankDeficientZ));
        assert!(matches!(
            fit_nuisance(&Vector::from_vec(vec![1.0]), &intercept(1), 0.5),
            Err(Error::TooFewRows { .. })
        ));
    }

    #[test]
    fn sign_condition_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..30 {
            let n = 20 + trial;
            let z = Matrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            let y = Vector::from_fn(n, |_, _| rng.sample(StandardNormal));
            let tau = rng.random_range(0.1..0.9);
            let fit = fit_nuisance(&y, &z, tau).unwrap();
            let resid = &y - &z * &fit.alpha_hat;
            let tol = 1e-9;
            let neg = resid.iter().filter(|&&r| r < -tol).count() as f64;
            let nonpos = resid.iter().filter(|&&r| r <= tol).count() as f64;
            assert!(neg <= n as f64 * tau + 1e-9);
            assert!(nonpos >= n as f64 * tau - 1e-9);
        }
    }
}
