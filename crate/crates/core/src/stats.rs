//! Sum-type, max-type and combined test statistics with their null
//! calibrations.

use log::warn;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numlin::{self, check_prob, ensure_finite, Matrix};
use crate::qreg::{self, Vector};

/// Clamp applied to p-values before the tangent transform.
pub const P_CLAMP: f64 = 1e-15;

/// Columns of W with squared norm at or below `DEGENERATE_COL_TOL * n` are dropped.
pub const DEGENERATE_COL_TOL: f64 = 1e-12;

/// Response, adjustment covariates (first column all ones) and
/// high-dimensional covariates at a fixed quantile level.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vector,
    pub z: Matrix,
    pub x: Matrix,
    pub tau: f64,
}

impl Dataset {
    pub fn new(y: Vector, z: Matrix, x: Matrix, tau: f64) -> Result<Self> {
        check_prob(tau)?;
        let n = y.len();
        if z.nrows() != n || x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "Y has {n} rows, Z has {}, X has {}",
                z.nrows(),
                x.nrows()
            )));
        }
        if z.ncols() == 0 || x.ncols() == 0 {
            return Err(Error::DimensionMismatch("Z and X need at least one column".into()));
        }
        if n < z.ncols() + 1 {
            return Err(Error::TooFewRows { needed: z.ncols() + 1, got: n });
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Y"));
        }
        ensure_finite(&z, "Z")?;
        ensure_finite(&x, "X")?;
        if z.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::InvalidConfig("first column of Z must be all ones".into()));
        }
        Ok(Dataset { y, z, x, tau })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        check_prob(tau)?;
        Ok(Dataset { tau, ..self.clone() })
    }

    /// Rows `idx` (in that order) of every component.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: self.y.select_rows(idx),
            z: self.z.select_rows(idx),
            x: self.x.select_rows(idx),
            tau: self.tau,
        }
    }
}

/// How the sum statistic is combined with the max statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum CombinationRule {
    /// Average of the two Cauchy transforms; exactly standard Cauchy under independence.
    #[default]
    #[serde(rename = "cauchy")]
    CauchyEqualWeights,
    /// Unweighted sum of the two transforms read against a standard Cauchy.
    #[serde(rename = "cauchy-paper")]
    CauchyPaperSum,
    /// Minimum p-value with the Sidak threshold `1 - sqrt(1 - alpha)`.
    #[serde(rename = "minp")]
    MinP,
}

impl CombinationRule {
    pub fn name(self) -> &'static str {
        match self {
            CombinationRule::CauchyEqualWeights => "cauchy",
            CombinationRule::CauchyPaperSum => "cauchy-paper",
            CombinationRule::MinP => "minp",
        }
    }
}

impl fmt::Display for CombinationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CombinationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cauchy" => Ok(CombinationRule::CauchyEqualWeights),
            "cauchy-paper" => Ok(CombinationRule::CauchyPaperSum),
            "minp" => Ok(CombinationRule::MinP),
            other => Err(Error::InvalidConfig(format!("unknown combination rule `{other}`"))),
        }
    }
}

/// Source of `tr(Sigma_x^2)` in the sum-statistic standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceMode {
    /// Unbiased U-statistic estimate from the rows of X.
    Estimate,
    /// Known population value (simulation only).
    Oracle { trace_sigma2: f64 },
}

impl TraceMode {
    /// Oracle mode from a known covariance of X.
    pub fn oracle(sigma_x: &Matrix) -> Self {
        TraceMode::Oracle { trace_sigma2: sigma_x.norm_squared() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub tau: f64,
    pub t_sum: f64,
    pub z_sum: f64,
    pub p_sum: f64,
    pub t_max: f64,
    pub t_max_centered: f64,
    pub p_max: f64,
    pub argmax_col: usize,
    pub t_cc: f64,
    pub p_cc: f64,
    pub trace_estimate: f64,
    pub n: usize,
    /// Columns of W entering the max statistic and its centering.
    pub p_dim: usize,
    pub q: usize,
    pub rule: CombinationRule,
    pub dropped_columns: Vec<usize>,
}

/// Rejection decisions of the three tests at a common level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejections {
    pub cc: bool,
    pub max: bool,
    pub sum: bool,
}

impl TestResult {
    pub fn rejections(&self, alpha: f64) -> Rejections {
        Rejections {
            cc: self.p_cc <= alpha,
            max: self.p_max <= alpha,
            sum: self.p_sum <= alpha,
        }
    }
}

/// `2/(n(n-1)) * sum_{i != j} X_i'X_j psi_i psi_j`, evaluated as
/// `2/(n(n-1)) * (|X'psi|^2 - sum_i |X_i|^2 psi_i^2)`.
pub fn sum_statistic(x: &Matrix, psi: &Vector) -> Result<f64> {
    let n = x.nrows();
    if psi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "X has {n} rows but psi has {} entries",
            psi.len()
        )));
    }
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    let xt_psi = x.tr_mul(psi);
    let diag: f64 = x
        .row_iter()
        .zip(psi.iter())
        .map(|(row, &s)| row.norm_squared() * s * s)
        .sum();
    let nf = n as f64;
    Ok(2.0 / (nf * (nf - 1.0)) * (xt_psi.norm_squared() - diag))
}

/// Unbiased estimate of `tr(Sigma_x^2)`.
///
/// This is the order-4 U-statistic with kernel
/// `((X_i - X_j)'(X_k - X_l))^2 / 4` over distinct quadruples, evaluated
/// in closed form from the centered Gram matrix. It is invariant to the
/// location of X and unbiased whenever fourth moments exist.
pub fn trace_sigma2_estimate(x: &Matrix) -> Result<f64> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::TooFewRows { needed: 4, got: n });
    }
    ensure_finite(x, "X")?;
    let nf = n as f64;
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    let gram = &xc * xc.transpose();
    let tr_s = gram.trace() / (nf - 1.0);
    let tr_s2 = gram.norm_squared() / ((nf - 1.0) * (nf - 1.0));
    let q = gram.diagonal().iter().map(|d| d * d).sum::<f64>() / (nf - 1.0);
    let est = (nf - 1.0) / (nf * (nf - 2.0) * (nf - 3.0))
        * ((nf - 1.0) * (nf - 2.0) * tr_s2 + tr_s * tr_s - nf * q);
    Ok(est.max(1e-12))
}

/// Standardize the sum statistic and return `(z_sum, p_sum)` with an
/// upper-tail normal p-value.
///
/// `t_sum` sums ordered pairs, so its null standard deviation is
/// `2 tau(1-tau) sqrt(2 tr(Sigma^2)) / n`.
pub fn sum_pvalue(t_sum: f64, n: usize, tau: f64, trace_est: f64) -> Result<(f64, f64)> {
    check_prob(tau)?;
    if !trace_est.is_finite() || trace_est <= 0.0 {
        return Err(Error::NonpositiveTrace(trace_est));
    }
    let z = n as f64 * t_sum / (2.0 * tau * (1.0 - tau) * (2.0 * trace_est).sqrt());
    Ok((z, numlin::std_normal_sf(z)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxStatistic {
    pub t_max: f64,
    pub argmax_col: usize,
    /// Number of columns that entered the maximum.
    pub retained: usize,
    pub dropped: Vec<usize>,
}

/// `max_j S_j^2` with `S_j = W_j'psi / sqrt(tau(1-tau) |W_j|^2)`.
pub fn max_statistic(w: &Matrix, psi: &Vector, tau: f64) -> Result<MaxStatistic> {
    check_prob(tau)?;
    let n = w.nrows();
    if psi.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "W has {n} rows but psi has {} entries",
            psi.len()
        )));
    }
    let v = tau * (1.0 - tau);
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    let mut dropped = Vec::new();
    for (j, col) in w.column_iter().enumerate() {
        let nsq = col.norm_squared();
        if nsq <= DEGENERATE_COL_TOL * n as f64 {
            dropped.push(j);
            continue;
        }
        let num = col.dot(psi);
        let s2 = num * num / (v * nsq);
        if s2 > best {
            best = s2;
            arg = j;
        }
    }
    if dropped.len() == w.ncols() {
        return Err(Error::AllColumnsDegenerate);
    }
    if !dropped.is_empty() {
        warn!("dropping {} degenerate projected columns from the max statistic", dropped.len());
    }
    Ok(MaxStatistic { t_max: best, argmax_col: arg, retained: w.ncols() - dropped.len(), dropped })
}

/// Limiting null CDF of the centered max statistic, `exp(-pi^{-1/2} e^{-y/2})`.
pub fn gumbel_cdf(y: f64) -> f64 {
    (-(-y / 2.0).exp() / PI.sqrt()).exp()
}

/// Inverse of [`gumbel_cdf`].
pub fn gumbel_quantile(u: f64) -> Result<f64> {
    check_prob(u)?;
    Ok(-2.0 * (-PI.sqrt() * u.ln()).ln())
}

/// `T_MAX - 2 log p + log log p`.
pub fn center_max(t_max: f64, p_dim: usize) -> Result<f64> {
    if p_dim < 3 {
        return Err(Error::DimensionTooSmall(p_dim));
    }
    let lp = (p_dim as f64).ln();
    Ok(t_max - 2.0 * lp + lp.ln())
}

/// `1 - G(T_MAX - 2 log p + log log p)`.
pub fn max_pvalue(t_max: f64, p_dim: usize) -> Result<f64> {
    let y = center_max(t_max, p_dim)?;
    Ok(-(-(-y / 2.0).exp() / PI.sqrt()).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combination {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[inline]
fn cauchy_transform(p: f64) -> f64 {
    ((0.5 - p) * PI).tan()
}

/// Upper tail of the standard Cauchy distribution.
fn cauchy_sf(t: f64) -> f64 {
    if t > 1.0 {
        (1.0 / t).atan() / PI
    } else {
        0.5 - t.atan() / PI
    }
}

pub fn combine(p_sum: f64, p_max: f64, rule: CombinationRule, alpha: f64) -> Result<Combination> {
    for p in [p_sum, p_max] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::DegeneratePValue(p));
        }
    }
    check_prob(alpha)?;
    Ok(match rule {
        CombinationRule::CauchyEqualWeights => {
            let t = 0.5 * (cauchy_transform(p_sum) + cauchy_transform(p_max));
            let p = cauchy_sf(t);
            Combination { statistic: t, p_value: p, reject: p <= alpha }
        }
        CombinationRule::CauchyPaperSum => {
            let t = cauchy_transform(p_sum) + cauchy_transform(p_max);
            let p = cauchy_sf(t);
            Combination { statistic: t, p_value: p, reject: p <= alpha }
        }
        CombinationRule::MinP => {
            let m = p_sum.min(p_max);
            let threshold = 1.0 - (1.0 - alpha).sqrt();
            Combination {
                statistic: m,
                p_value: 1.0 - (1.0 - m) * (1.0 - m),
                reject: m <= threshold,
            }
        }
    })
}

/// Fit under H0, score, project, and compute all three statistics.
pub fn run_full_test(data: &Dataset, rule: CombinationRule, trace: TraceMode) -> Result<TestResult> {
    let n = data.n();
    let tau = data.tau;
    let fit = qreg::fit_nuisance(&data.y, &data.z, tau)?;
    let psi = &fit.psi_hat;

    let t_sum = sum_statistic(&data.x, psi)?;
    let trace_estimate = match trace {
        TraceMode::Estimate => trace_sigma2_estimate(&data.x)?,
        TraceMode::Oracle { trace_sigma2 } => trace_sigma2,
    };
    let (z_sum, p_sum) = sum_pvalue(t_sum, n, tau, trace_estimate)?;

    let w = numlin::project_out(&data.z, &data.x)?;
    let max = max_statistic(&w, psi, tau)?;
    let t_max_centered = center_max(max.t_max, max.retained)?;
    let p_max = max_pvalue(max.t_max, max.retained)?;

    let clamp = |p: f64| p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    // alpha only drives the reject flag, which TestResult does not store
    let cc = combine(clamp(p_sum), clamp(p_max), rule, 0.05)?;

    Ok(TestResult {
        tau,
        t_sum,
        z_sum,
        p_sum,
        t_max: max.t_max,
        t_max_centered,
        p_max,
        argmax_col: max.argmax_col,
        t_cc: cc.statistic,
        p_cc: cc.p_value,
        trace_estimate,
        n,
        p_dim: max.retained,
        q: data.q(),
        rule,
        dropped_columns: max.dropped,
    })
}

/// Whether the expected number of observations on the thin side of the
/// quantile is too small for the asymptotics (`n tau (1 - tau) < 5`).
pub fn extreme_quantile(n: usize, tau: f64) -> bool {
    n as f64 * tau * (1.0 - tau) < 5.0
}
