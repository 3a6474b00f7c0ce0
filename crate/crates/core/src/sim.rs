//! Synthetic data and seeded Monte Carlo experiments.
//!
//! Randomness comes from ChaCha8 streams keyed by `master_seed`. Each
//! replication owns the stream `REPLICATION_DOMAIN | index`, so a
//! replication's data is a pure function of `(config, index)` and the
//! parallel schedule never affects results. Per-replication records are
//! collected in index order before aggregation.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{check_prob, psd_sqrt, std_normal_cdf, DistributionKind, Matrix};
use crate::qreg::Vector;
use crate::stats::{self, gumbel_cdf, CombinationRule, Dataset, TestResult, TraceMode};

const POPULATION_DOMAIN: u64 = 0;
const REPLICATION_DOMAIN: u64 = 1 << 56;
pub const SUBSAMPLE_DOMAIN: u64 = 2 << 56;

/// A ChaCha8 generator on stream `stream` of `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Population covariance of `(Z~, X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceCase {
    /// Case I: identity.
    Identity,
    /// Case II: `rho^{|i-j|}`.
    Ar { rho: f64 },
    /// Case III: `I + bb' - diag(b^2)` with a few large loadings in `b`.
    Spiked,
    /// Explicit row-major matrix.
    Explicit { rows: Vec<Vec<f64>> },
}

impl CovarianceCase {
    pub fn ar2() -> Self {
        CovarianceCase::Ar { rho: 0.5 }
    }

    pub fn label(&self) -> String {
        match self {
            CovarianceCase::Identity => "I".into(),
            CovarianceCase::Ar { rho } => format!("II(rho={rho})"),
            CovarianceCase::Spiked => "III".into(),
            CovarianceCase::Explicit { .. } => "explicit".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub case: CovarianceCase,
    pub dim: usize,
}

/// Number of nonzero loadings in the spiked case, `floor(dim^0.3)`.
pub fn spiked_loadings(dim: usize) -> usize {
    // largest k with k^10 <= dim^3, in exact integer arithmetic
    let cube = (dim as u128).pow(3);
    let mut k = (dim as f64).powf(0.3).floor() as u128;
    while (k + 1).pow(10) <= cube {
        k += 1;
    }
    while k > 0 && k.pow(10) > cube {
        k -= 1;
    }
    k as usize
}

pub fn build_sigma(spec: &CovarianceSpec, seed: u64) -> Result<Matrix> {
    let dim = spec.dim;
    if dim == 0 {
        return Err(Error::InvalidConfig("covariance dimension must be at least 1".into()));
    }
    match &spec.case {
        CovarianceCase::Identity => Ok(Matrix::identity(dim, dim)),
        CovarianceCase::Ar { rho } => {
            if rho.is_nan() || rho.abs() >= 1.0 {
                return Err(Error::InvalidConfig(format!("AR correlation {rho} must lie in (-1, 1)")));
            }
            Ok(Matrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs())))
        }
        CovarianceCase::Spiked => {
            let mut rng = rng_stream(seed, POPULATION_DOMAIN);
            let k = spiked_loadings(dim).min(dim);
            let unif = Uniform::new(0.7, 0.9).expect("valid range");
            let mut b = Vector::zeros(dim);
            for bi in b.iter_mut().take(k) {
                *bi = rng.sample(unif);
            }
            let mut sigma = Matrix::identity(dim, dim) + &b * b.transpose();
            for i in 0..dim {
                sigma[(i, i)] -= b[i] * b[i];
            }
            Ok(sigma)
        }
        CovarianceCase::Explicit { rows } => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::DimensionMismatch(format!(
                    "explicit covariance must be {dim}x{dim}"
                )));
            }
            let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
            // validates symmetry and PSD
            psd_sqrt(&m)?;
            Ok(m)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSetting {
    #[default]
    Estimate,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p_dim: usize,
    pub q: usize,
    pub tau: f64,
    /// Innovation law of the covariates.
    pub dist: DistributionKind,
    /// Law of the regression error before quantile centering.
    pub error_dist: DistributionKind,
    pub cov: CovarianceCase,
    pub s: usize,
    pub beta_norm_sq: f64,
    /// True nuisance coefficients; zeros when absent.
    pub alpha_nuisance: Option<Vec<f64>>,
    pub replications: usize,
    pub alpha: f64,
    pub master_seed: u64,
    pub rule: CombinationRule,
    pub trace_mode: TraceSetting,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n: 100,
            p_dim: 120,
            q: 2,
            tau: 0.5,
            dist: DistributionKind::Normal,
            error_dist: DistributionKind::Normal,
            cov: CovarianceCase::Identity,
            s: 0,
            beta_norm_sq: 0.5,
            alpha_nuisance: None,
            replications: 500,
            alpha: 0.05,
            master_seed: 20_240_501,
            rule: CombinationRule::CauchyEqualWeights,
            trace_mode: TraceSetting::Estimate,
        }
    }
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.p_dim + self.q - 1
    }

    pub fn covariance_spec(&self) -> CovarianceSpec {
        CovarianceSpec { case: self.cov.clone(), dim: self.dim() }
    }

    pub fn validate(&self) -> Result<()> {
        check_prob(self.tau)?;
        check_prob(self.alpha)?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.q == 0 {
            return bad("q must be at least 1 (the intercept)".into());
        }
        if self.p_dim == 0 {
            return bad("p_dim must be at least 1".into());
        }
        if self.n < (self.q + 1).max(4) {
            return bad(format!("n = {} is too small", self.n));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.s > self.p_dim {
            return Err(Error::SparsityOutOfRange { s: self.s, p: self.p_dim });
        }
        if self.s > 0 && (self.beta_norm_sq.is_nan() || self.beta_norm_sq <= 0.0) {
            return bad("beta_norm_sq must be positive under an alternative".into());
        }
        if let Some(a) = &self.alpha_nuisance {
            if a.len() != self.q {
                return bad(format!("alpha_nuisance has {} entries, q = {}", a.len(), self.q));
            }
        }
        if self.trace_mode == TraceSetting::Oracle && self.dist.variance().is_none() {
            return bad(format!("oracle trace is undefined for {} covariates", self.dist));
        }
        Ok(())
    }
}

/// Population quantities shared by every replication of an experiment.
#[derive(Debug, Clone)]
pub struct Population {
    pub config: ExperimentConfig,
    pub sigma: Matrix,
    /// `None` for the identity covariance.
    sigma_sqrt: Option<Matrix>,
    alpha_true: Vector,
    error_shift: f64,
}

impl Population {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let sigma = build_sigma(&config.covariance_spec(), config.master_seed)?;
        let sigma_sqrt = match config.cov {
            CovarianceCase::Identity => None,
            _ => Some(psd_sqrt(&sigma)?),
        };
        let alpha_true = match &config.alpha_nuisance {
            Some(a) => Vector::from_column_slice(a),
            None => Vector::zeros(config.q),
        };
        Ok(Population {
            config: config.clone(),
            sigma,
            sigma_sqrt,
            alpha_true,
            error_shift: config.error_dist.quantile(config.tau)?,
        })
    }

    /// Covariance of X: the trailing `p x p` block of Sigma times the innovation variance.
    pub fn sigma_x(&self) -> Option<Matrix> {
        let q1 = self.config.q - 1;
        let p = self.config.p_dim;
        let var = self.config.dist.variance()?;
        Some(self.sigma.view((q1, q1), (p, p)) * var)
    }

    pub fn trace_mode(&self) -> Result<TraceMode> {
        match self.config.trace_mode {
            TraceSetting::Estimate => Ok(TraceMode::Estimate),
            TraceSetting::Oracle => self
                .sigma_x()
                .map(|s| TraceMode::oracle(&s))
                .ok_or_else(|| Error::InvalidConfig("oracle trace needs finite covariate variance".into())),
        }
    }

    /// Draw one dataset from `rng`, in the order: innovations (row-major), errors.
    pub fn draw<R: Rng + ?Sized>(&self, beta: Option<&Vector>, rng: &mut R) -> Result<Dataset> {
        let cfg = &self.config;
        let (n, q, p, dim) = (cfg.n, cfg.q, cfg.p_dim, cfg.dim());
        if let Some(b) = beta {
            if b.len() != p {
                return Err(Error::DimensionMismatch(format!("beta has {} entries, p = {p}", b.len())));
            }
        }
        let mut u = Matrix::zeros(n, dim);
        for i in 0..n {
            for j in 0..dim {
                u[(i, j)] = cfg.dist.sample(rng);
            }
        }
        let cov = match &self.sigma_sqrt {
            Some(r) => &u * r,
            None => u,
        };
        let mut z = Matrix::from_element(n, q, 1.0);
        z.view_mut((0, 1), (n, q - 1)).copy_from(&cov.view((0, 0), (n, q - 1)));
        let x = cov.columns(q - 1, p).into_owned();

        let mut y = &z * &self.alpha_true;
        if let Some(b) = beta {
            y += &x * b;
        }
        for yi in y.iter_mut() {
            *yi += cfg.error_dist.sample(rng) - self.error_shift;
        }
        Dataset::new(y, z, x, cfg.tau)
    }

    /// The dataset of replication `index`; draws its own beta when `s > 0`.
    pub fn replication(&self, index: u64) -> Result<Dataset> {
        let mut rng = rng_stream(self.config.master_seed, REPLICATION_DOMAIN | index);
        let beta = if self.config.s > 0 {
            Some(draw_beta(self.config.s, self.config.p_dim, self.config.beta_norm_sq, &mut rng)?)
        } else {
            None
        };
        self.draw(beta.as_ref(), &mut rng)
    }
}

/// Dataset of replication `replication_index`, drawn with an explicit beta
/// (or none) instead of the configured sparsity.
pub fn gen_dataset(cfg: &ExperimentConfig, beta: Option<&Vector>, replication_index: u64) -> Result<Dataset> {
    let pop = Population::new(cfg)?;
    let mut rng = rng_stream(cfg.master_seed, REPLICATION_DOMAIN | replication_index);
    pop.draw(beta, &mut rng)
}

/// First `s` entries drawn N(0,1), the vector rescaled to `|beta|^2 = norm_sq`.
pub fn draw_beta<R: Rng + ?Sized>(s: usize, p_dim: usize, norm_sq: f64, rng: &mut R) -> Result<Vector> {
    if s == 0 || s > p_dim {
        return Err(Error::SparsityOutOfRange { s, p: p_dim });
    }
    if norm_sq.is_nan() || norm_sq <= 0.0 {
        return Err(Error::InvalidConfig(format!("beta norm {norm_sq} must be positive")));
    }
    let mut beta = Vector::zeros(p_dim);
    loop {
        for b in beta.iter_mut().take(s) {
            *b = rng.sample(StandardNormal);
        }
        if beta.norm_squared() > 0.0 {
            break;
        }
    }
    let scale = (norm_sq / beta.norm_squared()).sqrt();
    beta *= scale;
    Ok(beta)
}

/// Outcome of one replication: the full result, or the error it hit.
pub type ReplicationRecord = std::result::Result<TestResult, Error>;

/// Run every replication of `cfg` (in parallel) and return records in index order.
pub fn simulate_records(cfg: &ExperimentConfig) -> Result<Vec<ReplicationRecord>> {
    let pop = Population::new(cfg)?;
    let trace = pop.trace_mode()?;
    Ok((0..cfg.replications as u64)
        .into_par_iter()
        .map(|i| {
            let data = pop.replication(i)?;
            stats::run_full_test(&data, cfg.rule, trace)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
}

impl Rate {
    pub fn from_counts(hits: usize, total: usize) -> Rate {
        let rate = hits as f64 / total as f64;
        Rate { rate, se: (rate * (1.0 - rate) / total as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub replications: usize,
    /// Replications that returned an error; excluded from the rates.
    pub failures: usize,
    pub t_cc: Rate,
    pub t_max: Rate,
    pub t_sum: Rate,
}

impl ExperimentReport {
    pub fn rates(&self) -> [(&'static str, Rate); 3] {
        [("t_cc", self.t_cc), ("t_max", self.t_max), ("t_sum", self.t_sum)]
    }
}

/// Aggregate per-replication records into rejection rates at `cfg.alpha`.
pub fn aggregate(cfg: &ExperimentConfig, records: &[ReplicationRecord]) -> Result<ExperimentReport> {
    let mut ok = 0usize;
    let (mut cc, mut mx, mut sm) = (0usize, 0usize, 0usize);
    for rec in records.iter().flatten() {
        ok += 1;
        let r = rec.rejections(cfg.alpha);
        cc += r.cc as usize;
        mx += r.max as usize;
        sm += r.sum as usize;
    }
    if ok == 0 {
        return Err(Error::AllReplicationsFailed(records.len()));
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        replications: records.len(),
        failures: records.len() - ok,
        t_cc: Rate::from_counts(cc, ok),
        t_max: Rate::from_counts(mx, ok),
        t_sum: Rate::from_counts(sm, ok),
    })
}

pub fn run_size_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.s != 0 {
        return Err(Error::InvalidConfig("size experiments need s = 0".into()));
    }
    let records = simulate_records(cfg)?;
    aggregate(cfg, &records)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let records = simulate_records(cfg)?;
    aggregate(cfg, &records)
}

/// One report per sparsity level, all other settings shared.
pub fn run_power_experiment(cfg: &ExperimentConfig, s_grid: &[usize]) -> Result<Vec<ExperimentReport>> {
    s_grid
        .iter()
        .map(|&s| {
            let c = ExperimentConfig { s, ..cfg.clone() };
            run_experiment(&c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub joint: f64,
    pub product: f64,
    pub gap: f64,
    /// `Phi(x) G(y)`.
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub pairs: usize,
    pub failures: usize,
    pub correlation: f64,
    pub max_gap: f64,
    pub points: Vec<GridPoint>,
}

/// Default 5x5 grid at the 0.1, 0.3, 0.5, 0.7, 0.9 quantiles of the limiting marginals.
pub fn default_grid() -> Vec<(f64, f64)> {
    let qs = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut grid = Vec::with_capacity(25);
    for &a in &qs {
        for &b in &qs {
            let x = crate::numlin::std_normal_quantile(a).expect("interior probability");
            let y = stats::gumbel_quantile(b).expect("interior probability");
            grid.push((x, y));
        }
    }
    grid
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let m = pairs.len() as f64;
    let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (mx / m, my / m);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Empirical joint CDF against the product of empirical marginals.
pub fn independence_table(pairs: &[(f64, f64)], grid: &[(f64, f64)]) -> IndependenceReport {
    let m = pairs.len() as f64;
    let points: Vec<GridPoint> = grid
        .iter()
        .map(|&(x, y)| {
            let fx = pairs.iter().filter(|p| p.0 <= x).count() as f64 / m;
            let fy = pairs.iter().filter(|p| p.1 <= y).count() as f64 / m;
            let joint = pairs.iter().filter(|p| p.0 <= x && p.1 <= y).count() as f64 / m;
            let product = fx * fy;
            GridPoint {
                x,
                y,
                joint,
                product,
                gap: (joint - product).abs(),
                limit: std_normal_cdf(x) * gumbel_cdf(y),
            }
        })
        .collect();
    IndependenceReport {
        pairs: pairs.len(),
        failures: 0,
        correlation: pearson(pairs),
        max_gap: points.iter().map(|p| p.gap).fold(0.0, f64::max),
        points,
    }
}

pub fn run_independence_probe(cfg: &ExperimentConfig, grid: &[(f64, f64)]) -> Result<IndependenceReport> {
    if cfg.s != 0 {
        return Err(Error::InvalidConfig("the independence probe runs under the null (s = 0)".into()));
    }
    let records = simulate_records(cfg)?;
    let pairs: Vec<(f64, f64)> = records.iter().flatten().map(|r| (r.z_sum, r.t_max_centered)).collect();
    if pairs.is_empty() {
        return Err(Error::AllReplicationsFailed(records.len()));
    }
    let mut report = independence_table(&pairs, grid);
    report.failures = records.len() - pairs.len();
    Ok(report)
}

/// Kolmogorov-Smirnov sup-distance between the empirical CDF of `sample` and `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m)
    })
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(m: usize) -> f64 {
    1.627_6 / (m as f64).sqrt()
}
