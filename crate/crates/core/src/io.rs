//! CSV ingestion, single-dataset tests, the subsample protocol and
//! plot-ready output tables.
//!
//! Output numbers use 12 significant digits (`%.12g` style). Output
//! headers are stable; consumers should address columns by name.

use log::warn;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numlin::{check_prob, Matrix};
use crate::qreg::Vector;
use crate::sim::{rng_stream, ExperimentConfig, ExperimentReport, SUBSAMPLE_DOMAIN};
use crate::stats::{self, extreme_quantile, CombinationRule, Dataset, TestResult, TraceMode};

/// Two-sided 95% normal quantile used for Wilson bands.
pub const Z_95: f64 = 1.959_963_984_540_054;

pub const TEST_RESULT_HEADER: [&str; 14] = [
    "tau",
    "t_sum",
    "z_sum",
    "p_sum",
    "t_max",
    "t_max_centered",
    "p_max",
    "t_cc",
    "p_cc",
    "trace_estimate",
    "n",
    "p",
    "q",
    "rule",
];

pub const SUBSAMPLE_HEADER: [&str; 8] =
    ["tau", "test_name", "rejection_rate", "ci_low", "ci_high", "replications", "failures", "band"];

pub const POWER_HEADER: [&str; 4] = ["s", "test_name", "power", "se"];

/// Format with 12 significant digits, fixed notation for moderate
/// magnitudes and scientific otherwise; trailing zeros trimmed.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Which file columns play the response, adjustment and high-dimensional roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub response: String,
    /// Adjustment columns; the intercept is added automatically.
    pub z_columns: Vec<String>,
    /// High-dimensional columns; empty means every remaining column.
    #[serde(default)]
    pub x_columns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BadRowPolicy {
    /// Fail on the first unparseable or missing mapped value.
    #[default]
    Reject,
    /// Skip such rows and list them.
    Drop,
}

/// A dataset before a quantile level is chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSkeleton {
    pub y: Vector,
    /// Includes the leading intercept column.
    pub z: Matrix,
    pub x: Matrix,
    pub response: String,
    pub z_names: Vec<String>,
    pub x_names: Vec<String>,
    /// 1-based data-row numbers skipped under [`BadRowPolicy::Drop`].
    pub dropped_rows: Vec<usize>,
}

impl DatasetSkeleton {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn with_tau(&self, tau: f64) -> Result<Dataset> {
        Dataset::new(self.y.clone(), self.z.clone(), self.x.clone(), tau)
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    let v: f64 = raw.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

pub fn ingest_csv(path: &Path, mapping: &ColumnMapping, policy: BadRowPolicy) -> Result<DatasetSkeleton> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let x_names: Vec<String> = if mapping.x_columns.is_empty() {
        headers
            .iter()
            .filter(|h| **h != mapping.response && !mapping.z_columns.contains(h))
            .cloned()
            .collect()
    } else {
        mapping.x_columns.clone()
    };
    if x_names.is_empty() {
        return Err(Error::InvalidConfig("no high-dimensional columns selected".into()));
    }
    let mut seen = HashSet::new();
    for name in std::iter::once(&mapping.response).chain(&mapping.z_columns).chain(&x_names) {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidConfig(format!("column `{name}` is mapped more than once")));
        }
    }

    let y_idx = position(&mapping.response)?;
    let z_idx = mapping.z_columns.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;
    let x_idx = x_names.iter().map(|c| position(c)).collect::<Result<Vec<_>>>()?;

    let (q, p) = (z_idx.len() + 1, x_idx.len());
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    let mut xs = Vec::new();
    let mut dropped = Vec::new();
    let mut row_z = Vec::with_capacity(q);
    let mut row_x = Vec::with_capacity(p);

    'rows: for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let get = |idx: usize, name: &str| -> Result<Option<f64>> {
            match rec.get(idx).and_then(parse_cell) {
                Some(v) => Ok(Some(v)),
                None if policy == BadRowPolicy::Drop => Ok(None),
                None => Err(Error::BadValue { row, column: name.to_string() }),
            }
        };
        let Some(yv) = get(y_idx, &mapping.response)? else {
            dropped.push(row);
            continue;
        };
        row_z.clear();
        row_z.push(1.0);
        for (&i, name) in z_idx.iter().zip(&mapping.z_columns) {
            match get(i, name)? {
                Some(v) => row_z.push(v),
                None => {
                    dropped.push(row);
                    continue 'rows;
                }
            }
        }
        row_x.clear();
        for (&i, name) in x_idx.iter().zip(&x_names) {
            match get(i, name)? {
                Some(v) => row_x.push(v),
                None => {
                    dropped.push(row);
                    continue 'rows;
                }
            }
        }
        ys.push(yv);
        zs.extend_from_slice(&row_z);
        xs.extend_from_slice(&row_x);
    }
    if ys.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    if !dropped.is_empty() {
        warn!("dropped {} rows with missing or unparseable values: {:?}", dropped.len(), dropped);
    }
    let n = ys.len();
    Ok(DatasetSkeleton {
        y: Vector::from_vec(ys),
        z: Matrix::from_row_slice(n, q, &zs),
        x: Matrix::from_row_slice(n, p, &xs),
        response: mapping.response.clone(),
        z_names: mapping.z_columns.clone(),
        x_names,
        dropped_rows: dropped,
    })
}

/// Write a skeleton back out (intercept omitted) with round-trip exact values.
pub fn write_dataset_csv(data: &DatasetSkeleton, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = std::iter::once(data.response.as_str())
        .chain(data.z_names.iter().map(String::as_str))
        .chain(data.x_names.iter().map(String::as_str))
        .collect();
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(format!("{}", data.y[i]));
        rec.extend((1..data.z.ncols()).map(|j| format!("{}", data.z[(i, j)])));
        rec.extend((0..data.x.ncols()).map(|j| format!("{}", data.x[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTestOutput {
    pub result: TestResult,
    pub warnings: Vec<String>,
}

/// Run all three tests on one dataset.
pub fn run_dataset_test(data: &Dataset, rule: CombinationRule) -> Result<DatasetTestOutput> {
    let mut warnings = Vec::new();
    if extreme_quantile(data.n(), data.tau) {
        let msg = format!(
            "extreme quantile: n*tau*(1-tau) = {:.3} < 5, asymptotic calibration is unreliable",
            data.n() as f64 * data.tau * (1.0 - data.tau)
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let result = stats::run_full_test(data, rule, TraceMode::Estimate)?;
    if !result.dropped_columns.is_empty() {
        warnings.push(format!("dropped degenerate columns {:?}", result.dropped_columns));
    }
    Ok(DatasetTestOutput { result, warnings })
}

pub fn test_result_row(r: &TestResult) -> Vec<String> {
    vec![
        fmt_num(r.tau),
        fmt_num(r.t_sum),
        fmt_num(r.z_sum),
        fmt_num(r.p_sum),
        fmt_num(r.t_max),
        fmt_num(r.t_max_centered),
        fmt_num(r.p_max),
        fmt_num(r.t_cc),
        fmt_num(r.p_cc),
        fmt_num(r.trace_estimate),
        r.n.to_string(),
        r.p_dim.to_string(),
        r.q.to_string(),
        r.rule.name().to_string(),
    ]
}

/// Header plus one row per result.
pub fn test_results_csv(results: &[TestResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TEST_RESULT_HEADER)?;
    for r in results {
        w.write_record(test_result_row(r))?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// Parse a CSV table into one name-to-cell map per row.
pub fn read_table(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().cloned().zip(rec.iter().map(str::to_string)).collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsampleProtocol {
    pub subsample_size: usize,
    pub replications: usize,
    pub tau_grid: Vec<f64>,
    pub alpha: f64,
    pub master_seed: u64,
}

impl Default for SubsampleProtocol {
    fn default() -> Self {
        SubsampleProtocol {
            subsample_size: 500,
            replications: 1000,
            tau_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            alpha: 0.05,
            master_seed: 20_240_501,
        }
    }
}

impl SubsampleProtocol {
    pub fn validate(&self, rows: usize) -> Result<()> {
        check_prob(self.alpha)?;
        if self.subsample_size > rows {
            return Err(Error::SubsampleTooLarge { size: self.subsample_size, rows });
        }
        if self.replications == 0 || self.tau_grid.is_empty() {
            return Err(Error::InvalidConfig("need at least one replication and one tau".into()));
        }
        for &t in &self.tau_grid {
            check_prob(t)?;
        }
        if self.tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("tau_grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Wilson score interval for `hits` successes out of `total`.
pub fn wilson_interval(hits: usize, total: usize, z: f64) -> (f64, f64) {
    let m = total as f64;
    let k = hits as f64;
    let z2 = z * z;
    let center = (k + z2 / 2.0) / (m + z2);
    let half = z / (m + z2) * (k * (m - k) / m + z2 / 4.0).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleRow {
    pub tau: f64,
    pub test_name: String,
    pub rejection_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Successful replications the rate is computed over.
    pub replications: usize,
    pub failures: usize,
}

/// Row indices of subsample `rep` at grid position `tau_index`, sorted.
pub fn subsample_indices(rows: usize, size: usize, seed: u64, tau_index: usize, rep: usize) -> Vec<usize> {
    let mut rng = rng_stream(seed, SUBSAMPLE_DOMAIN | ((tau_index as u64) << 32) | rep as u64);
    let mut idx = index::sample(&mut rng, rows, size).into_vec();
    idx.sort_unstable();
    idx
}

pub fn run_subsample_study(
    data: &DatasetSkeleton,
    protocol: &SubsampleProtocol,
    rule: CombinationRule,
) -> Result<Vec<SubsampleRow>> {
    protocol.validate(data.n())?;
    let mut rows = Vec::with_capacity(3 * protocol.tau_grid.len());
    for (ti, &tau) in protocol.tau_grid.iter().enumerate() {
        let full = data.with_tau(tau)?;
        let records: Vec<Result<TestResult>> = (0..protocol.replications)
            .into_par_iter()
            .map(|rep| {
                let idx = subsample_indices(data.n(), protocol.subsample_size, protocol.master_seed, ti, rep);
                stats::run_full_test(&full.select_rows(&idx), rule, TraceMode::Estimate)
            })
            .collect();
        let ok: Vec<&TestResult> = records.iter().flatten().collect();
        let failures = records.len() - ok.len();
        if ok.is_empty() {
            warn!("every replication failed at tau = {tau}");
        }
        let count = |f: &dyn Fn(&TestResult) -> bool| ok.iter().filter(|r| f(r)).count();
        let alpha = protocol.alpha;
        for (name, hits) in [
            ("t_cc", count(&|r| r.rejections(alpha).cc)),
            ("t_max", count(&|r| r.rejections(alpha).max)),
            ("t_sum", count(&|r| r.rejections(alpha).sum)),
        ] {
            let (rate, (lo, hi)) = if ok.is_empty() {
                (f64::NAN, (f64::NAN, f64::NAN))
            } else {
                (hits as f64 / ok.len() as f64, wilson_interval(hits, ok.len(), Z_95))
            };
            rows.push(SubsampleRow {
                tau,
                test_name: name.into(),
                rejection_rate: rate,
                ci_low: lo,
                ci_high: hi,
                replications: ok.len(),
                failures,
            });
        }
    }
    Ok(rows)
}

pub fn subsample_csv(rows: &[SubsampleRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUBSAMPLE_HEADER)?;
    for r in rows {
        w.write_record([
            fmt_num(r.tau),
            r.test_name.clone(),
            fmt_num(r.rejection_rate),
            fmt_num(r.ci_low),
            fmt_num(r.ci_high),
            r.replications.to_string(),
            r.failures.to_string(),
            "wilson95".to_string(),
        ])?;
    }
    into_string(w)
}

/// Long-format `(s, test_name, power, se)` table sorted by `(s, test_name)`.
pub fn power_table_csv(reports: &[ExperimentReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InconsistentConfigs("no reports".into()))?;
    let base = ExperimentConfig { s: 0, ..first.config.clone() };
    for r in reports {
        let other = ExperimentConfig { s: 0, ..r.config.clone() };
        if other != base {
            return Err(Error::InconsistentConfigs(format!(
                "report with s = {} differs from s = {} beyond sparsity",
                r.config.s, first.config.s
            )));
        }
    }
    let mut rows: Vec<(usize, &'static str, f64, f64)> = reports
        .iter()
        .flat_map(|r| r.rates().map(|(name, rate)| (r.config.s, name, rate.rate, rate.se)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(POWER_HEADER)?;
    for (s, name, power, se) in rows {
        w.write_record([s.to_string(), name.to_string(), fmt_num(power), fmt_num(se)])?;
    }
    into_string(w)
}

pub fn emit_power_table(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    let text = power_table_csv(reports)?;
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Rate;

    fn mapping(x: &[&str]) -> ColumnMapping {
        ColumnMapping {
            response: "y".into(),
            z_columns: vec!["z1".into()],
            x_columns: x.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(0.5), "0.5");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(-1234.5), "-1234.5");
        assert_eq!(fmt_num(1e-7), "1e-7");
        assert_eq!(fmt_num(6.02214076e23), "6.02214076e23");
        assert_eq!(fmt_num(123456789012345.0), "1.23456789012e14");
        assert_eq!(fmt_num(2.0), "2");
    }

    #[test]
    fn ingest_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "y,z1,x1,x2\n1,0.5,2,3\n2,1e-1,4,5\n3,-2,6,7\n");
        let d = ingest_csv(&p, &mapping(&["x1", "x2"]), BadRowPolicy::Reject).unwrap();
        assert_eq!((d.n(), d.z.ncols(), d.x.ncols()), (3, 2, 2));
        assert!(d.z.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(d.z[(1, 1)], 0.1);
        // empty x mapping takes every remaining column
        let d2 = ingest_csv(&p, &mapping(&[]), BadRowPolicy::Reject).unwrap();
        assert_eq!(d2.x_names, vec!["x1", "x2"]);
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "y,z1,x1,x2\n1,0.5,2,3\n2,1,abc,5\n3,-2,6,7\n");
        assert_eq!(
            ingest_csv(&p, &mapping(&["x1", "x2"]), BadRowPolicy::Reject),
            Err(Error::BadValue { row: 2, column: "x1".into() })
        );
        let d = ingest_csv(&p, &mapping(&["x1", "x2"]), BadRowPolicy::Drop).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.dropped_rows, vec![2]);
        assert_eq!(
            ingest_csv(&p, &mapping(&["x1", "x9"]), BadRowPolicy::Reject),
            Err(Error::MissingColumn("x9".into()))
        );
        assert!(matches!(
            ingest_csv(&dir.path().join("nope.csv"), &mapping(&["x1"]), BadRowPolicy::Reject),
            Err(Error::FileNotFound(_))
        ));
        let q = write(&dir, "e.csv", "y,z1,x1\n,1,2\nNaN,1,1\n");
        assert_eq!(ingest_csv(&q, &mapping(&["x1"]), BadRowPolicy::Drop), Err(Error::EmptyAfterFiltering));
        assert!(matches!(
            ingest_csv(&p, &mapping(&["x1", "z1"]), BadRowPolicy::Reject),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn wilson_at_zero() {
        let (lo, hi) = wilson_interval(0, 1000, Z_95);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.00383).abs() < 1e-5);
        let (lo, hi) = wilson_interval(50, 1000, Z_95);
        assert!(lo < 0.05 && hi > 0.05);
    }

    #[test]
    fn subsample_boundary_is_degenerate() {
        let a = subsample_indices(10, 10, 3, 0, 0);
        let b = subsample_indices(10, 10, 3, 0, 1);
        assert_eq!(a, b);
        assert_eq!(a, (0..10).collect::<Vec<_>>());
        let c = subsample_indices(100, 10, 3, 0, 0);
        let d = subsample_indices(100, 10, 3, 0, 1);
        assert_ne!(c, d);
    }

    fn report(s: usize, n: usize) -> ExperimentReport {
        let r = Rate { rate: 0.5, se: 0.1 };
        ExperimentReport {
            config: ExperimentConfig { s, n, ..Default::default() },
            replications: 10,
            failures: 0,
            t_cc: r,
            t_max: r,
            t_sum: r,
        }
    }

    #[test]
    fn power_table_layout() {
        let text = power_table_csv(&[report(9, 100), report(1, 100)]).unwrap();
        let rows = read_table(&text).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0]["s"], "1");
        assert_eq!(rows[0]["test_name"], "t_cc");
        assert_eq!(rows[2]["test_name"], "t_sum");
        assert_eq!(rows[3]["s"], "9");
        assert_eq!(power_table_csv(&[report(1, 100)]).map(|t| read_table(&t).unwrap().len()), Ok(3));
        assert!(matches!(
            power_table_csv(&[report(1, 100), report(9, 150)]),
            Err(Error::InconsistentConfigs(_))
        ));
        assert!(power_table_csv(&[]).is_err());
    }

    #[test]
    fn protocol_validation() {
        let p = SubsampleProtocol { subsample_size: 20, ..Default::default() };
        assert_eq!(p.validate(10), Err(Error::SubsampleTooLarge { size: 20, rows: 10 }));
        let p = SubsampleProtocol { subsample_size: 5, tau_grid: vec![0.5, 0.25], ..Default::default() };
        assert!(p.validate(10).is_err());
    }
}
