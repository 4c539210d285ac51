//! Benchmark ingestion, `(d̄, m̄)` binning and the multiple correlation `R`
//! between accuracy and the pair of topology metrics.
//!
//! `R² = cᵀ R_x⁻¹ c` where `c = [r(d̄, y), r(m̄, y)]` and `R_x` is the 2×2
//! correlation matrix of the predictors; all `r` are Pearson correlations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::graph::parse_nb201;
use crate::metrics::graph_metrics;

/// Decimal places kept when grouping records by metrics.
pub const BIN_DECIMALS: i32 = 6;

/// |r(d̄, m̄)| at or above `1 - SINGULAR_TOLERANCE` is treated as singular.
pub const SINGULAR_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("reading input: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing header: {0}")]
    MissingHeader(String),
    #[error("need at least 3 records, got {0}")]
    TooFewRecords(usize),
    #[error("{0} has zero variance")]
    DegenerateVariance(&'static str),
    #[error("predictors are perfectly correlated (r = {0})")]
    SingularPredictorMatrix(f64),
}

impl StatsError {
    pub fn code(&self) -> &'static str {
        match self {
            StatsError::Io(_) => "Io",
            StatsError::Csv(_) => "Csv",
            StatsError::MissingHeader(_) => "MissingHeader",
            StatsError::TooFewRecords(_) => "TooFewRecords",
            StatsError::DegenerateVariance(_) => "DegenerateVariance",
            StatsError::SingularPredictorMatrix(_) => "SingularPredictorMatrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub arch_id: String,
    pub eff_depth: f64,
    pub eff_width: f64,
    /// Percent, in `[0, 100]`.
    pub accuracy: f64,
}

/// A data row that could not be turned into a record. `row` counts data rows
/// from 1, excluding the header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub row: usize,
    pub reason: String,
}

impl RowError {
    pub fn code(&self) -> &'static str {
        "UnparsableRow"
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<BenchmarkRecord>,
    pub errors: Vec<RowError>,
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<IngestReport, StatsError> {
    ingest_reader(File::open(path)?)
}

/// Read `arch,accuracy` or `arch,d,m,accuracy` (columns in any order). When
/// `d`/`m` are absent, `arch` must be a NAS-Bench-201 string and the metrics
/// are computed from it. Bad rows are collected, never silently dropped.
pub fn ingest_reader<R: Read>(reader: R) -> Result<IngestReport, StatsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let arch_col = column("arch").ok_or_else(|| StatsError::MissingHeader("arch".into()))?;
    let acc_col = column("accuracy").ok_or_else(|| StatsError::MissingHeader("accuracy".into()))?;
    let metric_cols = match (column("d"), column("m")) {
        (Some(d), Some(m)) => Some((d, m)),
        (None, None) => None,
        (Some(_), None) => return Err(StatsError::MissingHeader("m".into())),
        (None, Some(_)) => return Err(StatsError::MissingHeader("d".into())),
    };

    let mut report = IngestReport::default();
    for (idx, row) in rdr.records().enumerate() {
        let row_no = idx + 1;
        let parsed = row.map_err(|e| e.to_string()).and_then(|rec| {
            let field = |col: usize, name: &str| {
                rec.get(col)
                    .ok_or_else(|| format!("missing `{name}` field"))
            };
            let number = |col: usize, name: &str| -> Result<f64, String> {
                let raw = field(col, name)?;
                let v: f64 = raw
                    .parse()
                    .map_err(|_| format!("`{name}` value `{raw}` is not a number"))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(format!("`{name}` is not finite"))
                }
            };
            let arch_id = field(arch_col, "arch")?.to_string();
            let accuracy = number(acc_col, "accuracy")?;
            if !(0.0..=100.0).contains(&accuracy) {
                return Err(format!("accuracy {accuracy} outside [0, 100]"));
            }
            let (eff_depth, eff_width) = match metric_cols {
                Some((d, m)) => (number(d, "d")?, number(m, "m")?),
                None => {
                    let g = parse_nb201(&arch_id).map_err(|e| format!("{}: {e}", e.code()))?;
                    let m = graph_metrics(&g).map_err(|e| format!("{}: {e}", e.code()))?;
                    (m.eff_depth, m.eff_width)
                }
            };
            Ok(BenchmarkRecord {
                arch_id,
                eff_depth,
                eff_width,
                accuracy,
            })
        });
        match parsed {
            Ok(r) => report.records.push(r),
            Err(reason) => report.errors.push(RowError {
                row: row_no,
                reason,
            }),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    pub eff_depth: f64,
    pub eff_width: f64,
    pub count: usize,
    pub mean_acc: f64,
    /// Population standard deviation.
    pub std_acc: f64,
}

fn bin_key(v: f64) -> i64 {
    (v * 10f64.powi(BIN_DECIMALS)).round() as i64
}

/// Group records with equal `(d̄, m̄)` after rounding to [`BIN_DECIMALS`]
/// places. Bins come out sorted by depth, then width.
pub fn bin_by_metrics(records: &[BenchmarkRecord]) -> Vec<BinSummary> {
    let mut groups: BTreeMap<(i64, i64), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry((bin_key(r.eff_depth), bin_key(r.eff_width)))
            .or_default()
            .push(r.accuracy);
    }
    let scale = 10f64.powi(BIN_DECIMALS);
    groups
        .into_iter()
        .map(|((d, m), accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            BinSummary {
                eff_depth: d as f64 / scale,
                eff_width: m as f64 / scale,
                count: accs.len(),
                mean_acc: mean,
                std_acc: var.sqrt(),
            }
        })
        .collect()
}

/// Whether `R` is computed over individual records or over bin means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrelationMode {
    #[default]
    PerRecord,
    BinMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiCorrelation {
    pub r: f64,
    pub r_depth_acc: f64,
    pub r_width_acc: f64,
    pub r_depth_width: f64,
    /// Number of observations the correlations were computed over.
    pub n: usize,
}

fn centered(xs: &[f64], name: &'static str) -> Result<Vec<f64>, StatsError> {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let dev: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    let scale: f64 = xs.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    if ss <= 1e-24 * scale {
        return Err(StatsError::DegenerateVariance(name));
    }
    Ok(dev)
}

fn pearson_centered(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    Ok(pearson_centered(
        &centered(a, "first sample")?,
        &centered(b, "second sample")?,
    ))
}

/// Multiple correlation of accuracy on `(d̄, m̄)` from raw columns.
pub fn multi_correlation_columns(
    depth: &[f64],
    width: &[f64],
    acc: &[f64],
) -> Result<MultiCorrelation, StatsError> {
    let n = acc.len();
    if n < 3 {
        return Err(StatsError::TooFewRecords(n));
    }
    let d = centered(depth, "effective depth")?;
    let m = centered(width, "effective width")?;
    let y = centered(acc, "accuracy")?;
    let r_dy = pearson_centered(&d, &y);
    let r_my = pearson_centered(&m, &y);
    let r_dm = pearson_centered(&d, &m);
    if r_dm.abs() >= 1.0 - SINGULAR_TOLERANCE {
        return Err(StatsError::SingularPredictorMatrix(r_dm));
    }
    let r2 = (r_dy * r_dy + r_my * r_my - 2.0 * r_dy * r_my * r_dm) / (1.0 - r_dm * r_dm);
    debug_assert!((-1e-9..=1.0 + 1e-9).contains(&r2), "R² = {r2}");
    Ok(MultiCorrelation {
        r: r2.clamp(0.0, 1.0).sqrt(),
        r_depth_acc: r_dy,
        r_width_acc: r_my,
        r_depth_width: r_dm,
        n,
    })
}

pub fn multi_correlation(
    records: &[BenchmarkRecord],
    mode: CorrelationMode,
) -> Result<MultiCorrelation, StatsError> {
    match mode {
        CorrelationMode::PerRecord => {
            let d: Vec<f64> = records.iter().map(|r| r.eff_depth).collect();
            let m: Vec<f64> = records.iter().map(|r| r.eff_width).collect();
            let y: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
            multi_correlation_columns(&d, &m, &y)
        }
        CorrelationMode::BinMean => {
            let bins = bin_by_metrics(records);
            let d: Vec<f64> = bins.iter().map(|b| b.eff_depth).collect();
            let m: Vec<f64> = bins.iter().map(|b| b.eff_width).collect();
            let y: Vec<f64> = bins.iter().map(|b| b.mean_acc).collect();
            multi_correlation_columns(&d, &m, &y)
        }
    }
}
