//! Effective depth and width of a cell, and the keep/drop filter built on
//! them.
//!
//! For a path profile with `P` paths and per-path parameterized-op counts
//! `d_p`:
//!
//! ```text
//! effective depth  d̄ = Σ d_p / P
//! effective width  m̄ = #{p : d_p > 0} / d̄
//! ```
//!
//! All arithmetic is double precision. The filter keeps an architecture iff
//! both metrics lie within `keep_fraction` times the radius of a center
//! computed from the extremes of the search space (inclusive bounds).

use std::borrow::Borrow;
use std::fmt;

use thiserror::Error;

use crate::graph::{enumerate_paths, ArchGraph, PathProfile};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("output node is unreachable (no end-to-end path)")]
    NoPath,
    #[error("effective depth is zero; effective width is undefined")]
    DepthZero,
    #[error("no graph with finite metrics in the space ({skipped} skipped)")]
    EmptySpace { skipped: usize },
    #[error("degenerate space: radius_depth={radius_depth}, radius_width={radius_width}")]
    RadiusZero {
        radius_depth: f64,
        radius_width: f64,
    },
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("filter config line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
    #[error("filter config is missing `{0}`")]
    MissingKey(&'static str),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::NoPath => "NoPath",
            MetricsError::DepthZero => "DepthZero",
            MetricsError::EmptySpace { .. } => "EmptySpace",
            MetricsError::RadiusZero { .. } => "RadiusZero",
            MetricsError::InvalidConfig(_) => "InvalidConfig",
            MetricsError::ConfigParse { .. } => "ConfigParse",
            MetricsError::MissingKey(_) => "ConfigMissing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopoMetrics {
    pub eff_depth: f64,
    pub eff_width: f64,
    pub num_paths: usize,
    pub sum_depths: u64,
    pub num_param_paths: usize,
}

pub fn compute_metrics(profile: &PathProfile) -> Result<TopoMetrics, MetricsError> {
    let num_paths = profile.num_paths();
    if num_paths == 0 {
        return Err(MetricsError::NoPath);
    }
    let sum_depths = profile.sum_depths();
    if sum_depths == 0 {
        return Err(MetricsError::DepthZero);
    }
    let num_param_paths = profile.num_param_paths();
    let eff_depth = sum_depths as f64 / num_paths as f64;
    Ok(TopoMetrics {
        eff_depth,
        eff_width: num_param_paths as f64 / eff_depth,
        num_paths,
        sum_depths,
        num_param_paths,
    })
}

/// Path enumeration followed by [`compute_metrics`].
pub fn graph_metrics(g: &ArchGraph) -> Result<TopoMetrics, MetricsError> {
    compute_metrics(&enumerate_paths(g))
}

pub const DEFAULT_KEEP_FRACTION: f64 = 0.5;

/// Center and radius of the accepted region in `(d̄, m̄)` space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub center_depth: f64,
    pub center_width: f64,
    pub radius_depth: f64,
    pub radius_width: f64,
    pub keep_fraction: f64,
}

impl FilterConfig {
    pub fn new(
        center_depth: f64,
        center_width: f64,
        radius_depth: f64,
        radius_width: f64,
        keep_fraction: f64,
    ) -> Result<Self, MetricsError> {
        let cfg = FilterConfig {
            center_depth,
            center_width,
            radius_depth,
            radius_width,
            keep_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [
            self.center_depth,
            self.center_width,
            self.radius_depth,
            self.radius_width,
            self.keep_fraction,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::InvalidConfig("values must be finite".into()));
        }
        if self.radius_depth <= 0.0 || self.radius_width <= 0.0 {
            return Err(MetricsError::InvalidConfig("radii must be positive".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(MetricsError::InvalidConfig(
                "keep_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn with_keep_fraction(self, keep_fraction: f64) -> Self {
        FilterConfig {
            keep_fraction,
            ..self
        }
    }

    /// Parse the flat `key=value` format written by `Display`.
    pub fn from_kv_str(text: &str) -> Result<Self, MetricsError> {
        FilterOverrides::from_kv_str(text)?.resolve()
    }
}

/// Writes the `key=value` file format, one key per line.
impl fmt::Display for FilterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "center_depth={}", self.center_depth)?;
        writeln!(f, "center_width={}", self.center_width)?;
        writeln!(f, "radius_depth={}", self.radius_depth)?;
        writeln!(f, "radius_width={}", self.radius_width)?;
        writeln!(f, "keep_fraction={}", self.keep_fraction)
    }
}

/// A partially specified [`FilterConfig`]; later layers (CLI flags) override
/// earlier ones (config file).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FilterOverrides {
    pub center_depth: Option<f64>,
    pub center_width: Option<f64>,
    pub radius_depth: Option<f64>,
    pub radius_width: Option<f64>,
    pub keep_fraction: Option<f64>,
}

impl FilterOverrides {
    /// Blank lines and `#` comments are ignored; unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self, MetricsError> {
        let mut out = FilterOverrides::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |reason: String| MetricsError::ConfigParse {
                line: idx + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key=value".into()))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("`{}` is not a number", value.trim())))?;
            let slot = match key.trim() {
                "center_depth" => &mut out.center_depth,
                "center_width" => &mut out.center_width,
                "radius_depth" => &mut out.radius_depth,
                "radius_width" => &mut out.radius_width,
                "keep_fraction" => &mut out.keep_fraction,
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            };
            *slot = Some(value);
        }
        Ok(out)
    }

    /// `self` with every value set in `top` replaced.
    pub fn overridden_by(self, top: FilterOverrides) -> Self {
        FilterOverrides {
            center_depth: top.center_depth.or(self.center_depth),
            center_width: top.center_width.or(self.center_width),
            radius_depth: top.radius_depth.or(self.radius_depth),
            radius_width: top.radius_width.or(self.radius_width),
            keep_fraction: top.keep_fraction.or(self.keep_fraction),
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == FilterOverrides::default()
    }

    /// `keep_fraction` defaults to one half; the other keys are required.
    pub fn resolve(self) -> Result<FilterConfig, MetricsError> {
        FilterConfig::new(
            self.center_depth
                .ok_or(MetricsError::MissingKey("center_depth"))?,
            self.center_width
                .ok_or(MetricsError::MissingKey("center_width"))?,
            self.radius_depth
                .ok_or(MetricsError::MissingKey("radius_depth"))?,
            self.radius_width
                .ok_or(MetricsError::MissingKey("radius_width"))?,
            self.keep_fraction.unwrap_or(DEFAULT_KEEP_FRACTION),
        )
    }
}

/// Why the filter accepted or rejected an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Keep,
    DepthOut,
    WidthOut,
    BothOut,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Keep => "keep",
            Verdict::DepthOut => "depth_out",
            Verdict::WidthOut => "width_out",
            Verdict::BothOut => "both_out",
        }
    }
}

/// Slack on the filter bounds, so that the extremes a config was derived from
/// stay inside it despite rounding in the center and radius.
pub const BOUND_TOLERANCE: f64 = 1e-12;

pub fn filter_verdict(m: &TopoMetrics, cfg: &FilterConfig) -> Verdict {
    let inside = |x: f64, center: f64, radius: f64| {
        (x - center).abs() <= cfg.keep_fraction * radius + BOUND_TOLERANCE
    };
    let depth_ok = inside(m.eff_depth, cfg.center_depth, cfg.radius_depth);
    let width_ok = inside(m.eff_width, cfg.center_width, cfg.radius_width);
    match (depth_ok, width_ok) {
        (true, true) => Verdict::Keep,
        (false, true) => Verdict::DepthOut,
        (true, false) => Verdict::WidthOut,
        (false, false) => Verdict::BothOut,
    }
}

pub fn filter_keep(m: &TopoMetrics, cfg: &FilterConfig) -> bool {
    filter_verdict(m, cfg) == Verdict::Keep
}

/// Running min/max of `(d̄, m̄)` over a stream. `merge` is associative, so
/// partial accumulators from shards can be combined in any grouping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremesAccumulator {
    pub depth_min: f64,
    pub depth_max: f64,
    pub width_min: f64,
    pub width_max: f64,
    pub considered: usize,
    pub skipped: usize,
}

impl Default for ExtremesAccumulator {
    fn default() -> Self {
        ExtremesAccumulator {
            depth_min: f64::INFINITY,
            depth_max: f64::NEG_INFINITY,
            width_min: f64::INFINITY,
            width_max: f64::NEG_INFINITY,
            considered: 0,
            skipped: 0,
        }
    }
}

impl ExtremesAccumulator {
    pub fn push(&mut self, metrics: Result<TopoMetrics, MetricsError>) {
        match metrics {
            Ok(m) => {
                self.depth_min = self.depth_min.min(m.eff_depth);
                self.depth_max = self.depth_max.max(m.eff_depth);
                self.width_min = self.width_min.min(m.eff_width);
                self.width_max = self.width_max.max(m.eff_width);
                self.considered += 1;
            }
            Err(_) => self.skipped += 1,
        }
    }

    pub fn merge(self, other: Self) -> Self {
        ExtremesAccumulator {
            depth_min: self.depth_min.min(other.depth_min),
            depth_max: self.depth_max.max(other.depth_max),
            width_min: self.width_min.min(other.width_min),
            width_max: self.width_max.max(other.width_max),
            considered: self.considered + other.considered,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn finish(self) -> Result<SpaceExtremes, MetricsError> {
        if self.considered == 0 {
            return Err(MetricsError::EmptySpace {
                skipped: self.skipped,
            });
        }
        let radius_depth = (self.depth_max - self.depth_min) / 2.0;
        let radius_width = (self.width_max - self.width_min) / 2.0;
        if radius_depth <= 0.0 || radius_width <= 0.0 {
            return Err(MetricsError::RadiusZero {
                radius_depth,
                radius_width,
            });
        }
        Ok(SpaceExtremes {
            config: FilterConfig {
                center_depth: (self.depth_max + self.depth_min) / 2.0,
                center_width: (self.width_max + self.width_min) / 2.0,
                radius_depth,
                radius_width,
                keep_fraction: DEFAULT_KEEP_FRACTION,
            },
            depth_range: (self.depth_min, self.depth_max),
            width_range: (self.width_min, self.width_max),
            considered: self.considered,
            skipped: self.skipped,
        })
    }
}

/// Filter config derived from a space, with the observed ranges and how many
/// graphs were skipped for having no path or zero depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceExtremes {
    pub config: FilterConfig,
    pub depth_range: (f64, f64),
    pub width_range: (f64, f64),
    pub considered: usize,
    pub skipped: usize,
}

pub fn space_extremes<I>(graphs: I) -> Result<SpaceExtremes, MetricsError>
where
    I: IntoIterator,
    I::Item: Borrow<ArchGraph>,
{
    let mut acc = ExtremesAccumulator::default();
    for g in graphs {
        acc.push(graph_metrics(g.borrow()));
    }
    acc.finish()
}
