//! NNGP kernel propagation through cell DAGs (ReLU, `c_σ = 2`).
//!
//! For one pair of inputs `(i, j)` every node carries the triple
//! `(K_ii, K_jj, K_ij)`. A parameterized edge keeps the variances and maps the
//! correlation `c = K_ij / sqrt(K_ii K_jj)` through the arc-cosine map
//!
//! ```text
//! h(c) = (2c·asin(c) + 2·sqrt(1 - c²) + π·c) / (2π)
//! ```
//!
//! rescaled by `sqrt(K_ii K_jj)`. Skip and pooling edges pass the state
//! through, zero edges contribute nothing, and incoming edges sum at a node.
//!
//! The smallest eigenvalue of the output Gram matrix is bounded above by the
//! smallest eigenvalue of any 2×2 principal block, which for a single pair is
//! available in closed form ([`lambda_bound`]).

use std::f64::consts::PI;
use std::ops::Add;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::graph::{builtin, ArchGraph, OpKind, PathProfile};

/// `(E[σ(z)²])⁻¹` for ReLU.
pub const C_SIGMA: f64 = 2.0;

/// Correlations within this distance outside `[-1, 1]` are clamped.
pub const CLAMP_TOLERANCE: f64 = 1e-12;

/// Diagonal tolerance accepted by [`full_kernel`].
pub const GRAM_DIAGONAL_TOLERANCE: f64 = 1e-9;

/// Relative Cauchy–Schwarz slack tolerated in a [`PairKernelState`].
const STATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("correlation {0} outside [-1, 1]")]
    DomainError(f64),
    #[error("input correlation {0} outside [0, 1)")]
    BadInputCorrelation(f64),
    #[error("invalid kernel state ({k_ii}, {k_jj}, {k_ij})")]
    InvalidState { k_ii: f64, k_jj: f64, k_ij: f64 },
    #[error("output node is unreachable")]
    Unreachable,
    #[error("no end-to-end path")]
    NoPath,
    #[error("bad input Gram matrix: {0}")]
    BadGram(String),
    #[error("matrix text format: {0}")]
    MatrixFormat(String),
    #[error("expected λ1 < λ2 < λ3 at k0={k0}, got {lambdas:?}")]
    OrderingViolation { k0: f64, lambdas: [f64; 3] },
}

impl KernelError {
    pub fn code(&self) -> &'static str {
        match self {
            KernelError::DomainError(_) | KernelError::BadInputCorrelation(_) => "DomainError",
            KernelError::InvalidState { .. } => "InvalidState",
            KernelError::Unreachable => "Unreachable",
            KernelError::NoPath => "NoPath",
            KernelError::BadGram(_) => "BadGram",
            KernelError::MatrixFormat(_) => "MatrixFormat",
            KernelError::OrderingViolation { .. } => "OrderingViolation",
        }
    }
}

fn clamp_correlation(c: f64) -> Result<f64, KernelError> {
    if c.is_nan() || c.abs() > 1.0 + CLAMP_TOLERANCE {
        return Err(KernelError::DomainError(c));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// The ReLU correlation map `h` on `[-1, 1]`.
pub fn relu_h(c: f64) -> Result<f64, KernelError> {
    let c = clamp_correlation(c)?;
    Ok((2.0 * c * c.asin() + 2.0 * (1.0 - c * c).sqrt() + PI * c) / (2.0 * PI))
}

/// `h'(c) = asin(c)/π + 1/2`.
pub fn relu_h_prime(c: f64) -> Result<f64, KernelError> {
    let c = clamp_correlation(c)?;
    Ok(c.asin() / PI + 0.5)
}

/// `h` composed `depth` times; `depth = 0` is the identity.
pub fn relu_h_iter(c: f64, depth: u32) -> Result<f64, KernelError> {
    (0..depth).try_fold(clamp_correlation(c)?, |acc, _| relu_h(acc))
}

/// NNGP variances and covariance of one input pair at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairKernelState {
    pub k_ii: f64,
    pub k_jj: f64,
    pub k_ij: f64,
}

impl PairKernelState {
    pub const ZERO: PairKernelState = PairKernelState {
        k_ii: 0.0,
        k_jj: 0.0,
        k_ij: 0.0,
    };

    pub fn new(k_ii: f64, k_jj: f64, k_ij: f64) -> Result<Self, KernelError> {
        let s = PairKernelState { k_ii, k_jj, k_ij };
        s.validate()?;
        Ok(s)
    }

    /// Unit-variance input pair with covariance `k0`.
    pub fn unit(k0: f64) -> Self {
        PairKernelState {
            k_ii: 1.0,
            k_jj: 1.0,
            k_ij: k0,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let bad = KernelError::InvalidState {
            k_ii: self.k_ii,
            k_jj: self.k_jj,
            k_ij: self.k_ij,
        };
        if !(self.k_ii >= 0.0 && self.k_jj >= 0.0 && self.k_ij.is_finite())
            || self.k_ii.is_infinite()
            || self.k_jj.is_infinite()
        {
            return Err(bad);
        }
        let bound = (self.k_ii * self.k_jj).sqrt();
        if self.k_ij.abs() > bound * (1.0 + STATE_TOLERANCE) + CLAMP_TOLERANCE {
            return Err(bad);
        }
        Ok(())
    }

    /// `K_ij / sqrt(K_ii K_jj)`, or `None` when a variance is zero.
    pub fn correlation(&self) -> Option<f64> {
        let denom = (self.k_ii * self.k_jj).sqrt();
        (denom > 0.0).then(|| self.k_ij / denom)
    }

    pub fn scale(self, a: f64) -> Self {
        PairKernelState {
            k_ii: a * self.k_ii,
            k_jj: a * self.k_jj,
            k_ij: a * self.k_ij,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl Add for PairKernelState {
    type Output = PairKernelState;

    fn add(self, rhs: Self) -> Self {
        PairKernelState {
            k_ii: self.k_ii + rhs.k_ii,
            k_jj: self.k_jj + rhs.k_jj,
            k_ij: self.k_ij + rhs.k_ij,
        }
    }
}

/// State after one edge. Pooling (`NonParam`) is treated as a skip.
pub fn propagate_edge(state: PairKernelState, op: OpKind) -> Result<PairKernelState, KernelError> {
    match op {
        OpKind::Zero => Ok(PairKernelState::ZERO),
        OpKind::Skip | OpKind::NonParam => Ok(state),
        OpKind::Param => {
            state.validate()?;
            let k_ij = match state.correlation() {
                Some(c) => relu_h(c)? * (state.k_ii * state.k_jj).sqrt(),
                None => 0.0,
            };
            Ok(PairKernelState { k_ij, ..state })
        }
    }
}

/// States at every node for an arbitrary input state, in node order.
pub fn propagate_states(
    g: &ArchGraph,
    input: PairKernelState,
) -> Result<Vec<PairKernelState>, KernelError> {
    let mut states = vec![PairKernelState::ZERO; g.num_nodes()];
    states[0] = input;
    // edges only point forward, so node order is a topological order
    for node in 1..g.num_nodes() {
        let mut acc = PairKernelState::ZERO;
        for e in g.incoming(node) {
            acc = acc + propagate_edge(states[e.src], e.op)?;
        }
        states[node] = acc;
    }
    Ok(states)
}

/// Output-node state for the unit-variance input pair with covariance `k0`.
pub fn propagate_graph(g: &ArchGraph, k0: f64) -> Result<PairKernelState, KernelError> {
    if !(0.0..1.0).contains(&k0) {
        return Err(KernelError::BadInputCorrelation(k0));
    }
    let out = *propagate_states(g, PairKernelState::unit(k0))?
        .last()
        .expect("at least two nodes");
    if out.is_zero() {
        return Err(KernelError::Unreachable);
    }
    Ok(out)
}

/// Upper bound on the least eigenvalue of a Gram matrix, with the principal
/// block `(i, j)` that attains it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigBound {
    pub lambda_upper: f64,
    pub pair_index: (usize, usize),
}

/// Smaller eigenvalue of `[[a, c], [c, b]]`.
pub fn sym2_min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mean = (a + b) / 2.0;
    let half_gap = (a - b) / 2.0;
    mean - half_gap.hypot(c)
}

/// Least eigenvalue of the 2×2 block of a single pair, indexed `(0, 1)`.
pub fn lambda_bound(state: &PairKernelState) -> EigBound {
    EigBound {
        lambda_upper: sym2_min_eigenvalue(state.k_ii, state.k_jj, state.k_ij),
        pair_index: (0, 1),
    }
}

/// Minimum over all 2×2 principal blocks of a symmetric matrix.
pub fn pairwise_bound(k: &DMatrix<f64>) -> EigBound {
    let n = k.nrows();
    let mut best = EigBound {
        lambda_upper: f64::INFINITY,
        pair_index: (0, 1),
    };
    for i in 0..n {
        for j in i + 1..n {
            let lambda = sym2_min_eigenvalue(k[(i, i)], k[(j, j)], k[(i, j)]);
            if lambda < best.lambda_upper {
                best = EigBound {
                    lambda_upper: lambda,
                    pair_index: (i, j),
                };
            }
        }
    }
    best
}

/// `λ_upper` of the output state from exact propagation.
pub fn exact_lambda(g: &ArchGraph, k0: f64) -> Result<f64, KernelError> {
    Ok(lambda_bound(&propagate_graph(g, k0)?).lambda_upper)
}

/// Path-sum rule `P - Σ_p h^{d_p}(k0)`.
///
/// This is a simplification: it ignores how summed variances rescale the
/// correlation fed into later parameterized edges, so it can differ from
/// [`exact_lambda`] on graphs with parallel branches that merge before a
/// parameterized edge.
pub fn simplified_rule_bound(profile: &PathProfile, k0: f64) -> Result<f64, KernelError> {
    if !(0.0..1.0).contains(&k0) {
        return Err(KernelError::BadInputCorrelation(k0));
    }
    if profile.num_paths() == 0 {
        return Err(KernelError::NoPath);
    }
    let sum = profile.depths.iter().try_fold(0.0, |acc, &d| {
        Ok::<_, KernelError>(acc + relu_h_iter(k0, d)?)
    })?;
    Ok(profile.num_paths() as f64 - sum)
}

/// Output Gram matrix for an input Gram matrix with unit diagonal.
///
/// Each off-diagonal entry is an independent pair propagation; the diagonal
/// comes from propagating a perfectly correlated pair.
pub fn full_kernel(g: &ArchGraph, gram0: &DMatrix<f64>) -> Result<DMatrix<f64>, KernelError> {
    let n = gram0.nrows();
    if n < 2 || gram0.ncols() != n {
        return Err(KernelError::BadGram(format!(
            "expected a square matrix with N >= 2, got {}x{}",
            n,
            gram0.ncols()
        )));
    }
    for i in 0..n {
        if (gram0[(i, i)] - 1.0).abs() > GRAM_DIAGONAL_TOLERANCE {
            return Err(KernelError::BadGram(format!(
                "diagonal entry {i} is {}",
                gram0[(i, i)]
            )));
        }
        for j in i + 1..n {
            let (a, b) = (gram0[(i, j)], gram0[(j, i)]);
            if !a.is_finite() || (a - b).abs() > GRAM_DIAGONAL_TOLERANCE {
                return Err(KernelError::BadGram(format!(
                    "entry ({i},{j}) is not symmetric"
                )));
            }
            if a.abs() >= 1.0 {
                return Err(KernelError::BadGram(format!(
                    "|entry ({i},{j})| = {} >= 1",
                    a.abs()
                )));
            }
        }
    }

    let diag = *propagate_states(g, PairKernelState::unit(1.0))?
        .last()
        .unwrap();
    if diag.is_zero() {
        return Err(KernelError::Unreachable);
    }
    let mut out = DMatrix::from_element(n, n, 0.0);
    for i in 0..n {
        out[(i, i)] = diag.k_ii;
        for j in i + 1..n {
            let s = *propagate_states(g, PairKernelState::unit(gram0[(i, j)]))?
                .last()
                .unwrap();
            out[(i, j)] = s.k_ij;
            out[(j, i)] = s.k_ij;
        }
    }
    Ok(out)
}

/// Least eigenvalue of a dense symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Parse the dense matrix text format: a line with `N`, then `N` rows of `N`
/// whitespace-separated reals. Blank lines are skipped.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, KernelError> {
    let err = |msg: String| KernelError::MatrixFormat(msg);
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let n: usize = lines
        .next()
        .ok_or_else(|| err("empty input".into()))?
        .parse()
        .map_err(|_| err("first line must be the dimension N".into()))?;
    let mut m = DMatrix::from_element(n, n, 0.0);
    for i in 0..n {
        let row = lines
            .next()
            .ok_or_else(|| err(format!("expected {n} rows, got {i}")))?;
        let values = row
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| err(format!("row {}: `{v}` is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != n {
            return Err(err(format!(
                "row {} has {} entries, expected {n}",
                i + 1,
                values.len()
            )));
        }
        for (j, v) in values.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    if lines.next().is_some() {
        return Err(err("trailing rows".into()));
    }
    Ok(m)
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{}\n", m.nrows());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| m[(i, j)].to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// One row of the reference-cell comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderingRow {
    pub k0: f64,
    /// Exact bounds for the sequential, parallel and mixed cells.
    pub lambdas: [f64; 3],
}

impl OrderingRow {
    pub fn is_ordered(&self) -> bool {
        let [l1, l2, l3] = self.lambdas;
        l1 < l2 && l2 < l3
    }
}

/// Exact bounds of the three reference cells at each grid point, without
/// checking their order.
pub fn ordering_rows(k0_grid: &[f64]) -> Result<Vec<OrderingRow>, KernelError> {
    let [(_, d1), (_, d2), (_, d3)] = builtin::all();
    k0_grid
        .iter()
        .map(|&k0| {
            Ok(OrderingRow {
                k0,
                lambdas: [
                    exact_lambda(&d1, k0)?,
                    exact_lambda(&d2, k0)?,
                    exact_lambda(&d3, k0)?,
                ],
            })
        })
        .collect()
}

/// Like [`ordering_rows`], failing on the first grid point where the bounds
/// are not strictly increasing from the sequential to the mixed cell.
pub fn ordering_report(k0_grid: &[f64]) -> Result<Vec<OrderingRow>, KernelError> {
    let rows = ordering_rows(k0_grid)?;
    if let Some(bad) = rows.iter().find(|r| !r.is_ordered()) {
        return Err(KernelError::OrderingViolation {
            k0: bad.k0,
            lambdas: bad.lambdas,
        });
    }
    Ok(rows)
}

/// `count` evenly spaced points from `start` to `end` inclusive.
pub fn linspace(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| {
                if i + 1 == count {
                    end
                } else {
                    start + (end - start) * i as f64 / (count - 1) as f64
                }
            })
            .collect(),
    }
}
