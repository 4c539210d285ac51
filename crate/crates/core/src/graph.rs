//! Architecture DAGs.
//!
//! A cell is a DAG over nodes `0..=H`: node 0 is the input feature map, node
//! `H` the output, and every edge `(src, dst)` with `src < dst` carries one
//! operation. Feature maps arriving at a node are summed.
//!
//! Two front ends produce an [`ArchGraph`]:
//!
//! - NAS-Bench-201 cell strings (`|op~0|+|op~0|op~1|+|op~0|op~1|op~2|`), see
//!   [`Nb201Cell`] and [`parse_nb201`];
//! - a small TOML document for arbitrary cells, see [`parse_dag_dsl`].
//!
//! Path enumeration is an exhaustive DFS. The number of end-to-end paths of a
//! fully connected DAG grows as `2^(H-1)`, so graphs are capped at
//! [`DEFAULT_MAX_NODES`] nodes unless a larger cap is requested explicitly.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node cap applied by [`ArchGraph::new`] and [`parse_dag_dsl`].
pub const DEFAULT_MAX_NODES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("malformed architecture string: {0}")]
    MalformedString(String),
    #[error("unknown operation `{0}`")]
    UnknownOp(String),
    #[error("edge token `{token}` at position {position} has an inconsistent source index")]
    BadIndex { token: String, position: usize },
    #[error("edge {src}->{dst} is a self-loop or points backwards")]
    CycleOrBackwardEdge { src: usize, dst: usize },
    #[error("duplicate edge {src}->{dst}")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("node {node} out of range for a graph with {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("graph has {num_nodes} nodes, limit is {limit}")]
    TooManyNodes { num_nodes: usize, limit: usize },
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("invalid graph document: {0}")]
    Dsl(String),
}

impl GraphError {
    /// Stable machine-readable name, used in CLI output.
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::MalformedString(_) => "MalformedString",
            GraphError::UnknownOp(_) => "UnknownOp",
            GraphError::BadIndex { .. } => "BadIndex",
            GraphError::CycleOrBackwardEdge { .. } => "CycleOrBackwardEdge",
            GraphError::DuplicateEdge { .. } => "DuplicateEdge",
            GraphError::NodeOutOfRange { .. } => "NodeOutOfRange",
            GraphError::TooManyNodes { .. } => "TooManyNodes",
            GraphError::TooFewNodes(_) => "TooFewNodes",
            GraphError::Dsl(_) => "DslError",
        }
    }
}

/// Operation carried by an edge.
///
/// `Zero` edges are broken and take no part in paths or propagation. `Skip`
/// and `NonParam` (pooling) are identity-like and add nothing to a path's
/// depth; `Param` (a linear map followed by the activation) adds one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Zero,
    Skip,
    Param,
    NonParam,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Zero, OpKind::Skip, OpKind::Param, OpKind::NonParam];

    /// Contribution of this operation to a path's parameterized-op count.
    pub fn depth(self) -> u32 {
        match self {
            OpKind::Param => 1,
            _ => 0,
        }
    }

    pub fn is_zero(self) -> bool {
        self == OpKind::Zero
    }

    /// Name used by the graph document format.
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Skip => "skip",
            OpKind::Param => "param",
            OpKind::NonParam => "nonparam",
        }
    }
}

impl FromStr for OpKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| GraphError::UnknownOp(s.to_string()))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub op: OpKind,
}

impl Edge {
    pub fn new(src: usize, dst: usize, op: OpKind) -> Self {
        Edge { src, dst, op }
    }
}

/// A validated cell DAG.
///
/// Edges are stored sorted by `(src, dst)`; every edge satisfies
/// `src < dst < num_nodes` and no `(src, dst)` pair appears twice.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
}

impl ArchGraph {
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Result<Self, GraphError> {
        Self::with_max_nodes(num_nodes, edges, DEFAULT_MAX_NODES)
    }

    pub fn with_max_nodes(
        num_nodes: usize,
        edges: impl IntoIterator<Item = Edge>,
        max_nodes: usize,
    ) -> Result<Self, GraphError> {
        if num_nodes < 2 {
            return Err(GraphError::TooFewNodes(num_nodes));
        }
        if num_nodes > max_nodes {
            return Err(GraphError::TooManyNodes {
                num_nodes,
                limit: max_nodes,
            });
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in edges {
            for node in [e.src, e.dst] {
                if node >= num_nodes {
                    return Err(GraphError::NodeOutOfRange { node, num_nodes });
                }
            }
            if e.src >= e.dst {
                return Err(GraphError::CycleOrBackwardEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(GraphError::DuplicateEdge {
                    src: e.src,
                    dst: e.dst,
                });
            }
            out.push(e);
        }
        out.sort_by_key(|e| (e.src, e.dst));
        Ok(ArchGraph {
            num_nodes,
            edges: out,
        })
    }

    /// Number of nodes, `H + 1`.
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Index of the output node `H`.
    pub fn output(&self) -> usize {
        self.num_nodes - 1
    }

    /// All edges including `Zero` ones, sorted by `(src, dst)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Non-`Zero` edges.
    pub fn live_edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(|e| !e.op.is_zero())
    }

    /// Non-`Zero` edges ending at `node`, in increasing source order.
    pub fn incoming(&self, node: usize) -> impl Iterator<Item = &Edge> + '_ {
        self.live_edges().filter(move |e| e.dst == node)
    }

    pub fn op(&self, src: usize, dst: usize) -> OpKind {
        self.edges
            .iter()
            .find(|e| e.src == src && e.dst == dst)
            .map_or(OpKind::Zero, |e| e.op)
    }

    pub fn count_ops(&self, op: OpKind) -> usize {
        self.edges.iter().filter(|e| e.op == op).count()
    }

    /// Copy of this graph with the operation on `(src, dst)` replaced,
    /// inserting the edge if it was absent.
    pub fn with_op(&self, src: usize, dst: usize, op: OpKind) -> Result<Self, GraphError> {
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .copied()
            .filter(|e| !(e.src == src && e.dst == dst))
            .collect();
        edges.push(Edge::new(src, dst, op));
        Self::with_max_nodes(self.num_nodes, edges, usize::MAX)
    }

    /// Serialize as a graph document accepted by [`parse_dag_dsl`].
    pub fn to_dsl(&self) -> String {
        let doc = DslDoc {
            num_nodes: self.num_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| DslEdge {
                    src: e.src,
                    dst: e.dst,
                    op: e.op.name().to_string(),
                })
                .collect(),
        };
        toml::to_string(&doc).expect("graph document always serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DslDoc {
    num_nodes: usize,
    #[serde(default)]
    edges: Vec<DslEdge>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DslEdge {
    src: usize,
    dst: usize,
    op: String,
}

/// Parse a TOML graph document:
///
/// ```toml
/// num_nodes = 4
/// edges = [
///     { src = 0, dst = 1, op = "param" },
///     { src = 1, dst = 3, op = "skip" },
/// ]
/// ```
///
/// `op` is one of `zero`, `skip`, `param`, `nonparam`. Nodes are never
/// created implicitly; every index must be below `num_nodes`.
pub fn parse_dag_dsl(doc: &str) -> Result<ArchGraph, GraphError> {
    let doc: DslDoc = toml::from_str(doc).map_err(|e| GraphError::Dsl(e.message().to_string()))?;
    let edges = doc
        .edges
        .into_iter()
        .map(|e| Ok(Edge::new(e.src, e.dst, e.op.parse()?)))
        .collect::<Result<Vec<_>, GraphError>>()?;
    ArchGraph::new(doc.num_nodes, edges)
}

/// Operation vocabulary of NAS-Bench-201.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nb201Op {
    None,
    SkipConnect,
    NorConv1x1,
    NorConv3x3,
    AvgPool3x3,
}

impl Nb201Op {
    pub const ALL: [Nb201Op; 5] = [
        Nb201Op::None,
        Nb201Op::SkipConnect,
        Nb201Op::NorConv1x1,
        Nb201Op::NorConv3x3,
        Nb201Op::AvgPool3x3,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Nb201Op::None => "none",
            Nb201Op::SkipConnect => "skip_connect",
            Nb201Op::NorConv1x1 => "nor_conv_1x1",
            Nb201Op::NorConv3x3 => "nor_conv_3x3",
            Nb201Op::AvgPool3x3 => "avg_pool_3x3",
        }
    }

    /// Both convolutions are `Param`; their configuration is ignored.
    pub fn kind(self) -> OpKind {
        match self {
            Nb201Op::None => OpKind::Zero,
            Nb201Op::SkipConnect => OpKind::Skip,
            Nb201Op::NorConv1x1 | Nb201Op::NorConv3x3 => OpKind::Param,
            Nb201Op::AvgPool3x3 => OpKind::NonParam,
        }
    }
}

impl FromStr for Nb201Op {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Nb201Op::ALL
            .into_iter()
            .find(|op| op.token() == s)
            .ok_or_else(|| GraphError::UnknownOp(s.to_string()))
    }
}

/// A NAS-Bench-201 cell: 4 nodes, 6 edges.
///
/// `ops` follows the string order: `(0,1)`, `(0,2)`, `(1,2)`, `(0,3)`,
/// `(1,3)`, `(2,3)`. Unlike [`ArchGraph`] this keeps the exact op token, so
/// `to_string` reproduces the parsed string byte for byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nb201Cell {
    pub ops: [Nb201Op; 6],
}

impl Nb201Cell {
    pub const NUM_NODES: usize = 4;
    /// `(src, dst)` of each slot in `ops`.
    pub const EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
    pub const SPACE_SIZE: usize = 15_625;

    pub fn to_graph(&self) -> ArchGraph {
        let edges = Self::EDGES
            .iter()
            .zip(self.ops)
            .map(|(&(src, dst), op)| Edge::new(src, dst, op.kind()));
        ArchGraph::new(Self::NUM_NODES, edges).expect("NAS-Bench-201 cell is a valid DAG")
    }

    /// The `index`-th cell of the space, reading `index` as six base-5 digits
    /// with the first edge most significant.
    pub fn from_index(index: usize) -> Option<Self> {
        if index >= Self::SPACE_SIZE {
            return None;
        }
        let mut ops = [Nb201Op::None; 6];
        let mut rest = index;
        for slot in ops.iter_mut().rev() {
            *slot = Nb201Op::ALL[rest % 5];
            rest /= 5;
        }
        Some(Nb201Cell { ops })
    }

    pub fn all() -> impl Iterator<Item = Nb201Cell> {
        (0..Self::SPACE_SIZE).map(|i| Self::from_index(i).unwrap())
    }

    /// Number of convolution edges.
    pub fn num_convs(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| op.kind() == OpKind::Param)
            .count()
    }
}

impl FromStr for Nb201Cell {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let malformed = |why: &str| GraphError::MalformedString(format!("{why}: `{s}`"));
        let mut ops = Vec::with_capacity(6);
        let mut groups = 0;
        for (node_idx, group) in s.split('+').enumerate() {
            groups += 1;
            if node_idx >= 3 {
                return Err(malformed("expected 3 node groups"));
            }
            let inner = group
                .strip_prefix('|')
                .and_then(|g| g.strip_suffix('|'))
                .ok_or_else(|| malformed("node group must be wrapped in `|`"))?;
            let tokens: Vec<&str> = inner.split('|').collect();
            for (position, token) in tokens.iter().enumerate() {
                let (name, index) = token
                    .split_once('~')
                    .ok_or_else(|| malformed("edge token must look like `op~index`"))?;
                let op: Nb201Op = name.parse()?;
                if index.parse::<usize>().ok() != Some(position) {
                    return Err(GraphError::BadIndex {
                        token: token.to_string(),
                        position,
                    });
                }
                ops.push(op);
            }
            if tokens.len() != node_idx + 1 {
                return Err(malformed("node group has the wrong number of edges"));
            }
        }
        if groups != 3 {
            return Err(malformed("expected 3 node groups"));
        }
        Ok(Nb201Cell {
            ops: ops.try_into().expect("3 groups of 1, 2, 3 edges"),
        })
    }
}

impl fmt::Display for Nb201Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut slot = 0;
        for node in 1..Self::NUM_NODES {
            if node > 1 {
                f.write_str("+")?;
            }
            f.write_str("|")?;
            for src in 0..node {
                write!(f, "{}~{}|", self.ops[slot].token(), src)?;
                slot += 1;
            }
        }
        Ok(())
    }
}

pub fn parse_nb201(arch: &str) -> Result<ArchGraph, GraphError> {
    Ok(arch.parse::<Nb201Cell>()?.to_graph())
}

/// Every NAS-Bench-201 cell, as `(arch string, graph)`.
pub fn enumerate_space_nb201() -> impl Iterator<Item = (String, ArchGraph)> {
    Nb201Cell::all().map(|cell| (cell.to_string(), cell.to_graph()))
}

/// The multiset of per-path parameterized-op counts of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathProfile {
    pub source: usize,
    pub sink: usize,
    /// One entry per end-to-end path, in path enumeration order.
    pub depths: Vec<u32>,
}

impl PathProfile {
    pub fn num_paths(&self) -> usize {
        self.depths.len()
    }

    pub fn sum_depths(&self) -> u64 {
        self.depths.iter().map(|&d| d as u64).sum()
    }

    /// Number of paths carrying at least one parameterized op.
    pub fn num_param_paths(&self) -> usize {
        self.depths.iter().filter(|&&d| d > 0).count()
    }
}

/// All end-to-end paths (node sequences) over non-`Zero` edges, in
/// lexicographic order.
pub fn simple_paths(g: &ArchGraph) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); g.num_nodes()];
    for e in g.live_edges() {
        adj[e.src].push(e.dst);
    }
    // edges are sorted by (src, dst), so each list is already ascending

    fn dfs(
        node: usize,
        sink: usize,
        adj: &[Vec<usize>],
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        stack.push(node);
        if node == sink {
            out.push(stack.clone());
        } else {
            for &next in &adj[node] {
                dfs(next, sink, adj, stack, out);
            }
        }
        stack.pop();
    }

    let mut out = Vec::new();
    dfs(0, g.output(), &adj, &mut Vec::new(), &mut out);
    out
}

/// Path profile of `g`. A graph whose output is unreachable yields an empty
/// profile.
pub fn enumerate_paths(g: &ArchGraph) -> PathProfile {
    let depths = simple_paths(g)
        .iter()
        .map(|path| path.windows(2).map(|w| g.op(w[0], w[1]).depth()).sum())
        .collect();
    PathProfile {
        source: 0,
        sink: g.output(),
        depths,
    }
}

/// The three 4-node cells used throughout as reference topologies. Each has
/// three parameterized edges.
pub mod builtin {
    use super::{ArchGraph, Edge, OpKind};

    /// Sequential: `0 -> 1 -> 2 -> 3`, all parameterized.
    pub const DAG1_NB201: &str =
        "|nor_conv_3x3~0|+|none~0|nor_conv_3x3~1|+|none~0|none~1|nor_conv_3x3~2|";
    /// Parallel: three parameterized edges into node 3 fed through skips.
    pub const DAG2_NB201: &str =
        "|skip_connect~0|+|none~0|skip_connect~1|+|nor_conv_3x3~0|nor_conv_3x3~1|nor_conv_3x3~2|";
    /// Mixed sequential and parallel.
    pub const DAG3_NB201: &str =
        "|nor_conv_3x3~0|+|nor_conv_3x3~0|skip_connect~1|+|skip_connect~0|skip_connect~1|nor_conv_3x3~2|";

    fn build(edges: [(usize, usize, OpKind); 6]) -> ArchGraph {
        ArchGraph::new(4, edges.map(|(s, d, op)| Edge::new(s, d, op))).unwrap()
    }

    pub fn dag1() -> ArchGraph {
        use OpKind::*;
        build([
            (0, 1, Param),
            (0, 2, Zero),
            (1, 2, Param),
            (0, 3, Zero),
            (1, 3, Zero),
            (2, 3, Param),
        ])
    }

    pub fn dag2() -> ArchGraph {
        use OpKind::*;
        build([
            (0, 1, Skip),
            (0, 2, Zero),
            (1, 2, Skip),
            (0, 3, Param),
            (1, 3, Param),
            (2, 3, Param),
        ])
    }

    pub fn dag3() -> ArchGraph {
        use OpKind::*;
        build([
            (0, 1, Param),
            (0, 2, Param),
            (1, 2, Skip),
            (0, 3, Skip),
            (1, 3, Skip),
            (2, 3, Param),
        ])
    }

    /// `(name, graph)` for the three reference cells.
    pub fn all() -> [(&'static str, ArchGraph); 3] {
        [("dag1", dag1()), ("dag2", dag2()), ("dag3", dag3())]
    }
}
