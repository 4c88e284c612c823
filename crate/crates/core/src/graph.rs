//! Dynamic networks by node-wise time-varying regressions (neighborhood selection).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::error_cov::ErrorCovModel;
use crate::inference::{infer_path, PipelineConfig};
use crate::local_design::Dataset;

/// `n x d` multivariate series, one column per node.
#[derive(Debug, Clone)]
pub struct MultiSeries {
    y: DMatrix<f64>,
    labels: Vec<String>,
}

impl MultiSeries {
    pub fn new(y: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != y.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} nodes",
                labels.len(),
                y.ncols()
            )));
        }
        if y.ncols() < 2 {
            return Err(Error::InvalidData(format!("need at least 2 nodes, got {}", y.ncols())));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value at row {}, node {}",
                pos % y.nrows(),
                pos / y.nrows()
            )));
        }
        Ok(Self { y, labels })
    }

    /// Nodes labelled `node1`, `node2`, ...
    pub fn unlabelled(y: DMatrix<f64>) -> Result<Self> {
        let labels = (1..=y.ncols()).map(|k| format!("node{k}")).collect();
        Self::new(y, labels)
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Regression of node `k` on all other nodes.
    fn node_dataset(&self, k: usize) -> Result<Dataset> {
        let x = self.y.clone().remove_column(k);
        Dataset::new(x, self.y.column(k).into_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetrization {
    /// Edge when either directed test rejects; p-value is the smaller one.
    #[default]
    Or,
    /// Edge when both directed tests reject; p-value is the larger one.
    And,
}

impl std::str::FromStr for Symmetrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "or" => Ok(Symmetrization::Or),
            "and" => Ok(Symmetrization::And),
            _ => Err(Error::invalid("rule", format!("expected `or` or `and`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphConfig {
    pub pipeline: PipelineConfig,
    pub rule: Symmetrization,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig {
                error_model: ErrorCovModel::IidEstimated,
                ..PipelineConfig::default()
            },
            rule: Symmetrization::Or,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct DynamicGraph {
    pub grid: Vec<f64>,
    pub labels: Vec<String>,
    pub rule: Symmetrization,
    /// Symmetric, hollow adjacency per grid point.
    pub adjacency: Vec<DMatrix<bool>>,
    /// Symmetrized edge p-values per grid point (1 on the diagonal).
    pub p_values: Vec<DMatrix<f64>>,
    /// `directed[i][(k, j)]`: adjusted p-value of node `j` in the regression of node `k`.
    pub directed: Vec<DMatrix<f64>>,
}

impl DynamicGraph {
    pub fn d(&self) -> usize {
        self.labels.len()
    }

    /// Edges (`a < b`) present at grid index `i`.
    pub fn edges(&self, i: usize) -> Vec<Edge> {
        let d = self.d();
        let mut out = Vec::new();
        for a in 0..d {
            for b in a + 1..d {
                if self.adjacency[i][(a, b)] {
                    out.push(Edge {
                        a,
                        b,
                        p_value: self.p_values[i][(a, b)],
                    });
                }
            }
        }
        out
    }

    pub fn edge_set(&self, i: usize) -> BTreeSet<(usize, usize)> {
        self.edges(i).into_iter().map(|e| (e.a, e.b)).collect()
    }

    fn index_of(&self, t: f64) -> Result<usize> {
        self.grid
            .iter()
            .position(|g| (g - t).abs() <= 1e-12)
            .ok_or_else(|| Error::invalid("t", format!("{t} is not a grid point of the graph")))
    }

    /// Rebuilds adjacency and edge p-values from the directed p-values.
    fn symmetrize(directed: &DMatrix<f64>, rule: Symmetrization, alpha: f64) -> (DMatrix<bool>, DMatrix<f64>) {
        let d = directed.nrows();
        let mut pv = DMatrix::from_element(d, d, 1.0);
        let mut adj = DMatrix::from_element(d, d, false);
        for a in 0..d {
            for b in 0..d {
                if a == b {
                    continue;
                }
                let (u, v) = (directed[(a, b)], directed[(b, a)]);
                let (p, edge) = match rule {
                    Symmetrization::Or => (u.min(v), u <= alpha || v <= alpha),
                    Symmetrization::And => (u.max(v), u <= alpha && v <= alpha),
                };
                pv[(a, b)] = p;
                adj[(a, b)] = edge;
            }
        }
        (adj, pv)
    }

    /// The same fit under another symmetrization rule.
    pub fn with_rule(&self, rule: Symmetrization, alpha: f64) -> DynamicGraph {
        let (adjacency, p_values) = self
            .directed
            .iter()
            .map(|m| Self::symmetrize(m, rule, alpha))
            .unzip();
        DynamicGraph {
            rule,
            adjacency,
            p_values,
            ..self.clone()
        }
    }
}

/// Edge changes between two grid points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphDiff {
    pub added: Vec<(usize, usize)>,
    pub removed: Vec<(usize, usize)>,
}

pub fn graph_diff(g: &DynamicGraph, t1: f64, t2: f64) -> Result<GraphDiff> {
    let before = g.edge_set(g.index_of(t1)?);
    let after = g.edge_set(g.index_of(t2)?);
    Ok(GraphDiff {
        added: after.difference(&before).copied().collect(),
        removed: before.difference(&after).copied().collect(),
    })
}

/// Regresses every node on all others at each grid point and joins the
/// directed rejections into an undirected graph.
pub fn neighborhood_selection(
    series: &MultiSeries,
    grid: &[f64],
    cfg: &GraphConfig,
) -> Result<DynamicGraph> {
    let d = series.d();
    if d < 3 {
        return Err(Error::InvalidData(format!(
            "neighborhood selection needs at least 3 nodes, got {d}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::invalid("grid", "no time points"));
    }
    let mut pipeline = cfg.pipeline.clone();
    pipeline.fail_fast = false;
    pipeline.validate(series.n())?;

    // adjusted p-values of every node regression, indexed [node][grid]
    let per_node: Vec<Vec<DVector<f64>>> = (0..d)
        .into_par_iter()
        .map(|k| {
            let label = &series.labels[k];
            let wrap = |t: f64, e: Error| Error::Node {
                node: label.clone(),
                t,
                source: Box::new(e),
            };
            let data = series.node_dataset(k).map_err(|e| wrap(grid[0], e))?;
            let fits = infer_path(&data, grid, &pipeline).map_err(|e| wrap(grid[0], e))?;
            fits.into_iter()
                .zip(grid)
                .map(|(f, &t)| f.map(|f| f.adj_p).map_err(|e| wrap(t, e)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let alpha = pipeline.inference.alpha;
    let mut directed = Vec::with_capacity(grid.len());
    let mut adjacency = Vec::with_capacity(grid.len());
    let mut p_values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let mut m = DMatrix::from_element(d, d, 1.0);
        for (k, node) in per_node.iter().enumerate() {
            // predictors of node k skip column k
            for (pos, &pv) in node[i].iter().enumerate() {
                let j = if pos < k { pos } else { pos + 1 };
                m[(k, j)] = pv;
            }
        }
        let (adj, pv) = DynamicGraph::symmetrize(&m, cfg.rule, alpha);
        directed.push(m);
        adjacency.push(adj);
        p_values.push(pv);
    }
    Ok(DynamicGraph {
        grid: grid.to_vec(),
        labels: series.labels.clone(),
        rule: cfg.rule,
        adjacency,
        p_values,
        directed,
    })
}
