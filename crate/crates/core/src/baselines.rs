//! Label propagation baseline (Zhou et al., "Learning with local and global
//! consistency") on a symmetric k-NN cosine graph.

use nalgebra::DMatrix;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, AnnotationSet, EmbeddingMatrix};
use crate::neighborhood::{map_similarity_rows, select_ranked, Rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpSolver {
    #[default]
    ClosedForm,
    Iterative,
}

impl std::str::FromStr for LpSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" | "closed-form" => Ok(LpSolver::ClosedForm),
            "iterative" => Ok(LpSolver::Iterative),
            other => Err(Error::InvalidConfig(format!("unknown LP solver {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpConfig {
    pub alpha_lp: f64,
    pub k_graph: usize,
    pub solver: LpSolver,
    pub iter_tol: f64,
    pub iter_max: usize,
    /// Largest N the dense closed form will attempt.
    pub closed_form_max_n: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            alpha_lp: 0.5,
            k_graph: 16,
            solver: LpSolver::ClosedForm,
            iter_tol: 1e-8,
            iter_max: 1000,
            closed_form_max_n: 5000,
        }
    }
}

impl LpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_lp > 0.0 && self.alpha_lp < 1.0) {
            return Err(Error::InvalidConfig("alpha_lp must lie in (0, 1)".into()));
        }
        if self.k_graph == 0 {
            return Err(Error::InvalidConfig("k_graph must be >= 1".into()));
        }
        if !(self.iter_tol > 0.0) || self.iter_max == 0 {
            return Err(Error::InvalidConfig("iter_tol must be > 0 and iter_max >= 1".into()));
        }
        Ok(())
    }
}

/// Symmetric normalized affinity S = D^{-1/2} W D^{-1/2} in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

impl NormalizedGraph {
    /// k-NN graph with weights max(0, cos), symmetrized by elementwise max,
    /// zero diagonal, then degree-normalized. Isolated vertices keep zero rows.
    pub fn knn(embeddings: &EmbeddingMatrix, k: usize) -> Result<Self> {
        let n = embeddings.rows();
        let normalized = embeddings.normalized()?;
        let directed = map_similarity_rows(&normalized, |i, sims| {
            select_ranked(i, sims, k, Rank::Descending)
        });
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, nbrs) in directed.into_iter().enumerate() {
            for e in nbrs {
                let w = e.similarity.max(0.0);
                if w > 0.0 {
                    adj[i].push((e.vertex, w));
                    adj[e.vertex].push((i, w));
                }
            }
        }
        for row in adj.iter_mut() {
            row.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
            row.dedup_by_key(|e| e.0);
        }
        let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|e| e.1).sum()).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        offsets.push(0);
        for (i, row) in adj.iter().enumerate() {
            for &(j, w) in row {
                targets.push(j);
                weights.push(w / (degree[i] * degree[j]).sqrt());
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            offsets,
            targets,
            weights,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.targets[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.num_vertices();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, w) in self.row(i) {
                m[(i, j)] = w;
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpResult {
    /// N×L propagated scores F.
    pub scores: Array2<f64>,
    pub predictions: Vec<usize>,
    /// Sweeps used by the iterative solver.
    pub iterations: Option<usize>,
}

fn seed_matrix(annotations: &AnnotationSet, n: usize, l: usize) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((n, l));
    for (v, label) in annotations.iter() {
        if v >= n {
            return Err(Error::VertexOutOfRange { vertex: v, n });
        }
        if label >= l {
            return Err(Error::LabelOutOfRange { label, classes: l });
        }
        y[[v, label]] = 1.0;
    }
    Ok(y)
}

/// F = (1 − α)(I − αS)⁻¹ Y by dense LU.
pub fn solve_closed_form(
    graph: &NormalizedGraph,
    y: &Array2<f64>,
    alpha: f64,
    max_n: usize,
) -> Result<Array2<f64>> {
    let n = graph.num_vertices();
    if n > max_n {
        return Err(Error::TooLargeForClosedForm { n, limit: max_n });
    }
    let l = y.ncols();
    let mut a = -alpha * graph.to_dense();
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let b = DMatrix::from_fn(n, l, |i, j| (1.0 - alpha) * y[[i, j]]);
    let f = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidConfig("propagation system is singular".into()))?;
    Ok(Array2::from_shape_fn((n, l), |(i, j)| f[(i, j)]))
}

/// Fixed-point sweeps F ← αSF + (1 − α)Y from F⁰ = Y.
pub fn solve_iterative(
    graph: &NormalizedGraph,
    y: &Array2<f64>,
    alpha: f64,
    tol: f64,
    max_iter: usize,
) -> (Array2<f64>, usize) {
    let n = graph.num_vertices();
    let mut f = y.clone();
    let mut next = Array2::zeros(y.raw_dim());
    for sweep in 1..=max_iter {
        let mut delta = 0.0_f64;
        for i in 0..n {
            let mut row = next.row_mut(i);
            row.assign(&y.row(i));
            row *= 1.0 - alpha;
            for (j, w) in graph.row(i) {
                row.scaled_add(alpha * w, &f.row(j));
            }
            for (a, b) in row.iter().zip(f.row(i).iter()) {
                delta = delta.max((a - b).abs());
            }
        }
        std::mem::swap(&mut f, &mut next);
        if delta < tol {
            return (f, sweep);
        }
    }
    (f, max_iter)
}

pub fn label_propagation(
    pairwise: &EmbeddingMatrix,
    annotations: &AnnotationSet,
    num_classes: usize,
    config: &LpConfig,
) -> Result<LpResult> {
    config.validate()?;
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let n = pairwise.rows();
    let y = seed_matrix(annotations, n, num_classes)?;
    if config.solver == LpSolver::ClosedForm && n > config.closed_form_max_n {
        return Err(Error::TooLargeForClosedForm {
            n,
            limit: config.closed_form_max_n,
        });
    }
    let graph = NormalizedGraph::knn(pairwise, config.k_graph)?;
    let (scores, iterations) = match config.solver {
        LpSolver::ClosedForm => (
            solve_closed_form(&graph, &y, config.alpha_lp, config.closed_form_max_n)?,
            None,
        ),
        LpSolver::Iterative => {
            let (f, it) = solve_iterative(&graph, &y, config.alpha_lp, config.iter_tol, config.iter_max);
            (f, Some(it))
        }
    };
    let predictions = scores
        .outer_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();
    Ok(LpResult {
        scores,
        predictions,
        iterations,
    })
}
