//! Shared domain types and similarity primitives.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major N×d matrix of patch (or class) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "embedding matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        for (row, r) in data.outer_iter().enumerate() {
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "embedding matrix",
                    row,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn from_rows(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let data = Array2::from_shape_vec((rows, dim), values)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    /// Unit-normalized copy of the rows. Fails on the first zero-norm row.
    pub fn normalized(&self) -> Result<Array2<f64>> {
        let mut out = self.data.clone();
        for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
            let norm = r.dot(&r).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateEmbedding { row });
            }
            r /= norm;
        }
        Ok(out)
    }
}

/// Prompt-averaged class text embeddings, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextEmbeddings {
    embeddings: EmbeddingMatrix,
    class_names: Vec<String>,
}

impl ClassTextEmbeddings {
    pub fn new(embeddings: EmbeddingMatrix, class_names: Vec<String>) -> Result<Self> {
        if embeddings.rows() < 2 {
            return Err(Error::DimensionMismatch(format!(
                "need at least 2 classes, got {}",
                embeddings.rows()
            )));
        }
        if class_names.len() != embeddings.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {} text embeddings",
                class_names.len(),
                embeddings.rows()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::DimensionMismatch(format!(
                    "duplicate class name {name:?}"
                )));
            }
        }
        Ok(Self {
            embeddings,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }
}

/// Mean-field marginals Q, one probability row per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Beliefs {
    data: Array2<f64>,
    iteration: usize,
}

impl Beliefs {
    pub(crate) fn from_array(data: Array2<f64>, iteration: usize) -> Self {
        Self { data, iteration }
    }

    /// Validating constructor: every row must be a distribution within 1e-9.
    pub fn new(data: Array2<f64>, iteration: usize) -> Result<Self> {
        let beliefs = Self { data, iteration };
        beliefs.check_stochastic(1e-9)?;
        Ok(beliefs)
    }

    pub fn num_vertices(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.data.ncols()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.data.row(v)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub(crate) fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.data.outer_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        for (v, r) in self.data.outer_iter().enumerate() {
            let sum: f64 = r.sum();
            if (sum - 1.0).abs() > tol || r.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
                return Err(Error::InvalidConfig(format!(
                    "belief row {v} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Beliefs) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Outcome of inserting an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationChange {
    pub vertex: usize,
    pub label: usize,
    pub previous: Option<usize>,
}

/// Expert annotations: vertex → class index, at most one per vertex.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    entries: BTreeMap<usize, usize>,
}

impl AnnotationSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or overwrites) an annotation after range-checking it.
    pub fn insert(
        &mut self,
        vertex: usize,
        label: usize,
        num_vertices: usize,
        num_classes: usize,
    ) -> Result<AnnotationChange> {
        if vertex >= num_vertices {
            return Err(Error::VertexOutOfRange {
                vertex,
                n: num_vertices,
            });
        }
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        let previous = self.entries.insert(vertex, label);
        Ok(AnnotationChange {
            vertex,
            label,
            previous,
        })
    }

    pub fn get(&self, vertex: usize) -> Option<usize> {
        self.entries.get(&vertex).copied()
    }

    pub fn contains(&self, vertex: usize) -> bool {
        self.entries.contains_key(&vertex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Annotations in ascending vertex order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|(&v, &l)| (v, l))
    }

    pub fn extend_from(&mut self, other: &AnnotationSet) {
        self.entries.extend(other.entries.iter());
    }
}

impl FromIterator<(usize, usize)> for AnnotationSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

/// Cosine similarity of two vectors of equal length.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of {}- and {}-vectors",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 {
        return Err(Error::DegenerateEmbedding { row: 0 });
    }
    if nb == 0.0 {
        return Err(Error::DegenerateEmbedding { row: 1 });
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Softmax of `logits / temperature`, computed with max-subtraction.
pub fn row_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}
