//! Mean-field message passing over the sampled sparse CRF.
//!
//! The refinement loop is: compute the unary field once, initialize the
//! beliefs with the zero-shot distribution, then repeatedly resample the
//! neighborhoods and apply one synchronous mean-field update until the
//! largest belief change drops below the tolerance or the iteration budget
//! runs out. The loop order is reconstructed from the method description;
//! the original algorithm listing was not available.

use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{argmax, AnnotationChange, AnnotationSet, Beliefs};
use crate::neighborhood::{NeighborhoodIndex, SampledNeighborhoods};
use crate::potentials::{compute_unary, BaseTerm, PairwiseWeights, UnaryField, DEFAULT_TEMPERATURE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub weights: PairwiseWeights,
    pub max_iterations: usize,
    /// Stop once the max-abs belief change of a step is below this.
    pub convergence_tol: f64,
    /// Fraction of the previous belief kept in each update.
    pub damping: f64,
    pub clamp_annotations: bool,
    /// Softmax temperature of the unary term.
    pub temperature: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            weights: PairwiseWeights::default(),
            max_iterations: 10,
            convergence_tol: 1e-4,
            damping: 0.0,
            clamp_annotations: true,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidConfig("damping must lie in [0, 1)".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Incoming annotation messages in CSR layout: for target vertex `w`, the
/// (annotated label, similarity) pairs of every annotated `a` with `w ∈ M_a`.
struct AnnotationInbox {
    offsets: Vec<usize>,
    messages: Vec<(usize, f64)>,
}

impl AnnotationInbox {
    fn build(n: usize, nbrs: &SampledNeighborhoods, annotations: &AnnotationSet) -> Self {
        let mut counts = vec![0usize; n + 1];
        for (a, edges) in nbrs.annotation_sources() {
            if annotations.contains(a) {
                for e in edges {
                    counts[e.vertex + 1] += 1;
                }
            }
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut messages = vec![(0, 0.0); counts[n]];
        for (a, edges) in nbrs.annotation_sources() {
            if let Some(label) = annotations.get(a) {
                for e in edges {
                    messages[fill[e.vertex]] = (label, e.similarity);
                    fill[e.vertex] += 1;
                }
            }
        }
        Self {
            offsets: counts,
            messages,
        }
    }

    fn incoming(&self, v: usize) -> &[(usize, f64)] {
        &self.messages[self.offsets[v]..self.offsets[v + 1]]
    }
}

fn check_dimensions(
    q: &Beliefs,
    unary: &UnaryField,
    nbrs: &SampledNeighborhoods,
) -> Result<()> {
    if q.num_vertices() != unary.num_vertices()
        || q.num_classes() != unary.num_classes()
        || nbrs.num_vertices() != unary.num_vertices()
    {
        return Err(Error::DimensionMismatch(format!(
            "beliefs {}x{}, unary {}x{}, neighborhoods over {} vertices",
            q.num_vertices(),
            q.num_classes(),
            unary.num_vertices(),
            unary.num_classes(),
            nbrs.num_vertices()
        )));
    }
    Ok(())
}

/// One synchronous mean-field update of every vertex.
///
/// For a free vertex `v` and label `l` the message is
///
/// ```text
/// m_v(l) = φ_v(l)
///        + α Σ_{w ∈ N_v} E_{Q_w}[base term]
///        + β Σ_{a ∈ A : v ∈ M_a} sim(a, v) · [l ≠ label(a)]
/// ```
///
/// and the new belief is `softmax(−m_v)`, blended with the old one by the
/// damping factor. The diversity term's expectation is `Q_w(l)(1 − sim)`;
/// the smoothing variant uses `(1 − Q_w(l)) sim`. All reads come from the
/// pre-step beliefs. Annotated vertices become one-hot when clamping is on.
pub fn mean_field_step(
    q: &Beliefs,
    unary: &UnaryField,
    nbrs: &SampledNeighborhoods,
    annotations: &AnnotationSet,
    config: &EngineConfig,
) -> Result<Beliefs> {
    check_dimensions(q, unary, nbrs)?;
    let n = unary.num_vertices();
    let l = unary.num_classes();
    let PairwiseWeights { alpha, beta } = config.weights;
    let inbox = AnnotationInbox::build(n, nbrs, annotations);
    let term = nbrs.term();
    let prev = q.view();

    let mut out = Array2::<f64>::zeros((n, l));
    out.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(l)
        .enumerate()
        .for_each(|(v, row)| {
            if config.clamp_annotations {
                if let Some(label) = annotations.get(v) {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    row[label] = 1.0;
                    return;
                }
            }
            let mut base = vec![0.0; l];
            for e in nbrs.base_edges(v) {
                let qw = prev.row(e.vertex);
                match term {
                    BaseTerm::Diversity => {
                        let cost = 1.0 - e.similarity;
                        for (b, &p) in base.iter_mut().zip(qw.iter()) {
                            *b += p * cost;
                        }
                    }
                    BaseTerm::Smoothing => {
                        for (b, &p) in base.iter_mut().zip(qw.iter()) {
                            *b += (1.0 - p) * e.similarity;
                        }
                    }
                }
            }
            let mut ann = vec![0.0; l];
            for &(label, sim) in inbox.incoming(v) {
                for (c, a) in ann.iter_mut().enumerate() {
                    if c != label {
                        *a += sim;
                    }
                }
            }
            let phi = unary.row(v);
            for c in 0..l {
                row[c] = -(phi[c] + alpha * base[c] + beta * ann[c]);
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            let keep = config.damping;
            for (c, x) in row.iter_mut().enumerate() {
                *x = (1.0 - keep) * (*x / z) + keep * prev[[v, c]];
            }
        });

    let next = Beliefs::from_array(out, q.iteration() + 1);
    debug_assert!(
        beliefs_well_formed(&next, annotations, config.clamp_annotations),
        "mean-field step produced non-normalized or unclamped beliefs"
    );
    Ok(next)
}

/// Rows sum to one within 1e-9 and, under clamping, annotated rows are
/// exactly one-hot.
pub fn beliefs_well_formed(q: &Beliefs, annotations: &AnnotationSet, clamp: bool) -> bool {
    if q.check_stochastic(1e-9).is_err() {
        return false;
    }
    if clamp {
        for (v, label) in annotations.iter() {
            let row = q.row(v);
            if row.iter().enumerate().any(|(c, &x)| x != if c == label { 1.0 } else { 0.0 }) {
                return false;
            }
        }
    }
    true
}

/// Zero-shot beliefs: Q⁰_v = softmax(−φ_v).
pub fn initial_beliefs(unary: &UnaryField) -> Beliefs {
    Beliefs::from_array(unary.probabilities(), 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub vertex: usize,
    pub label: usize,
    pub previous: Option<usize>,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    /// Engine iteration at which the annotation was applied.
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub max_delta: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub beliefs: Beliefs,
    pub predictions: Vec<usize>,
    pub iterations_run: usize,
    pub per_iteration_seconds: Vec<f64>,
    pub max_deltas: Vec<f64>,
    pub converged: bool,
}

/// Mutable refinement state for one slide: beliefs plus annotations.
#[derive(Debug, Clone)]
pub struct Refiner {
    unary: Arc<UnaryField>,
    index: Arc<NeighborhoodIndex>,
    annotations: AnnotationSet,
    beliefs: Beliefs,
    config: EngineConfig,
}

impl Refiner {
    pub fn new(
        unary: Arc<UnaryField>,
        index: Arc<NeighborhoodIndex>,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if unary.num_vertices() != index.num_vertices() {
            return Err(Error::DimensionMismatch(format!(
                "unary over {} vertices, index over {}",
                unary.num_vertices(),
                index.num_vertices()
            )));
        }
        let beliefs = initial_beliefs(&unary);
        Ok(Self {
            unary,
            index,
            annotations: AnnotationSet::new(),
            beliefs,
            config,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn unary(&self) -> &UnaryField {
        &self.unary
    }

    pub fn index(&self) -> &NeighborhoodIndex {
        &self.index
    }

    pub fn beliefs(&self) -> &Beliefs {
        &self.beliefs
    }

    pub fn annotations(&self) -> &AnnotationSet {
        &self.annotations
    }

    pub fn iteration(&self) -> usize {
        self.beliefs.iteration()
    }

    pub fn num_vertices(&self) -> usize {
        self.unary.num_vertices()
    }

    pub fn num_classes(&self) -> usize {
        self.unary.num_classes()
    }

    /// Argmax predictions, ties to the lowest class.
    pub fn predictions(&self) -> Vec<usize> {
        self.beliefs
            .view()
            .outer_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    fn clamp_row(&mut self, vertex: usize, label: usize) {
        let mut data = self.beliefs.data_mut().row_mut(vertex);
        data.fill(0.0);
        data[label] = 1.0;
    }

    /// Inserts or overwrites an annotation and, under clamping, fixes the
    /// vertex's belief to the annotated class right away.
    pub fn apply_annotation(&mut self, vertex: usize, label: usize) -> Result<AuditRecord> {
        let AnnotationChange { previous, .. } =
            self.annotations
                .insert(vertex, label, self.num_vertices(), self.num_classes())?;
        if self.config.clamp_annotations {
            self.clamp_row(vertex, label);
        }
        let timestamp_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Ok(AuditRecord {
            vertex,
            label,
            previous,
            timestamp_ms,
            iteration: self.iteration(),
        })
    }

    pub fn apply_annotations(&mut self, set: &AnnotationSet) -> Result<Vec<AuditRecord>> {
        set.iter().map(|(v, l)| self.apply_annotation(v, l)).collect()
    }

    /// Resample the neighborhoods for the next iteration and update once.
    pub fn step(&mut self) -> Result<StepReport> {
        let start = Instant::now();
        let iteration = self.iteration();
        let nbrs = self.index.resample(&self.annotations, iteration as u64);
        let next = mean_field_step(&self.beliefs, &self.unary, &nbrs, &self.annotations, &self.config)?;
        let max_delta = next.max_abs_diff(&self.beliefs);
        self.beliefs = next;
        Ok(StepReport {
            iteration: iteration + 1,
            max_delta,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Steps until convergence or `max_iterations` further steps.
    pub fn run(&mut self) -> Result<RefinementResult> {
        let mut per_iteration_seconds = Vec::new();
        let mut max_deltas = Vec::new();
        let mut converged = false;
        for _ in 0..self.config.max_iterations {
            let report = self.step()?;
            per_iteration_seconds.push(report.seconds);
            max_deltas.push(report.max_delta);
            if report.max_delta < self.config.convergence_tol {
                converged = true;
                break;
            }
        }
        Ok(RefinementResult {
            beliefs: self.beliefs.clone(),
            predictions: self.predictions(),
            iterations_run: per_iteration_seconds.len(),
            per_iteration_seconds,
            max_deltas,
            converged,
        })
    }
}

/// Full refinement of a dataset from scratch.
pub fn refine(
    dataset: &Dataset,
    index: Arc<NeighborhoodIndex>,
    annotations: &AnnotationSet,
    config: &EngineConfig,
) -> Result<RefinementResult> {
    let unary = compute_unary(&dataset.unary, &dataset.text, config.temperature)?;
    let mut refiner = Refiner::new(Arc::new(unary), index, *config)?;
    refiner.apply_annotations(annotations)?;
    refiner.run()
}
