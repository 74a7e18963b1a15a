//! Annotation sampling, the simulated human-in-the-loop oracle, metrics and
//! experiment runners.

use std::io::Write;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{label_propagation, LpConfig};
use crate::error::{Error, Result};
use crate::inference::{EngineConfig, Refiner};
use crate::io::Dataset;
use crate::model::{accuracy, AnnotationSet};
use crate::neighborhood::{NeighborhoodIndex, NeighborhoodParams};
use crate::potentials::{compute_unary, BaseTerm, UnaryField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    #[default]
    None,
    Random,
    ErrorBased,
}

impl SamplingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingKind::None => "none",
            SamplingKind::Random => "random",
            SamplingKind::ErrorBased => "error_based",
        }
    }
}

impl std::str::FromStr for SamplingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SamplingKind::None),
            "random" => Ok(SamplingKind::Random),
            "error_based" | "error-based" => Ok(SamplingKind::ErrorBased),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: SamplingKind,
    pub budget: usize,
    pub per_round: usize,
    pub seed: u64,
}

impl SamplingStrategy {
    pub fn none(seed: u64) -> Self {
        Self {
            kind: SamplingKind::None,
            budget: 0,
            per_round: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != SamplingKind::None && self.per_round == 0 {
            return Err(Error::InvalidConfig("per_round must be >= 1".into()));
        }
        Ok(())
    }
}

/// `n` distinct vertices, uniformly without replacement, with true labels.
pub fn sample_random(labels: &[usize], n: usize, seed: u64) -> Result<AnnotationSet> {
    if n > labels.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, labels.len(), n)
        .into_iter()
        .map(|v| (v, labels[v]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorSample {
    pub annotations: AnnotationSet,
    /// How many of the requested annotations could not be placed.
    pub shortfall: usize,
}

/// `n` vertices drawn uniformly among the misclassified ones (those not in
/// `exclude`), annotated with their true labels.
pub fn sample_error_based_excluding(
    predictions: &[usize],
    labels: &[usize],
    n: usize,
    seed: u64,
    exclude: &AnnotationSet,
) -> Result<ErrorSample> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong: Vec<usize> = (0..labels.len())
        .filter(|&v| predictions[v] != labels[v] && !exclude.contains(v))
        .collect();
    let take = n.min(wrong.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let annotations = index::sample(&mut rng, wrong.len(), take)
        .into_iter()
        .map(|i| (wrong[i], labels[wrong[i]]))
        .collect();
    Ok(ErrorSample {
        annotations,
        shortfall: n - take,
    })
}

pub fn sample_error_based(
    predictions: &[usize],
    labels: &[usize],
    n: usize,
    seed: u64,
) -> Result<ErrorSample> {
    sample_error_based_excluding(predictions, labels, n, seed, &AnnotationSet::new())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroShot,
    Histocrf,
    Lp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Histocrf => "histocrf",
            Method::Lp => "lp",
        }
    }
}

/// Everything needed to rerun a refinement experiment bit-identically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub neighborhood: NeighborhoodParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            neighborhood: NeighborhoodParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub annotations_total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub method: Method,
    /// "none", "random", "error_based" or "hitl".
    pub strategy: String,
    pub budget: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub accuracy_excl_annotated: f64,
    pub iterations: usize,
    pub per_iteration_seconds: Vec<f64>,
    pub annotations_placed: usize,
    pub shortfall: usize,
    pub rounds: Vec<RoundRecord>,
    pub config: RunConfig,
    pub lp: Option<LpConfig>,
    pub predictions: Vec<usize>,
}

impl ExperimentReport {
    pub fn mean_iter_seconds(&self) -> f64 {
        if self.per_iteration_seconds.is_empty() {
            0.0
        } else {
            self.per_iteration_seconds.iter().sum::<f64>() / self.per_iteration_seconds.len() as f64
        }
    }

    pub fn csv_row(&self) -> CsvRow {
        let (alpha, beta) = match self.lp {
            Some(lp) => (lp.alpha_lp, 0.0),
            None => (self.config.engine.weights.alpha, self.config.engine.weights.beta),
        };
        let nb = &self.config.neighborhood;
        CsvRow {
            dataset: self.dataset.clone(),
            method: self.method.as_str().to_string(),
            strategy: self.strategy.clone(),
            budget: self.budget,
            seed: self.seed,
            accuracy: self.accuracy,
            accuracy_excl_annotated: self.accuracy_excl_annotated,
            iterations: self.iterations,
            mean_iter_seconds: self.mean_iter_seconds(),
            alpha,
            beta,
            k_base: self.lp.map_or(nb.k_base, |lp| lp.k_graph),
            k_ann: nb.k_ann,
            pool_factor: nb.pool_factor,
            temperature: self.config.engine.temperature,
        }
    }
}

/// One line of the report CSV; field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub dataset: String,
    pub method: String,
    pub strategy: String,
    pub budget: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub accuracy_excl_annotated: f64,
    pub iterations: usize,
    pub mean_iter_seconds: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_base: usize,
    pub k_ann: usize,
    pub pool_factor: usize,
    pub temperature: f64,
}

pub const CSV_COLUMNS: [&str; 15] = [
    "dataset",
    "method",
    "strategy",
    "budget",
    "seed",
    "accuracy",
    "accuracy_excl_annotated",
    "iterations",
    "mean_iter_seconds",
    "alpha",
    "beta",
    "k_base",
    "k_ann",
    "pool_factor",
    "temperature",
];

pub fn write_reports_csv<W: Write>(out: W, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if reports.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in reports {
        w.serialize(r.csv_row())?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// (accuracy over all vertices, accuracy over non-annotated vertices).
/// With no free vertices the second value falls back to the first.
pub fn accuracies(predictions: &[usize], labels: &[usize], annotations: &AnnotationSet) -> (f64, f64) {
    let all = accuracy(predictions, labels);
    let (mut correct, mut total) = (0usize, 0usize);
    for (v, (p, l)) in predictions.iter().zip(labels).enumerate() {
        if !annotations.contains(v) {
            total += 1;
            correct += usize::from(p == l);
        }
    }
    let free = if total == 0 { all } else { correct as f64 / total as f64 };
    (all, free)
}

/// Shared inputs for running several experiments on one dataset.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub dataset: Arc<Dataset>,
    pub unary: Arc<UnaryField>,
    pub index: Arc<NeighborhoodIndex>,
    pub config: RunConfig,
}

impl Workbench {
    pub fn new(dataset: Arc<Dataset>, config: RunConfig) -> Result<Self> {
        config.engine.validate()?;
        let unary = Arc::new(compute_unary(&dataset.unary, &dataset.text, config.engine.temperature)?);
        let index = Arc::new(NeighborhoodIndex::build(&dataset.pairwise, config.neighborhood)?);
        Ok(Self {
            dataset,
            unary,
            index,
            config,
        })
    }

    /// Same dataset and unary field, different engine configuration. The
    /// index is rebuilt only when the neighborhood parameters change.
    pub fn with_config(&self, config: RunConfig) -> Result<Self> {
        config.engine.validate()?;
        let unary = if config.engine.temperature == self.config.engine.temperature {
            self.unary.clone()
        } else {
            Arc::new(compute_unary(&self.dataset.unary, &self.dataset.text, config.engine.temperature)?)
        };
        let index = if config.neighborhood == self.config.neighborhood {
            self.index.clone()
        } else {
            Arc::new(NeighborhoodIndex::build(&self.dataset.pairwise, config.neighborhood)?)
        };
        Ok(Self {
            dataset: self.dataset.clone(),
            unary,
            index,
            config,
        })
    }

    fn labels(&self) -> Result<&[usize]> {
        self.dataset.labels()
    }

    fn refiner(&self) -> Result<Refiner> {
        Refiner::new(self.unary.clone(), self.index.clone(), self.config.engine)
    }

    fn report(
        &self,
        method: Method,
        strategy: &str,
        budget: usize,
        seed: u64,
        predictions: Vec<usize>,
        annotations: &AnnotationSet,
    ) -> Result<ExperimentReport> {
        let (accuracy, accuracy_excl_annotated) = accuracies(&predictions, self.labels()?, annotations);
        Ok(ExperimentReport {
            dataset: self.dataset.name.clone(),
            method,
            strategy: strategy.to_string(),
            budget,
            seed,
            accuracy,
            accuracy_excl_annotated,
            iterations: 0,
            per_iteration_seconds: Vec::new(),
            annotations_placed: annotations.len(),
            shortfall: 0,
            rounds: Vec::new(),
            config: self.config,
            lp: None,
            predictions,
        })
    }

    pub fn zero_shot(&self) -> Result<ExperimentReport> {
        let preds = self.unary.zero_shot_predictions();
        self.report(
            Method::ZeroShot,
            "none",
            0,
            self.config.neighborhood.seed,
            preds,
            &AnnotationSet::new(),
        )
    }

    /// Draws the strategy's annotations against the zero-shot predictions.
    pub fn draw_annotations(&self, strategy: &SamplingStrategy) -> Result<(AnnotationSet, usize)> {
        strategy.validate()?;
        let labels = self.labels()?;
        Ok(match strategy.kind {
            SamplingKind::None => (AnnotationSet::new(), 0),
            SamplingKind::Random => (sample_random(labels, strategy.budget, strategy.seed)?, 0),
            SamplingKind::ErrorBased => {
                let s = sample_error_based(
                    &self.unary.zero_shot_predictions(),
                    labels,
                    strategy.budget,
                    strategy.seed,
                )?;
                (s.annotations, s.shortfall)
            }
        })
    }

    /// One-shot annotation (if any) followed by refinement to the stop rule.
    pub fn histocrf(&self, strategy: &SamplingStrategy) -> Result<ExperimentReport> {
        let (annotations, shortfall) = self.draw_annotations(strategy)?;
        let mut refiner = self.refiner()?;
        refiner.apply_annotations(&annotations)?;
        let result = refiner.run()?;
        let mut report = self.report(
            Method::Histocrf,
            strategy.kind.as_str(),
            strategy.budget,
            strategy.seed,
            result.predictions,
            &annotations,
        )?;
        report.iterations = result.iterations_run;
        report.per_iteration_seconds = result.per_iteration_seconds;
        report.shortfall = shortfall;
        Ok(report)
    }

    pub fn label_propagation(
        &self,
        strategy: &SamplingStrategy,
        lp: &LpConfig,
    ) -> Result<ExperimentReport> {
        let (annotations, shortfall) = self.draw_annotations(strategy)?;
        let start = std::time::Instant::now();
        let result = label_propagation(
            &self.dataset.pairwise,
            &annotations,
            self.dataset.num_classes(),
            lp,
        )?;
        let seconds = start.elapsed().as_secs_f64();
        let mut report = self.report(
            Method::Lp,
            strategy.kind.as_str(),
            strategy.budget,
            strategy.seed,
            result.predictions,
            &annotations,
        )?;
        report.iterations = result.iterations.unwrap_or(1);
        report.per_iteration_seconds = vec![seconds];
        report.shortfall = shortfall;
        report.lp = Some(*lp);
        Ok(report)
    }

    /// Simulated expert: before the first step and after every step, annotate
    /// up to `per_round` currently misclassified vertices until `budget`
    /// annotations are placed (or none remain), then refine to the stop rule.
    pub fn hitl(&self, per_round: usize, budget: usize, seed: u64) -> Result<ExperimentReport> {
        if per_round == 0 {
            return Err(Error::InvalidConfig("per_round must be >= 1".into()));
        }
        let labels = self.labels()?.to_vec();
        let mut refiner = self.refiner()?;
        let mut rounds = Vec::new();
        let mut seconds = Vec::new();
        let mut shortfall = 0;
        let mut placed = 0;
        while placed < budget {
            let want = per_round.min(budget - placed);
            let round_seed = seed ^ (rounds.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let sample = sample_error_based_excluding(
                &refiner.predictions(),
                &labels,
                want,
                round_seed,
                refiner.annotations(),
            )?;
            if sample.annotations.is_empty() {
                shortfall = budget - placed;
                break;
            }
            placed += sample.annotations.len();
            refiner.apply_annotations(&sample.annotations)?;
            seconds.push(refiner.step()?.seconds);
            rounds.push(RoundRecord {
                round: rounds.len() + 1,
                annotations_total: placed,
                accuracy: accuracy(&refiner.predictions(), &labels),
            });
            if sample.shortfall > 0 {
                shortfall = budget - placed;
                break;
            }
        }
        let result = refiner.run()?;
        seconds.extend(&result.per_iteration_seconds);
        let annotations = refiner.annotations().clone();
        let mut report = self.report(
            Method::Histocrf,
            if budget == 0 { "none" } else { "hitl" },
            budget,
            seed,
            result.predictions,
            &annotations,
        )?;
        report.iterations = seconds.len();
        report.per_iteration_seconds = seconds;
        report.shortfall = shortfall;
        report.rounds = rounds;
        Ok(report)
    }
}

/// Cartesian grid for the pairwise-term ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub terms: Vec<BaseTerm>,
    pub k_base: Vec<usize>,
    pub beta_on: Vec<bool>,
    pub alpha: Vec<f64>,
    pub strategy: SamplingKind,
    pub budget: usize,
    pub seed: u64,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            terms: vec![BaseTerm::Diversity, BaseTerm::Smoothing],
            k_base: vec![16],
            beta_on: vec![true, false],
            alpha: vec![0.1],
            strategy: SamplingKind::None,
            budget: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub term: BaseTerm,
    pub beta_on: bool,
    /// Bytes of candidate pools plus one iteration's sampled edges.
    pub memory_bytes: usize,
    pub report: ExperimentReport,
}

/// One refinement per grid cell. Beta "on" uses the base config's beta.
pub fn run_ablation_grid(base: &Workbench, grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &term in &grid.terms {
        for &k_base in &grid.k_base {
            let mut config = base.config;
            config.neighborhood.term = term;
            config.neighborhood.k_base = k_base;
            config.neighborhood.seed = grid.seed;
            let bench = base.with_config(config)?;
            let strategy = SamplingStrategy {
                kind: grid.strategy,
                budget: grid.budget,
                per_round: 1,
                seed: grid.seed,
            };
            let (annotations, _) = bench.draw_annotations(&strategy)?;
            let memory_bytes =
                bench.index.pool_bytes() + bench.index.resample(&annotations, 0).edge_bytes();
            for &beta_on in &grid.beta_on {
                for &alpha in &grid.alpha {
                    let mut cell = config;
                    cell.engine.weights.alpha = alpha;
                    if !beta_on {
                        cell.engine.weights.beta = 0.0;
                    }
                    let report = bench.with_config(cell)?.histocrf(&strategy)?;
                    rows.push(AblationRow {
                        term,
                        beta_on,
                        memory_bytes,
                        report,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Report columns followed by `term`, `beta_on`, `memory_bytes`.
pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    header.extend(["term", "beta_on", "memory_bytes"]);
    w.write_record(&header)?;
    for r in rows {
        w.serialize((r.report.csv_row(), r.term.as_str(), r.beta_on, r.memory_bytes))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
