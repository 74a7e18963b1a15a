//! One interactive refinement session.
//!
//! The engine sits behind a mutex owned by the single writer (a step, or an
//! annotation drain). Readers only touch the published snapshot. Annotation
//! batches go to a pending queue first, so a submission never waits for a
//! running step; the queue is drained before every iteration and once more
//! when a step request finishes.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};
use std::time::Instant;

use histocrf_core::experiments::{accuracies, RunConfig};
use histocrf_core::inference::{AuditRecord, Refiner};
use histocrf_core::io::Dataset;
use histocrf_core::model::{AnnotationSet, Beliefs};
use histocrf_core::neighborhood::NeighborhoodIndex;
use histocrf_core::potentials::{compute_unary, UnaryField};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

const EVENT_CHANNEL: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Created {
        num_vertices: usize,
        num_classes: usize,
        config: RunConfig,
    },
    Annotation {
        vertex: usize,
        label: usize,
        previous: Option<usize>,
        iteration: usize,
        timestamp_ms: u64,
    },
    Step {
        iteration: usize,
        max_delta: f64,
        seconds: f64,
        accuracy: Option<f64>,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::Created { .. } => "created",
            EventKind::Annotation { .. } => "annotation",
            EventKind::Step { .. } => "step",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPoint {
    pub iteration: usize,
    pub max_delta: f64,
    pub seconds: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Stepping,
    Converged,
}

/// Read-only view published after every write.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub beliefs: Beliefs,
    pub predictions: Vec<usize>,
    pub annotations: AnnotationSet,
    pub converged: bool,
    pub history: Vec<StepPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSummary {
    pub iterations_run: usize,
    pub max_delta: f64,
    pub seconds_per_iteration: f64,
}

#[derive(Debug)]
pub enum AnnotationError {
    VertexOutOfRange { index: usize, vertex: usize },
    LabelOutOfRange { index: usize, label: usize },
}

impl std::fmt::Display for AnnotationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnnotationError::VertexOutOfRange { index, vertex } => {
                write!(f, "entry {index}: vertex {vertex} out of range")
            }
            AnnotationError::LabelOutOfRange { index, label } => {
                write!(f, "entry {index}: label {label} out of range")
            }
        }
    }
}

pub struct Session {
    pub id: String,
    pub dataset: Arc<Dataset>,
    pub config: RunConfig,
    unary: Arc<UnaryField>,
    index: Arc<NeighborhoodIndex>,
    engine: Mutex<Refiner>,
    pending: Mutex<Vec<(usize, usize)>>,
    stepping: AtomicBool,
    snapshot: RwLock<Arc<Snapshot>>,
    log: Mutex<Vec<SessionEvent>>,
    events: broadcast::Sender<SessionEvent>,
}

impl Session {
    pub fn new(id: String, dataset: Arc<Dataset>, config: RunConfig) -> histocrf_core::Result<Self> {
        config.engine.validate()?;
        config.neighborhood.validate()?;
        let unary = Arc::new(compute_unary(&dataset.unary, &dataset.text, config.engine.temperature)?);
        let index = Arc::new(NeighborhoodIndex::build(&dataset.pairwise, config.neighborhood)?);
        let refiner = Refiner::new(unary.clone(), index.clone(), config.engine)?;
        let snapshot = Snapshot {
            beliefs: refiner.beliefs().clone(),
            predictions: refiner.predictions(),
            annotations: AnnotationSet::new(),
            converged: false,
            history: Vec::new(),
        };
        let (events, _) = broadcast::channel(EVENT_CHANNEL);
        let session = Self {
            id,
            dataset,
            config,
            unary,
            index,
            engine: Mutex::new(refiner),
            pending: Mutex::new(Vec::new()),
            stepping: AtomicBool::new(false),
            snapshot: RwLock::new(Arc::new(snapshot)),
            log: Mutex::new(Vec::new()),
            events,
        };
        session.record(EventKind::Created {
            num_vertices: session.num_vertices(),
            num_classes: session.num_classes(),
            config,
        });
        Ok(session)
    }

    pub fn num_vertices(&self) -> usize {
        self.dataset.num_patches()
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn status(&self) -> Status {
        if self.stepping.load(Ordering::SeqCst) {
            Status::Stepping
        } else if self.snapshot().converged {
            Status::Converged
        } else {
            Status::Idle
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().expect("pending lock").len()
    }

    /// Headline and annotation-excluded accuracy, when labels exist.
    pub fn accuracy(&self, snapshot: &Snapshot) -> Option<(f64, f64)> {
        let labels = self.dataset.labels.as_ref()?;
        Some(accuracies(&snapshot.predictions, labels, &snapshot.annotations))
    }

    pub fn events(&self) -> Vec<SessionEvent> {
        self.log.lock().expect("log lock").clone()
    }

    /// The log so far plus a receiver for everything after it.
    pub fn subscribe(&self) -> (Vec<SessionEvent>, broadcast::Receiver<SessionEvent>) {
        let log = self.log.lock().expect("log lock");
        (log.clone(), self.events.subscribe())
    }

    fn record(&self, kind: EventKind) {
        let mut log = self.log.lock().expect("log lock");
        let event = SessionEvent {
            seq: log.len() as u64,
            kind,
        };
        log.push(event.clone());
        // No receivers is fine.
        let _ = self.events.send(event);
    }

    fn publish(&self, refiner: &Refiner, converged: Option<bool>, point: Option<StepPoint>) {
        let mut guard = self.snapshot.write().expect("snapshot lock");
        let mut history = guard.history.clone();
        history.extend(point);
        *guard = Arc::new(Snapshot {
            beliefs: refiner.beliefs().clone(),
            predictions: refiner.predictions(),
            annotations: refiner.annotations().clone(),
            converged: converged.unwrap_or(guard.converged),
            history,
        });
    }

    /// Validates the whole batch, queues it and applies it unless a step is
    /// running. Returns (accepted, overridden).
    pub fn submit_annotations(&self, batch: &[(usize, usize)]) -> Result<(usize, usize), AnnotationError> {
        let (n, l) = (self.num_vertices(), self.num_classes());
        for (index, &(vertex, label)) in batch.iter().enumerate() {
            if vertex >= n {
                return Err(AnnotationError::VertexOutOfRange { index, vertex });
            }
            if label >= l {
                return Err(AnnotationError::LabelOutOfRange { index, label });
            }
        }
        let overridden = {
            let mut pending = self.pending.lock().expect("pending lock");
            let applied = self.snapshot().annotations.clone();
            let mut seen: Vec<usize> = pending.iter().map(|p| p.0).collect();
            let mut overridden = 0;
            for &(vertex, _) in batch {
                if applied.contains(vertex) || seen.contains(&vertex) {
                    overridden += 1;
                }
                seen.push(vertex);
            }
            pending.extend_from_slice(batch);
            overridden
        };
        self.try_drain();
        Ok((batch.len(), overridden))
    }

    /// Applies queued annotations unless a step owns the engine; a running
    /// step drains the queue itself.
    fn try_drain(&self) {
        loop {
            if self.stepping.load(Ordering::SeqCst) {
                return;
            }
            match self.engine.try_lock() {
                Ok(mut refiner) => {
                    if self.drain_locked(&mut refiner) {
                        self.publish(&refiner, Some(false), None);
                    }
                    return;
                }
                Err(TryLockError::WouldBlock) => std::thread::yield_now(),
                Err(TryLockError::Poisoned(e)) => panic!("engine lock poisoned: {e}"),
            }
        }
    }

    fn drain_locked(&self, refiner: &mut Refiner) -> bool {
        let batch: Vec<(usize, usize)> = std::mem::take(&mut *self.pending.lock().expect("pending lock"));
        for &(vertex, label) in &batch {
            let AuditRecord {
                previous,
                iteration,
                timestamp_ms,
                ..
            } = refiner
                .apply_annotation(vertex, label)
                .expect("annotations are range-checked on submission");
            self.record(EventKind::Annotation {
                vertex,
                label,
                previous,
                iteration,
                timestamp_ms,
            });
        }
        !batch.is_empty()
    }

    /// Claims the writer role for a step request. False if one is running.
    pub fn begin_step(&self) -> bool {
        self.stepping
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    /// Runs `count` iterations. Must follow a successful [`Session::begin_step`];
    /// blocking, so call it off the async executor.
    pub fn run_steps(&self, count: usize) -> histocrf_core::Result<StepSummary> {
        let result = self.run_steps_locked(count);
        self.stepping.store(false, Ordering::SeqCst);
        self.try_drain();
        result
    }

    fn run_steps_locked(&self, count: usize) -> histocrf_core::Result<StepSummary> {
        let mut refiner = self.engine.lock().expect("engine lock");
        let labels = self.dataset.labels.as_deref();
        let tol = self.config.engine.convergence_tol;
        let start = Instant::now();
        let mut max_delta = 0.0_f64;
        for _ in 0..count {
            self.drain_locked(&mut refiner);
            let report = refiner.step()?;
            max_delta = report.max_delta;
            let accuracy = labels.map(|l| accuracies(&refiner.predictions(), l, refiner.annotations()).0);
            let point = StepPoint {
                iteration: report.iteration,
                max_delta: report.max_delta,
                seconds: report.seconds,
                accuracy,
            };
            self.publish(&refiner, Some(report.max_delta < tol), Some(point));
            self.record(EventKind::Step {
                iteration: report.iteration,
                max_delta: report.max_delta,
                seconds: report.seconds,
                accuracy,
            });
        }
        if self.drain_locked(&mut refiner) {
            self.publish(&refiner, Some(false), None);
        }
        Ok(StepSummary {
            iterations_run: count,
            max_delta,
            seconds_per_iteration: start.elapsed().as_secs_f64() / count.max(1) as f64,
        })
    }

    /// Rebuilds engine state from this session's event log.
    pub fn replay(&self) -> histocrf_core::Result<Refiner> {
        replay_events(self.unary.clone(), self.index.clone(), self.config, &self.events())
    }
}

/// Replays annotation and step events in log order on a fresh engine.
pub fn replay_events(
    unary: Arc<UnaryField>,
    index: Arc<NeighborhoodIndex>,
    config: RunConfig,
    events: &[SessionEvent],
) -> histocrf_core::Result<Refiner> {
    let mut refiner = Refiner::new(unary, index, config.engine)?;
    for event in events {
        match event.kind {
            EventKind::Created { .. } => {}
            EventKind::Annotation { vertex, label, .. } => {
                refiner.apply_annotation(vertex, label)?;
            }
            EventKind::Step { .. } => {
                refiner.step()?;
            }
        }
    }
    Ok(refiner)
}
