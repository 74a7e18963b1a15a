//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::fs;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use histocrf_core::baselines::{label_propagation, LpConfig, LpSolver};
use histocrf_core::error::Error;
use histocrf_core::experiments::{RunConfig, SamplingKind, SamplingStrategy, Workbench};
use histocrf_core::inference::{beliefs_well_formed, mean_field_step, EngineConfig, Refiner};
use histocrf_core::model::{AnnotationSet, EmbeddingMatrix};
use histocrf_core::potentials::{BaseTerm, PairwiseWeights};
use histocrf_core::synthetic::{synthesize, SyntheticSpec};
use histocrf_service::Session;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn benchmark_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 5,
        patches_per_class: 400,
        unary_noise: 0.4,
        seed,
        ..SyntheticSpec::default()
    }
}

fn benchmark(seed: u64, config: RunConfig) -> Workbench {
    let dataset = synthesize(&benchmark_spec(seed)).expect("synthetic set").dataset;
    Workbench::new(Arc::new(dataset), config).expect("workbench")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn p1_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut worst = 0.0_f64;
    for i in 0..200 {
        let term = if i % 4 == 3 { BaseTerm::Smoothing } else { BaseTerm::Diversity };
        let inst = oracle::random_instance(&mut rng, term);
        let got = mean_field_step(&inst.q, &inst.unary, &inst.nbrs, &inst.annotations, &oracle::config_for(&inst))
            .expect("step");
        let want = oracle::oracle_step(&inst, term);
        for (a, b) in got.view().iter().zip(want.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 5.0,
        format!("200 instances, max-abs {worst:.1e} (tol 1e-12), {secs:.2}s (limit 5s)"),
    )
}

fn p2_normalization() -> Outcome {
    if !cfg!(debug_assertions) {
        return outcome(false, "engine assertion compiled out; run without --release");
    }
    let mut steps = 0;
    let mut bad = 0;
    for (seed, clamp) in [(0, true), (1, false), (2, true)] {
        let config = RunConfig {
            engine: EngineConfig {
                clamp_annotations: clamp,
                weights: PairwiseWeights { alpha: 0.5, beta: 0.5 },
                ..EngineConfig::default()
            },
            ..RunConfig::default()
        };
        let spec = SyntheticSpec {
            patches_per_class: 100,
            seed,
            ..SyntheticSpec::default()
        };
        let ds = Arc::new(synthesize(&spec).unwrap().dataset);
        let wb = Workbench::new(ds.clone(), config).unwrap();
        let mut refiner = Refiner::new(wb.unary.clone(), wb.index.clone(), config.engine).unwrap();
        let labels = ds.labels().unwrap();
        for round in 0..10 {
            for v in (round * 13..round * 13 + 5).map(|v| v % labels.len()) {
                refiner.apply_annotation(v, labels[v]).unwrap();
            }
            refiner.step().unwrap();
            steps += 1;
            if !beliefs_well_formed(refiner.beliefs(), refiner.annotations(), clamp) {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0,
        format!("{steps} iterations checked, {bad} violations (row sums 1 ± 1e-9, clamped rows one-hot); engine debug assertion active"),
    )
}

fn p3_zero_pairwise() -> Outcome {
    let mut checked = 0;
    let mut mismatched = 0;
    for seed in SEEDS {
        for term in [BaseTerm::Diversity, BaseTerm::Smoothing] {
            let mut config = RunConfig::default();
            config.engine.weights = PairwiseWeights { alpha: 0.0, beta: 0.0 };
            config.neighborhood.term = term;
            config.neighborhood.seed = seed;
            let spec = SyntheticSpec {
                patches_per_class: 80,
                seed,
                ..SyntheticSpec::default()
            };
            let wb = Workbench::new(Arc::new(synthesize(&spec).unwrap().dataset), config).unwrap();
            let strategy = SamplingStrategy {
                kind: SamplingKind::Random,
                budget: 0,
                per_round: 1,
                seed,
            };
            let refined = wb.histocrf(&strategy).unwrap();
            let zero_shot = wb.unary.zero_shot_predictions();
            checked += zero_shot.len();
            mismatched += refined.predictions.iter().zip(&zero_shot).filter(|(a, b)| a != b).count();
        }
    }
    outcome(mismatched == 0, format!("{checked} vertices over 10 runs, {mismatched} differ from unary argmax"))
}

fn p4_lp_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(20..=500);
        let d = rng.random_range(2..=16);
        let l = rng.random_range(2..=6);
        let emb = EmbeddingMatrix::from_rows(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut ann = AnnotationSet::new();
        for _ in 0..rng.random_range(1..=n / 5) {
            ann.insert(rng.random_range(0..n), rng.random_range(0..l), n, l).unwrap();
        }
        let closed = LpConfig::default();
        let iterative = LpConfig {
            solver: LpSolver::Iterative,
            iter_tol: 1e-12,
            ..LpConfig::default()
        };
        let a = label_propagation(&emb, &ann, l, &closed).unwrap();
        let b = label_propagation(&emb, &ann, l, &iterative).unwrap();
        for (x, y) in a.scores.iter().zip(b.scores.iter()) {
            worst = worst.max((x - y).abs());
        }
    }
    let pair = EmbeddingMatrix::from_rows(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let ann: AnnotationSet = [(0, 0)].into_iter().collect();
    let hand = label_propagation(&pair, &ann, 2, &LpConfig::default()).unwrap();
    let hand_err = (hand.scores[[0, 0]] - 2.0 / 3.0).abs().max((hand.scores[[1, 0]] - 1.0 / 3.0).abs());
    outcome(
        worst <= 1e-6 && hand_err <= 1e-12,
        format!("50 instances max-abs {worst:.1e} (tol 1e-6); 2-vertex case error {hand_err:.1e} (tol 1e-12)"),
    )
}

fn p5_refinement_gain() -> Outcome {
    let start = Instant::now();
    let mut zero_shot = Vec::new();
    let mut refined = Vec::new();
    for seed in SEEDS {
        let mut config = RunConfig::default();
        config.neighborhood.seed = seed;
        let wb = benchmark(seed, config);
        zero_shot.push(wb.zero_shot().unwrap().accuracy);
        refined.push(wb.histocrf(&SamplingStrategy::none(seed)).unwrap().accuracy);
    }
    let secs = start.elapsed().as_secs_f64();
    let (zs, rf) = (mean(&zero_shot), mean(&refined));
    let per_seed: Vec<String> = zero_shot
        .iter()
        .zip(&refined)
        .map(|(z, r)| format!("{:+.2}", 100.0 * (r - z)))
        .collect();
    outcome(
        rf >= zs && rf - zs > 0.0 && secs < 60.0,
        format!(
            "zero-shot {:.2}% -> refined {:.2}% (gain {:+.2} pts; per seed [{}]), {secs:.1}s (limit 60s)",
            100.0 * zs,
            100.0 * rf,
            100.0 * (rf - zs),
            per_seed.join(", ")
        ),
    )
}

fn p6_annotation_monotonicity() -> Outcome {
    let budgets = [0usize, 10, 50, 100];
    let mut acc = vec![Vec::new(); budgets.len()];
    let mut hitl = Vec::new();
    for seed in SEEDS {
        let mut config = RunConfig::default();
        config.neighborhood.seed = seed;
        let wb = benchmark(seed, config);
        for (i, &budget) in budgets.iter().enumerate() {
            let strategy = SamplingStrategy {
                kind: SamplingKind::ErrorBased,
                budget,
                per_round: 1,
                seed,
            };
            acc[i].push(wb.histocrf(&strategy).unwrap().accuracy);
        }
        hitl.push(wb.hitl(5, 100, seed).unwrap().accuracy);
    }
    let violations = |lo: &[f64], hi: &[f64]| lo.iter().zip(hi).filter(|(a, b)| b < a).count();
    let mut pass = true;
    let mut parts = Vec::new();
    for w in 0..budgets.len() - 1 {
        let v = violations(&acc[w], &acc[w + 1]);
        pass &= mean(&acc[w + 1]) >= mean(&acc[w]) && v <= 1;
        parts.push(format!("{}:{:.2}%", budgets[w], 100.0 * mean(&acc[w])));
    }
    parts.push(format!("100:{:.2}%", 100.0 * mean(&acc[3])));
    let v = violations(&acc[3], &hitl);
    pass &= mean(&hitl) >= mean(&acc[3]) && v <= 1;
    outcome(
        pass,
        format!(
            "error-based means [{}]; hitl(5,100) {:.2}% vs one-shot {:.2}% ({v} seed violations, 1 allowed)",
            parts.join(" "),
            100.0 * mean(&hitl),
            100.0 * mean(&acc[3])
        ),
    )
}

fn p7_realtime() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_histocrf"))
        .args(["bench", "--n", "10000", "--classes", "10", "--k", "16"])
        .env("RUST_LOG", "warn")
        .output()
        .expect("bench runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let secs = stdout
        .lines()
        .find_map(|l| l.strip_prefix("seconds_per_iteration="))
        .and_then(|s| s.parse::<f64>().ok());
    match secs {
        Some(s) => outcome(
            out.status.success() && s <= 2.5,
            format!(
                "{s:.4}s per iteration at N=10^4, L=10, k=16 (hard limit 2.5s, target 0.5s {})",
                if s <= 0.5 { "met" } else { "missed" }
            ),
        ),
        None => outcome(false, format!("bench produced no timing: {}", String::from_utf8_lossy(&out.stderr))),
    }
}

fn p8_determinism_and_replay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let bin = env!("CARGO_BIN_EXE_histocrf");
    let run = |args: &[&str]| {
        let status = Command::new(bin).args(args).env("RUST_LOG", "warn").output().unwrap().status;
        assert!(status.success(), "{args:?}");
    };
    run(&["synth", "--out", data.to_str().unwrap(), "--per-class", "100", "--seed", "8"]);
    let manifest = data.join("manifest.json");
    let mut outputs = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        run(&[
            "refine", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--strategy", "random", "--budget", "25", "--seed", "8",
        ]);
        outputs.push(fs::read(out.join("predictions.txt")).unwrap());
    }
    let identical = outputs[0] == outputs[1];

    let dataset = Arc::new(histocrf_core::load_dataset(&manifest).unwrap());
    let mut config = RunConfig::default();
    config.engine.weights.beta = 0.2;
    config.engine.damping = 0.1;
    let session = Session::new("acceptance".into(), dataset, config).unwrap();
    for round in 0..5usize {
        let batch: Vec<(usize, usize)> = (0..4).map(|i| ((round * 37 + i * 11) % 500, (round + i) % 5)).collect();
        session.submit_annotations(&batch).unwrap();
        assert!(session.begin_step());
        session.run_steps(2).unwrap();
    }
    let live = session.snapshot();
    let replayed = session.replay().unwrap();
    let diff = replayed.beliefs().max_abs_diff(&live.beliefs);
    outcome(
        identical && diff <= 1e-12,
        format!(
            "repeated CLI runs {} prediction files; replay of {} events max-abs {diff:.1e} (tol 1e-12)",
            if identical { "wrote identical" } else { "wrote DIFFERENT" },
            session.events().len()
        ),
    )
}

fn p9_lp_guard() -> Outcome {
    let n = 5001;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = EmbeddingMatrix::from_rows(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ann: AnnotationSet = [(0, 0), (1, 1)].into_iter().collect();
    let start = Instant::now();
    let result = label_propagation(&emb, &ann, 2, &LpConfig::default());
    let secs = start.elapsed().as_secs_f64();
    match result {
        Err(e @ Error::TooLargeForClosedForm { .. }) => outcome(
            secs < 1.0,
            format!("N={n} over guard 5000: \"{e}\" after {secs:.3}s"),
        ),
        Err(e) => outcome(false, format!("unexpected error: {e}")),
        Ok(_) => outcome(false, "closed form ran past the guard"),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 9] = [
        ("P1", "mean-field oracle equivalence", p1_oracle),
        ("P2", "normalization and clamping", p2_normalization),
        ("P3", "zero-pairwise reduction", p3_zero_pairwise),
        ("P4", "LP solver agreement", p4_lp_agreement),
        ("P5", "synthetic refinement gain", p5_refinement_gain),
        ("P6", "annotation monotonicity", p6_annotation_monotonicity),
        ("P7", "real-time envelope", p7_realtime),
        ("P8", "determinism and replay", p8_determinism_and_replay),
        ("P9", "LP memory guard", p9_lp_guard),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!("{id} {} {name}: {}", if result.pass { "PASS" } else { "FAIL" }, result.detail);
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
