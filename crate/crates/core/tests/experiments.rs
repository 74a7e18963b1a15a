use std::sync::Arc;

use histocrf_core::experiments::{
    run_ablation_grid, write_ablation_csv, write_reports_csv, AblationGrid, RunConfig, SamplingKind, SamplingStrategy,
    Workbench, CSV_COLUMNS,
};
use histocrf_core::potentials::BaseTerm;
use histocrf_core::synthetic::{synthesize, SyntheticSpec};

fn bench(seed: u64, noise: f64) -> Workbench {
    bench_sized(seed, noise, 60)
}

fn bench_sized(seed: u64, noise: f64, patches_per_class: usize) -> Workbench {
    let spec = SyntheticSpec {
        num_classes: 4,
        patches_per_class,
        dim_unary: 16,
        dim_pairwise: 16,
        unary_noise: noise,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = synthesize(&spec).unwrap().dataset;
    Workbench::new(Arc::new(ds), RunConfig::default()).unwrap()
}

fn strategy(kind: SamplingKind, budget: usize, seed: u64) -> SamplingStrategy {
    SamplingStrategy {
        kind,
        budget,
        per_round: 1,
        seed,
    }
}

#[test]
fn hitl_with_zero_budget_equals_plain_refinement() {
    let wb = bench(1, 0.4);
    let hitl = wb.hitl(5, 0, 1).unwrap();
    let plain = wb.histocrf(&SamplingStrategy::none(1)).unwrap();
    assert_eq!(hitl.predictions, plain.predictions);
    assert_eq!(hitl.accuracy, plain.accuracy);
    assert!(hitl.rounds.is_empty());
}

#[test]
fn hitl_places_budget_in_rounds() {
    let wb = bench_sized(2, 0.4, 150);
    let r = wb.hitl(5, 100, 2).unwrap();
    assert_eq!(r.rounds.len(), 20);
    assert_eq!(r.annotations_placed, 100);
    assert_eq!(r.shortfall, 0);
    assert_eq!(r.rounds.last().unwrap().annotations_total, 100);
}

#[test]
fn perfect_zero_shot_reports_shortfall() {
    let wb = bench(3, 0.0);
    assert_eq!(wb.zero_shot().unwrap().accuracy, 1.0);
    let r = wb.histocrf(&strategy(SamplingKind::ErrorBased, 10, 3)).unwrap();
    assert_eq!(r.annotations_placed, 0);
    assert_eq!(r.shortfall, 10);
}

#[test]
fn identical_inputs_give_identical_reports() {
    let a = bench(5, 0.4).histocrf(&strategy(SamplingKind::Random, 20, 5)).unwrap();
    let b = bench(5, 0.4).histocrf(&strategy(SamplingKind::Random, 20, 5)).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn single_cell_grid_equals_direct_run() {
    let wb = bench(6, 0.4);
    let grid = AblationGrid {
        terms: vec![BaseTerm::Diversity],
        beta_on: vec![true],
        seed: 0,
        ..AblationGrid::default()
    };
    let rows = run_ablation_grid(&wb, &grid).unwrap();
    assert_eq!(rows.len(), 1);
    let direct = wb.histocrf(&SamplingStrategy::none(0)).unwrap();
    assert_eq!(rows[0].report.predictions, direct.predictions);
}

#[test]
fn memory_grows_with_k() {
    let wb = bench(7, 0.4);
    let grid = AblationGrid {
        terms: vec![BaseTerm::Diversity],
        k_base: vec![4, 16, 64],
        beta_on: vec![true],
        ..AblationGrid::default()
    };
    let rows = run_ablation_grid(&wb, &grid).unwrap();
    let mem: Vec<usize> = rows.iter().map(|r| r.memory_bytes).collect();
    assert!(mem[0] < mem[1] && mem[1] < mem[2], "{mem:?}");
}

#[test]
fn default_grid_writes_both_terms() {
    let wb = bench(8, 0.4);
    let rows = run_ablation_grid(&wb, &AblationGrid::default()).unwrap();
    assert_eq!(rows.len(), 4);
    let mut out = Vec::new();
    write_ablation_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with(&CSV_COLUMNS.join(",")));
    assert!(header.ends_with("term,beta_on,memory_bytes"));
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains(",smoothing,"));
}

#[test]
fn report_csv_has_one_row_per_report() {
    let wb = bench(9, 0.4);
    let reports = vec![wb.zero_shot().unwrap(), wb.histocrf(&SamplingStrategy::none(9)).unwrap()];
    let mut out = Vec::new();
    write_reports_csv(&mut out, &reports).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 3);
}
