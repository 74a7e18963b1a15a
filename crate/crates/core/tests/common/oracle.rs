//! Random small instances and an exhaustive-summation reference for one
//! mean-field update. Shared with the acceptance suite.

use histocrf_core::inference::EngineConfig;
use histocrf_core::model::{AnnotationSet, Beliefs};
use histocrf_core::neighborhood::{Neighbor, SampledNeighborhoods};
use histocrf_core::potentials::{annotation_pair, BaseTerm, PairwiseWeights, UnaryField};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub unary: UnaryField,
    pub q: Beliefs,
    pub nbrs: SampledNeighborhoods,
    pub annotations: AnnotationSet,
    pub weights: PairwiseWeights,
    pub damping: f64,
    pub clamp: bool,
}

pub fn random_distribution(rng: &mut ChaCha8Rng, l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / z).collect()
}

pub fn random_instance(rng: &mut ChaCha8Rng, term: BaseTerm) -> Instance {
    let n = rng.random_range(2..=4);
    let l = rng.random_range(2..=3);
    let k = rng.random_range(1..n);

    let mut phi = Array2::zeros((n, l));
    for v in 0..n {
        for (c, p) in random_distribution(rng, l).into_iter().enumerate() {
            phi[[v, c]] = -p.ln();
        }
    }
    let unary = UnaryField::from_potentials(phi, 1.0).unwrap();

    let mut annotations = AnnotationSet::new();
    for v in 0..n {
        if rng.random_bool(0.3) {
            annotations.insert(v, rng.random_range(0..l), n, l).unwrap();
        }
    }
    let clamp = rng.random_bool(0.5);

    let mut q = Array2::zeros((n, l));
    for v in 0..n {
        match annotations.get(v).filter(|_| clamp) {
            Some(label) => q[[v, label]] = 1.0,
            None => {
                for (c, p) in random_distribution(rng, l).into_iter().enumerate() {
                    q[[v, c]] = p;
                }
            }
        }
    }

    let others = |v: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<Neighbor> {
        let mut ids: Vec<usize> = (0..n).filter(|&w| w != v).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        ids.truncate(count);
        ids.sort_unstable();
        ids.into_iter()
            .map(|w| Neighbor {
                vertex: w,
                similarity: rng.random_range(-1.0..1.0),
            })
            .collect()
    };
    let base: Vec<Vec<Neighbor>> = (0..n).map(|v| others(v, k, rng)).collect();
    let ann: Vec<(usize, Vec<Neighbor>)> = annotations
        .iter()
        .map(|(a, _)| {
            let count = rng.random_range(1..n);
            (a, others(a, count, rng))
        })
        .collect();

    Instance {
        unary,
        q: Beliefs::new(q, 0).unwrap(),
        nbrs: SampledNeighborhoods::from_edges(term, 0, base, ann),
        annotations,
        weights: PairwiseWeights {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
        },
        damping: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.9) },
        clamp,
    }
}

/// Direct evaluation of the update: for each vertex and label, the expected
/// local energy is summed over every joint labeling of the other vertices,
/// weighted by the product of their current marginals.
pub fn oracle_step(inst: &Instance, term: BaseTerm) -> Array2<f64> {
    let n = inst.unary.num_vertices();
    let l = inst.unary.num_classes();
    let q = inst.q.view();
    let mut out = Array2::zeros((n, l));
    for v in 0..n {
        if inst.clamp {
            if let Some(label) = inst.annotations.get(v) {
                out[[v, label]] = 1.0;
                continue;
            }
        }
        let mut m = vec![0.0; l];
        for (yv, mv) in m.iter_mut().enumerate() {
            let mut expected = 0.0;
            for code in 0..l.pow(n as u32) {
                let labeling: Vec<usize> = (0..n).map(|i| code / l.pow(i as u32) % l).collect();
                if labeling[v] != yv {
                    continue;
                }
                let weight: f64 = (0..n).filter(|&w| w != v).map(|w| q[[w, labeling[w]]]).product();
                let mut energy = inst.unary.get(v, yv);
                for e in inst.nbrs.base_edges(v) {
                    energy += inst.weights.alpha * term.pair(e.similarity, labeling[e.vertex] == yv);
                }
                for (a, edges) in inst.nbrs.annotation_sources() {
                    let label_a = inst.annotations.get(a).unwrap();
                    for e in edges.iter().filter(|e| e.vertex == v) {
                        energy += inst.weights.beta * annotation_pair(e.similarity, label_a == yv);
                    }
                }
                expected += weight * energy;
            }
            *mv = expected;
        }
        let z: f64 = m.iter().map(|x| (-x).exp()).sum();
        for c in 0..l {
            out[[v, c]] = (1.0 - inst.damping) * (-m[c]).exp() / z + inst.damping * q[[v, c]];
        }
    }
    out
}

pub fn config_for(inst: &Instance) -> EngineConfig {
    EngineConfig {
        weights: inst.weights,
        damping: inst.damping,
        clamp_annotations: inst.clamp,
        temperature: 1.0,
        ..EngineConfig::default()
    }
}
