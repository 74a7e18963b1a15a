//! Unary and pairwise potentials, and the energy of a hard labeling.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, AnnotationSet, ClassTextEmbeddings, EmbeddingMatrix};
use crate::neighborhood::SampledNeighborhoods;

/// Default softmax temperature: cosine similarities are divided by it.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// φ_v(l) = −log p_v(l) for the zero-shot distribution p_v.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    data: Array2<f64>,
    temperature: f64,
}

impl UnaryField {
    /// Wraps precomputed potentials; rows must exponentiate to distributions.
    pub fn from_potentials(data: Array2<f64>, temperature: f64) -> Result<Self> {
        for (v, row) in data.outer_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NonFinite { what: "unary potential", row: v });
            }
            let mass: f64 = row.iter().map(|x| (-x).exp()).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "unary row {v} exponentiates to mass {mass}"
                )));
            }
        }
        Ok(Self { data, temperature })
    }

    pub fn num_vertices(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.data.ncols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.data.row(v)
    }

    pub fn get(&self, v: usize, l: usize) -> f64 {
        self.data[[v, l]]
    }

    /// Zero-shot probabilities softmax(−φ), evaluated exactly as the
    /// mean-field update evaluates its softmax.
    pub fn probabilities(&self) -> Array2<f64> {
        let mut p = self.data.mapv(|x| -x);
        for mut row in p.outer_iter_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.mapv_inplace(|x| x / z);
        }
        p
    }

    /// argmin_l φ_v(l), ties to the lowest class.
    pub fn zero_shot_predictions(&self) -> Vec<usize> {
        self.data
            .outer_iter()
            .map(|r| argmax(r.iter().map(|x| -x)))
            .collect()
    }
}

/// Computes φ_v(l) = −log softmax_l(sim(f_v, t_l) / temperature).
///
/// The log-softmax is evaluated in log space, so potentials stay finite for
/// any finite temperature without flooring the probabilities.
pub fn compute_unary(
    unary_embeddings: &EmbeddingMatrix,
    text: &ClassTextEmbeddings,
    temperature: f64,
) -> Result<UnaryField> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if unary_embeddings.dim() != text.dim() {
        return Err(Error::DimensionMismatch(format!(
            "patch embeddings have dim {}, text embeddings {}",
            unary_embeddings.dim(),
            text.dim()
        )));
    }
    let patches = unary_embeddings.normalized()?;
    let texts = text.embeddings().normalized().map_err(|e| match e {
        Error::DegenerateEmbedding { row } => Error::InvalidConfig(format!(
            "text embedding of class {row} has zero norm"
        )),
        other => other,
    })?;
    let mut sims = patches.dot(&texts.t());
    let l = sims.ncols();
    sims.as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(l)
        .for_each(|row| {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / temperature));
            let log_z = max
                + row
                    .iter()
                    .map(|&s| (s / temperature - max).exp())
                    .sum::<f64>()
                    .ln();
            row.iter_mut()
                .for_each(|s| *s = (log_z - *s / temperature).max(0.0));
        });
    Ok(UnaryField {
        data: sims,
        temperature,
    })
}

/// Diversity pairwise term: (1 − sim) when the labels agree, else 0.
pub fn diversity_pair(sim_vw: f64, same_label: bool) -> f64 {
    if same_label {
        1.0 - sim_vw
    } else {
        0.0
    }
}

/// Annotation pairwise term: sim when the labels differ, else 0.
pub fn annotation_pair(sim_vw: f64, same_label: bool) -> f64 {
    if same_label {
        0.0
    } else {
        sim_vw
    }
}

/// Which pairwise term drives the base (non-annotation) edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseTerm {
    /// Connect the most dissimilar patches and penalize shared labels.
    #[default]
    Diversity,
    /// Conventional smoothing: connect the most similar patches and
    /// penalize disagreement (the annotation term's form).
    Smoothing,
}

impl BaseTerm {
    pub fn pair(self, sim_vw: f64, same_label: bool) -> f64 {
        match self {
            BaseTerm::Diversity => diversity_pair(sim_vw, same_label),
            BaseTerm::Smoothing => annotation_pair(sim_vw, same_label),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaseTerm::Diversity => "diversity",
            BaseTerm::Smoothing => "smoothing",
        }
    }
}

impl std::str::FromStr for BaseTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diversity" => Ok(BaseTerm::Diversity),
            "smoothing" => Ok(BaseTerm::Smoothing),
            other => Err(Error::InvalidConfig(format!("unknown pairwise term {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PairwiseWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.01,
        }
    }
}

impl PairwiseWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Energy of a hard labeling: unary sum plus the weighted base and
/// annotation pairwise sums over the sampled edges.
pub fn compute_energy(
    labeling: &[usize],
    unary: &UnaryField,
    neighborhoods: &SampledNeighborhoods,
    annotations: &AnnotationSet,
    weights: &PairwiseWeights,
) -> Result<f64> {
    let n = unary.num_vertices();
    let l = unary.num_classes();
    if labeling.len() != n || neighborhoods.num_vertices() != n {
        return Err(Error::DimensionMismatch(format!(
            "labeling of {} vertices, unary of {n}, neighborhoods of {}",
            labeling.len(),
            neighborhoods.num_vertices()
        )));
    }
    if let Some(&bad) = labeling.iter().find(|&&y| y >= l) {
        return Err(Error::LabelOutOfRange { label: bad, classes: l });
    }

    let unary_sum: f64 = labeling.iter().enumerate().map(|(v, &y)| unary.get(v, y)).sum();

    let term = neighborhoods.term();
    let mut base = 0.0;
    for (v, &yv) in labeling.iter().enumerate() {
        for e in neighborhoods.base_edges(v) {
            base += term.pair(e.similarity, yv == labeling[e.vertex]);
        }
    }

    let mut ann = 0.0;
    for (a, _) in annotations.iter() {
        for e in neighborhoods.annotation_edges(a) {
            ann += annotation_pair(e.similarity, labeling[a] == labeling[e.vertex]);
        }
    }

    Ok(unary_sum + weights.alpha * base + weights.beta * ann)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighborhood::{Neighbor, SampledNeighborhoods};

    fn text(rows: Vec<f64>, l: usize, d: usize) -> ClassTextEmbeddings {
        ClassTextEmbeddings::new(
            EmbeddingMatrix::from_rows(l, d, rows).unwrap(),
            (0..l).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unary_of_patch_matching_class_zero() {
        let patches = EmbeddingMatrix::from_rows(1, 2, vec![1.0, 0.0]).unwrap();
        let u = compute_unary(&patches, &text(vec![1.0, 0.0, 0.0, 1.0], 2, 2), 0.01).unwrap();
        // logits (100, 0): φ0 = log(1 + e^-100), φ1 = 100 + φ0.
        assert!(u.get(0, 0).abs() < 1e-10);
        assert!((u.get(0, 1) - 100.0).abs() < 1e-10);
    }

    #[test]
    fn equidistant_patch_has_log_l_everywhere() {
        let patches = EmbeddingMatrix::from_rows(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let t = text(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3);
        for temp in [0.01, 1.0, 7.0] {
            let u = compute_unary(&patches, &t, temp).unwrap();
            for l in 0..3 {
                assert!((u.get(0, l) - 3f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_row_is_named() {
        let patches = EmbeddingMatrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = compute_unary(&patches, &text(vec![1.0, 0.0, 0.0, 1.0], 2, 2), 0.01).unwrap_err();
        assert!(matches!(err, Error::DegenerateEmbedding { row: 1 }), "{err}");
    }

    #[test]
    fn pair_terms() {
        assert_eq!(diversity_pair(1.0, true), 0.0);
        assert_eq!(diversity_pair(0.0, true), 1.0);
        assert_eq!(diversity_pair(0.7, false), 0.0);
        assert_eq!(annotation_pair(0.9, false), 0.9);
        assert_eq!(annotation_pair(0.9, true), 0.0);
        assert_eq!(annotation_pair(0.0, false), 0.0);
    }

    fn two_vertex_graph() -> (UnaryField, SampledNeighborhoods) {
        let ln2 = 2f64.ln();
        let unary = UnaryField::from_potentials(Array2::from_elem((2, 2), ln2), 1.0).unwrap();
        let nbrs = SampledNeighborhoods::from_edges(
            BaseTerm::Diversity,
            0,
            vec![
                vec![Neighbor { vertex: 1, similarity: 0.5 }],
                vec![Neighbor { vertex: 0, similarity: 0.5 }],
            ],
            vec![],
        );
        (unary, nbrs)
    }

    #[test]
    fn energy_examples() {
        let (unary, nbrs) = two_vertex_graph();
        let ln2 = 2f64.ln();
        let w = PairwiseWeights { alpha: 1.0, beta: 0.0 };
        let a = AnnotationSet::new();
        let e = compute_energy(&[0, 0], &unary, &nbrs, &a, &w).unwrap();
        assert!((e - (2.0 * ln2 + 1.0)).abs() < 1e-12);
        let e = compute_energy(&[0, 1], &unary, &nbrs, &a, &w).unwrap();
        assert!((e - 2.0 * ln2).abs() < 1e-12);
        let zero = PairwiseWeights { alpha: 0.0, beta: 0.0 };
        let e = compute_energy(&[1, 1], &unary, &nbrs, &a, &zero).unwrap();
        assert!((e - 2.0 * ln2).abs() < 1e-12);
        assert!(matches!(
            compute_energy(&[0, 2], &unary, &nbrs, &a, &w),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_weight_energy_minimizer_is_per_vertex_unary_argmin() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..=4);
            let l = rng.random_range(2..=3);
            let logits: Vec<f64> = (0..n * l).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut phi = Array2::zeros((n, l));
            for v in 0..n {
                let p = crate::model::row_softmax(&logits[v * l..(v + 1) * l], 1.0);
                for c in 0..l {
                    phi[[v, c]] = -p[c].ln();
                }
            }
            let unary = UnaryField::from_potentials(phi, 1.0).unwrap();
            let edges = (0..n)
                .map(|v| {
                    (0..n)
                        .filter(|&w| w != v)
                        .map(|w| Neighbor { vertex: w, similarity: rng.random_range(-1.0..1.0) })
                        .collect()
                })
                .collect();
            let nbrs = SampledNeighborhoods::from_edges(BaseTerm::Diversity, 0, edges, vec![]);
            let zero = PairwiseWeights { alpha: 0.0, beta: 0.0 };
            let a = AnnotationSet::new();
            let mut best = (f64::INFINITY, vec![]);
            for code in 0..l.pow(n as u32) {
                let labeling: Vec<usize> = (0..n).map(|v| code / l.pow(v as u32) % l).collect();
                let e = compute_energy(&labeling, &unary, &nbrs, &a, &zero).unwrap();
                if e < best.0 - 1e-12 {
                    best = (e, labeling);
                }
            }
            assert_eq!(best.1, unary.zero_shot_predictions());
        }
    }

    proptest::proptest! {
        #[test]
        fn diversity_bounds(sim in -1.0..=1.0f64, same: bool) {
            let d = diversity_pair(sim, same);
            proptest::prop_assert!((0.0..=2.0).contains(&d));
            proptest::prop_assert_eq!(d == 0.0, !same || sim == 1.0);
            let a = annotation_pair(sim, same);
            proptest::prop_assert_eq!(a == 0.0, same || sim == 0.0);
        }

        #[test]
        fn unary_rows_are_distributions(
            values in proptest::collection::vec(-1.0..1.0f64, 12),
            temperature in 0.005..5.0f64,
        ) {
            proptest::prop_assume!(values[..4].iter().any(|x| x.abs() > 1e-3));
            proptest::prop_assume!(values[4..8].iter().any(|x| x.abs() > 1e-3));
            proptest::prop_assume!(values[8..].iter().any(|x| x.abs() > 1e-3));
            let patches = EmbeddingMatrix::from_rows(1, 4, values[..4].to_vec()).unwrap();
            let t = text(values[4..].to_vec(), 2, 4);
            let u = compute_unary(&patches, &t, temperature).unwrap();
            let mass: f64 = u.row(0).iter().map(|x| (-x).exp()).sum();
            proptest::prop_assert!((mass - 1.0).abs() < 1e-9);
            proptest::prop_assert!(u.row(0).iter().all(|x| *x >= 0.0 && x.is_finite()));
        }
    }
}
