//! Seeded synthetic datasets that stand in for real slide embeddings.
//!
//! Class mean directions form a randomly rotated regular simplex, so every
//! pair of classes is equally far apart. Patch embeddings are the scaled
//! class mean plus isotropic Gaussian noise, renormalized. The unary space
//! carries the zero-shot errors: a fixed fraction of patches has its mean
//! pulled past the midpoint toward a wrong class there, by a uniform amount
//! in [0.5, 1), while the pairwise space always uses the true class and half
//! the noise.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::model::{ClassTextEmbeddings, EmbeddingMatrix};

const PAIRWISE_NOISE_SCALE: f64 = 0.5;

/// Puts patch-text cosines near 0.05 with class gaps of a few hundredths.
pub const DEFAULT_UNARY_OFFSET: f64 = 20.0;

fn default_unary_offset() -> f64 {
    DEFAULT_UNARY_OFFSET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub patches_per_class: usize,
    pub dim_unary: usize,
    pub dim_pairwise: usize,
    /// Norm of the class mean relative to unit-energy noise.
    pub cluster_separation: f64,
    /// Fraction of patches whose unary embedding comes from a wrong class.
    pub unary_noise: f64,
    pub seed: u64,
    /// Norm of a class-independent direction added to every unary-space
    /// patch embedding. It is orthogonal to all text embeddings, so it only
    /// shrinks patch-text cosines, mimicking the small and tightly packed
    /// image-text similarities of contrastive vision-language models.
    #[serde(default = "default_unary_offset")]
    pub unary_offset: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            patches_per_class: 400,
            dim_unary: 64,
            dim_pairwise: 64,
            cluster_separation: 1.0,
            unary_noise: 0.4,
            seed: 0,
            unary_offset: DEFAULT_UNARY_OFFSET,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.patches_per_class == 0 || self.dim_unary == 0 || self.dim_pairwise == 0 {
            return Err(Error::InvalidConfig(
                "patches_per_class and dimensions must be >= 1".into(),
            ));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return Err(Error::InvalidConfig("cluster_separation must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.unary_noise) {
            return Err(Error::InvalidConfig("unary_noise must lie in [0, 1]".into()));
        }
        if !(self.unary_offset.is_finite() && self.unary_offset >= 0.0) {
            return Err(Error::InvalidConfig("unary_offset must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.num_classes * self.patches_per_class
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Class each unary embedding was actually drawn from.
    pub unary_source: Vec<usize>,
}

impl SyntheticDataset {
    pub fn corrupted_count(&self) -> usize {
        let labels = self.dataset.labels.as_ref().expect("synthetic sets carry labels");
        labels
            .iter()
            .zip(&self.unary_source)
            .filter(|(l, s)| l != s)
            .count()
    }
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn normalize(v: &mut Array1<f64>) {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
}

/// Orthonormal vectors by Gram-Schmidt over Gaussian draws (count ≤ dim).
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vector(rng, dim, 1.0);
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            v /= n;
            basis.push(v);
        }
    }
    basis
}

/// Unit class means plus an optional unit direction orthogonal to all of them.
fn class_directions(
    rng: &mut ChaCha8Rng,
    classes: usize,
    dim: usize,
) -> (Vec<Array1<f64>>, Option<Array1<f64>>) {
    if dim > classes {
        let mut basis = orthonormal(rng, classes + 1, dim);
        let extra = basis.pop();
        let centroid = basis.iter().fold(Array1::<f64>::zeros(dim), |acc, b| acc + b) / classes as f64;
        let means = basis
            .into_iter()
            .map(|b| {
                let mut m = b - &centroid;
                normalize(&mut m);
                m
            })
            .collect();
        (means, extra)
    } else {
        let means = (0..classes)
            .map(|_| {
                let mut m = gaussian_vector(rng, dim, 1.0);
                normalize(&mut m);
                m
            })
            .collect();
        (means, None)
    }
}

fn to_f32_precision(values: Array2<f64>) -> Array2<f64> {
    values.mapv(|x| x as f32 as f64)
}

/// Builds the synthetic dataset in memory. Deterministic in `spec.seed`.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.num_classes;
    let n = spec.num_patches();

    let (unary_means, offset_dir) = class_directions(&mut rng, l, spec.dim_unary);
    let (pairwise_means, _) = class_directions(&mut rng, l, spec.dim_pairwise);

    let mut labels: Vec<usize> = (0..n).map(|v| v % l).collect();
    // Fisher-Yates with the dataset stream keeps the layout seed-dependent.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }

    let corrupted_count = (spec.unary_noise * n as f64).round() as usize;
    let mut unary_source = labels.clone();
    let mut pull = vec![0.0; n];
    for v in index::sample(&mut rng, n, corrupted_count.min(n)).into_iter() {
        let shift = rng.random_range(1..l);
        unary_source[v] = (labels[v] + shift) % l;
        pull[v] = rng.random_range(0.5..1.0);
    }

    let sep = spec.cluster_separation;
    let unary_noise_scale = 1.0 / (spec.dim_unary as f64).sqrt();
    let pairwise_noise_scale = PAIRWISE_NOISE_SCALE / (spec.dim_pairwise as f64).sqrt();
    let mut unary = Array2::zeros((n, spec.dim_unary));
    let mut pairwise = Array2::zeros((n, spec.dim_pairwise));
    for v in 0..n {
        let mut f = gaussian_vector(&mut rng, spec.dim_unary, unary_noise_scale);
        let mut centre = unary_means[labels[v]].clone() * (1.0 - pull[v]);
        centre.scaled_add(pull[v], &unary_means[unary_source[v]]);
        normalize(&mut centre);
        f.scaled_add(sep, &centre);
        if let Some(h) = &offset_dir {
            f.scaled_add(spec.unary_offset, h);
        }
        normalize(&mut f);
        unary.row_mut(v).assign(&f);

        let mut p = gaussian_vector(&mut rng, spec.dim_pairwise, pairwise_noise_scale);
        p.scaled_add(sep, &pairwise_means[labels[v]]);
        normalize(&mut p);
        pairwise.row_mut(v).assign(&p);
    }

    let mut text = Array2::zeros((l, spec.dim_unary));
    for (c, m) in unary_means.iter().enumerate() {
        text.row_mut(c).assign(m);
    }

    let class_names = (0..l).map(|c| format!("class_{c}")).collect();
    let text = ClassTextEmbeddings::new(EmbeddingMatrix::new(to_f32_precision(text))?, class_names)?;
    let dataset = Dataset::new(
        format!("synthetic-L{l}-n{}-s{}", spec.patches_per_class, spec.seed),
        EmbeddingMatrix::new(to_f32_precision(unary))?,
        EmbeddingMatrix::new(to_f32_precision(pairwise))?,
        text,
        Some(labels),
    )?;
    Ok(SyntheticDataset {
        dataset,
        unary_source,
    })
}

/// Writes a synthetic dataset (files, `manifest.json`, `synthetic.json`)
/// into `dir`, returning the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let synth = synthesize(spec)?;
    let manifest = synth.dataset.save(dir)?;
    let spec_path = dir.join("synthetic.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n")
        .map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest)
}
