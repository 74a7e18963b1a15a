//! Sparse neighborhoods over the pairwise embedding space.
//!
//! At startup every vertex gets two ranked candidate pools computed by exact
//! top-k over all pairs: a base pool (most dissimilar vertices for the
//! diversity term, most similar for smoothing) and a similar pool used by
//! annotated vertices. Each message-passing iteration draws a fresh sample
//! from the pools.

use std::cmp::Ordering;

use ndarray::{s, Array2, ArrayView1};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnnotationSet, EmbeddingMatrix};
use crate::potentials::BaseTerm;
use crate::rng::{self, Lane};

const BLOCK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub vertex: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodParams {
    /// Base edges sampled per vertex per iteration.
    pub k_base: usize,
    /// Annotation edges sampled per annotated vertex per iteration.
    pub k_ann: usize,
    /// Pool size as a multiple of the sample size.
    pub pool_factor: usize,
    pub seed: u64,
    #[serde(default)]
    pub term: BaseTerm,
}

impl Default for NeighborhoodParams {
    fn default() -> Self {
        Self {
            k_base: 16,
            k_ann: 5,
            pool_factor: 4,
            seed: 0,
            term: BaseTerm::Diversity,
        }
    }
}

impl NeighborhoodParams {
    pub fn validate(&self) -> Result<()> {
        if self.pool_factor == 0 {
            return Err(Error::InvalidConfig("pool_factor must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Rank {
    Ascending,
    Descending,
}

impl Rank {
    fn cmp(self, a: &Neighbor, b: &Neighbor) -> Ordering {
        let by_sim = match self {
            Rank::Ascending => a.similarity.total_cmp(&b.similarity),
            Rank::Descending => b.similarity.total_cmp(&a.similarity),
        };
        by_sim.then(a.vertex.cmp(&b.vertex))
    }
}

/// Runs `f` on every row of the all-pairs cosine similarity matrix, in
/// parallel row blocks, and returns the per-row results in vertex order.
pub(crate) fn map_similarity_rows<T, F>(normalized: &Array2<f64>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, ArrayView1<'_, f64>) -> T + Sync,
{
    let n = normalized.nrows();
    let blocks: Vec<usize> = (0..n).step_by(BLOCK_ROWS).collect();
    blocks
        .into_par_iter()
        .flat_map_iter(|start| {
            let end = (start + BLOCK_ROWS).min(n);
            let sims = normalized.slice(s![start..end, ..]).dot(&normalized.t());
            (start..end)
                .map(|i| f(i, sims.row(i - start)))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// The `k` best vertices other than `center` under `rank`, sorted.
pub(crate) fn select_ranked(
    center: usize,
    sims: ArrayView1<'_, f64>,
    k: usize,
    rank: Rank,
) -> Vec<Neighbor> {
    let mut candidates: Vec<Neighbor> = sims
        .iter()
        .enumerate()
        .filter(|&(w, _)| w != center)
        .map(|(w, &s)| Neighbor {
            vertex: w,
            similarity: s.clamp(-1.0, 1.0),
        })
        .collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |a, b| rank.cmp(a, b));
        candidates.truncate(k);
    }
    candidates.sort_by(|a, b| rank.cmp(a, b));
    candidates
}

/// Ranked candidate pools for every vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodIndex {
    params: NeighborhoodParams,
    num_vertices: usize,
    base_pool_len: usize,
    similar_pool_len: usize,
    base_pool: Vec<Neighbor>,
    similar_pool: Vec<Neighbor>,
}

impl NeighborhoodIndex {
    /// Exact top-k pools by cosine similarity over all pairs, O(N²d).
    pub fn build(pairwise: &EmbeddingMatrix, params: NeighborhoodParams) -> Result<Self> {
        params.validate()?;
        let n = pairwise.rows();
        if n < 2 {
            return Err(Error::GraphTooSmall(n));
        }
        let normalized = pairwise.normalized()?;
        let base_pool_len = (params.pool_factor * params.k_base).min(n - 1);
        let similar_pool_len = (params.pool_factor * params.k_ann).min(n - 1);
        let base_rank = match params.term {
            BaseTerm::Diversity => Rank::Ascending,
            BaseTerm::Smoothing => Rank::Descending,
        };
        let rows = map_similarity_rows(&normalized, |i, sims| {
            (
                select_ranked(i, sims, base_pool_len, base_rank),
                select_ranked(i, sims, similar_pool_len, Rank::Descending),
            )
        });
        let mut base_pool = Vec::with_capacity(n * base_pool_len);
        let mut similar_pool = Vec::with_capacity(n * similar_pool_len);
        for (b, s) in rows {
            base_pool.extend(b);
            similar_pool.extend(s);
        }
        Ok(Self {
            params,
            num_vertices: n,
            base_pool_len,
            similar_pool_len,
            base_pool,
            similar_pool,
        })
    }

    pub fn params(&self) -> &NeighborhoodParams {
        &self.params
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn term(&self) -> BaseTerm {
        self.params.term
    }

    /// Base candidates of `v` (ascending similarity for the diversity term).
    pub fn base_pool(&self, v: usize) -> &[Neighbor] {
        &self.base_pool[v * self.base_pool_len..(v + 1) * self.base_pool_len]
    }

    /// Same as [`base_pool`](Self::base_pool); named for the diversity term.
    pub fn dissimilar_pool(&self, v: usize) -> &[Neighbor] {
        self.base_pool(v)
    }

    /// Most similar candidates of `v`, descending similarity.
    pub fn similar_pool(&self, v: usize) -> &[Neighbor] {
        &self.similar_pool[v * self.similar_pool_len..(v + 1) * self.similar_pool_len]
    }

    pub fn base_sample_len(&self) -> usize {
        self.params.k_base.min(self.base_pool_len)
    }

    pub fn annotation_sample_len(&self) -> usize {
        self.params.k_ann.min(self.similar_pool_len)
    }

    /// Bytes held by the candidate pools.
    pub fn pool_bytes(&self) -> usize {
        (self.base_pool.len() + self.similar_pool.len()) * std::mem::size_of::<Neighbor>()
    }

    fn draw(&self, pool: &[Neighbor], k: usize, iteration: u64, v: usize, lane: Lane) -> Vec<Neighbor> {
        if k >= pool.len() {
            return pool.to_vec();
        }
        let mut rng = rng::stream(self.params.seed, iteration, v, lane);
        let mut picks = index::sample(&mut rng, pool.len(), k).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| pool[i]).collect()
    }

    /// Draws the neighborhoods for one iteration. The draw for each vertex
    /// depends only on (seed, iteration, vertex), so the result does not
    /// depend on thread scheduling.
    pub fn resample(&self, annotations: &AnnotationSet, iteration: u64) -> SampledNeighborhoods {
        let k = self.base_sample_len();
        let mut base = vec![
            Neighbor {
                vertex: 0,
                similarity: 0.0
            };
            self.num_vertices * k
        ];
        if k > 0 {
            base.par_chunks_mut(k).enumerate().for_each(|(v, out)| {
                let drawn = self.draw(self.base_pool(v), k, iteration, v, Lane::Base);
                out.copy_from_slice(&drawn);
            });
        }
        let k_ann = self.annotation_sample_len();
        let annotation = annotations
            .iter()
            .filter(|&(a, _)| a < self.num_vertices)
            .map(|(a, _)| {
                (
                    a,
                    self.draw(self.similar_pool(a), k_ann, iteration, a, Lane::Annotation),
                )
            })
            .collect();
        SampledNeighborhoods {
            term: self.params.term,
            iteration,
            num_vertices: self.num_vertices,
            base_len: k,
            base,
            annotation,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Convenience wrapper around [`NeighborhoodIndex::build`].
pub fn build_index(pairwise: &EmbeddingMatrix, params: NeighborhoodParams) -> Result<NeighborhoodIndex> {
    NeighborhoodIndex::build(pairwise, params)
}

/// The edges in force for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNeighborhoods {
    term: BaseTerm,
    iteration: u64,
    num_vertices: usize,
    base_len: usize,
    base: Vec<Neighbor>,
    /// (annotated vertex, its sampled similar neighbors), ascending vertex.
    annotation: Vec<(usize, Vec<Neighbor>)>,
}

impl SampledNeighborhoods {
    /// Builds neighborhoods from explicit edge lists. Every vertex must have
    /// the same number of base edges.
    pub fn from_edges(
        term: BaseTerm,
        iteration: u64,
        base_edges: Vec<Vec<Neighbor>>,
        mut annotation: Vec<(usize, Vec<Neighbor>)>,
    ) -> Self {
        let num_vertices = base_edges.len();
        let base_len = base_edges.first().map_or(0, Vec::len);
        assert!(
            base_edges.iter().all(|e| e.len() == base_len),
            "base edge lists must have equal length"
        );
        annotation.sort_by_key(|(a, _)| *a);
        Self {
            term,
            iteration,
            num_vertices,
            base_len,
            base: base_edges.into_iter().flatten().collect(),
            annotation,
        }
    }

    pub fn term(&self) -> BaseTerm {
        self.term
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn base_edges(&self, v: usize) -> &[Neighbor] {
        &self.base[v * self.base_len..(v + 1) * self.base_len]
    }

    /// Sampled similar neighbors of annotated vertex `a` (empty otherwise).
    pub fn annotation_edges(&self, a: usize) -> &[Neighbor] {
        self.annotation
            .binary_search_by_key(&a, |(v, _)| *v)
            .map(|i| self.annotation[i].1.as_slice())
            .unwrap_or(&[])
    }

    pub fn annotation_sources(&self) -> impl Iterator<Item = (usize, &[Neighbor])> {
        self.annotation.iter().map(|(a, e)| (*a, e.as_slice()))
    }

    /// Bytes held by the sampled edges.
    pub fn edge_bytes(&self) -> usize {
        let ann: usize = self.annotation.iter().map(|(_, e)| e.len()).sum();
        (self.base.len() + ann) * std::mem::size_of::<Neighbor>()
    }
}
