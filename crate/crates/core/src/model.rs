//! Ties the per-level pipeline together: a sample is linearized once, then encoded
//! with the current projections into normalized embeddings, CAM spreads and
//! (optionally) adjacent-level CAM correlations. Pairs of encoded samples are
//! scored with any of the [`Scoring`] rules.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::feature::{linearize_map, FeaturePyramid, LinearizedMap, ProjectionLayer};
use crate::graph::{
    common_grid, compute_cams, node_values, pair_correlations, CamStack, EdgeStore,
    RescaledStack,
};
use crate::inference::{
    rectify_with, reliability_from_spreads, InferenceParams, NormalizedEdges, RectifiedNodes,
    ReliabilityVector,
};

/// A pyramid after linearization, with its per-channel pooled vectors cached.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub label: u32,
    pub levels: Vec<LinearizedMap>,
    pub pooled: Vec<Array1<f64>>,
}

impl PreparedSample {
    pub fn new(p: &FeaturePyramid) -> Self {
        let levels: Vec<LinearizedMap> = p.levels().iter().map(linearize_map).collect();
        let pooled = levels.iter().map(|l| l.channel_means()).collect();
        Self {
            sample_id: p.sample_id.clone(),
            label: p.label,
            levels,
            pooled,
        }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dims().0).collect()
    }
}

pub fn prepare_all(pyramids: &[FeaturePyramid]) -> Vec<PreparedSample> {
    use rayon::prelude::*;
    pyramids.par_iter().map(PreparedSample::new).collect()
}

/// Everything pair scoring needs from one sample under a fixed model.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub label: u32,
    /// Unnormalized embeddings `eˡ`.
    pub raw: Vec<Array1<f64>>,
    /// Normalized embeddings `ẽˡ`.
    pub embeddings: Vec<Array1<f64>>,
    /// Population std of each node's rescaled CAM; empty at level 1.
    pub spreads: Vec<Array1<f64>>,
    /// Concatenation of all raw embeddings, normalized as one vector.
    pub concat: Array1<f64>,
    /// Per-sample `ω̂ˡ` for `l = 2..L`, present when requested.
    pub correlations: Option<Vec<Array2<f64>>>,
}

/// Projections (construction parameters), gating parameters and dataset edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub projections: Vec<ProjectionLayer>,
    pub params: InferenceParams,
    pub edges: EdgeStore,
}

impl Model {
    /// Gaussian projections with variance `1/c`, default gates and zero edges.
    pub fn init(channels: &[usize], r: usize, k: usize, gamma: f64, seed: u64) -> Result<Self> {
        if channels.is_empty() || r == 0 {
            return Err(Error::config("model needs at least one level and r >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let normal = Normal::new(0.0, 1.0 / (c as f64).sqrt()).expect("finite std");
                let w = Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng));
                ProjectionLayer::new(w, i + 1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projections,
            params: InferenceParams::new(channels.len(), r, k)?,
            edges: EdgeStore::new(channels.len(), r, gamma)?,
        })
    }

    pub fn levels(&self) -> usize {
        self.projections.len()
    }

    pub fn r(&self) -> usize {
        self.params.r()
    }

    pub fn check_sample(&self, s: &PreparedSample) -> Result<()> {
        if s.levels.len() != self.levels() {
            return Err(Error::shape("sample level count", self.levels(), s.levels.len()));
        }
        for (proj, lvl) in self.projections.iter().zip(&s.levels) {
            if proj.in_dim() != lvl.dims().0 {
                return Err(Error::shape("sample channels", proj.in_dim(), lvl.dims().0));
            }
        }
        Ok(())
    }

    pub fn cams(&self, s: &PreparedSample) -> Result<Vec<CamStack>> {
        self.check_sample(s)?;
        self.projections
            .iter()
            .zip(&s.levels)
            .map(|(p, z)| compute_cams(z, p))
            .collect()
    }

    pub fn encode(&self, s: &PreparedSample, with_correlations: bool) -> Result<EncodedSample> {
        self.check_sample(s)?;
        let levels = self.levels();
        let mut raw = Vec::with_capacity(levels);
        let mut embeddings = Vec::with_capacity(levels);
        for (li, (proj, v)) in self.projections.iter().zip(&s.pooled).enumerate() {
            let e = proj.apply(v)?;
            let norm = e.dot(&e).sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding { level: li + 1 });
            }
            embeddings.push(&e / norm);
            raw.push(e);
        }
        let cams = self.cams(s)?;
        let mut spreads = vec![Array1::zeros(0)];
        let mut correlations = with_correlations.then(Vec::new);
        for l in 1..levels {
            let grid = common_grid(cams[l].spatial_dims(), cams[l - 1].spatial_dims());
            let upper = RescaledStack::from_cams(&cams[l], grid);
            spreads.push(upper.spreads());
            if let Some(c) = correlations.as_mut() {
                let lower = RescaledStack::from_cams(&cams[l - 1], grid);
                c.push(pair_correlations(&upper, &lower)?);
            }
        }
        let total: f64 = raw.iter().map(|e| e.dot(e)).sum();
        let concat = Array1::from_iter(raw.iter().flat_map(|e| e.iter().copied())) / total.sqrt();
        Ok(EncodedSample {
            label: s.label,
            raw,
            embeddings,
            spreads,
            concat,
            correlations,
        })
    }

    pub fn encode_all(&self, samples: &[PreparedSample]) -> Result<Vec<EncodedSample>> {
        use rayon::prelude::*;
        samples.par_iter().map(|s| self.encode(s, false)).collect()
    }

    pub fn normalized_edges(&self) -> Result<NormalizedEdges> {
        NormalizedEdges::from_store(&self.edges, self.params.k())
    }

    /// Nodes and gates for one pair.
    pub fn pair_graph(&self, a: &EncodedSample, b: &EncodedSample) -> PairGraph {
        pair_graph(&self.params, a, b)
    }
}

/// Similarity nodes per level and reliabilities for levels `2..L` of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    pub nodes: Vec<Array1<f64>>,
    pub reliabilities: Vec<ReliabilityVector>,
}

impl PairGraph {
    pub fn gates(&self) -> Vec<Array1<f64>> {
        self.reliabilities.iter().map(|r| r.values.clone()).collect()
    }

    pub fn rectify(&self, edges: &NormalizedEdges) -> Result<RectifiedNodes> {
        rectify_with(&self.nodes, &self.gates(), edges)
    }
}

pub fn pair_graph(params: &InferenceParams, a: &EncodedSample, b: &EncodedSample) -> PairGraph {
    let nodes = a
        .embeddings
        .iter()
        .zip(&b.embeddings)
        .map(|(x, y)| node_values(x, y))
        .collect();
    let reliabilities = (2..=a.embeddings.len())
        .map(|l| {
            reliability_from_spreads(
                &a.spreads[l - 1],
                &b.spreads[l - 1],
                params.alpha(l),
                params.beta(l),
            )
        })
        .collect();
    PairGraph {
        nodes,
        reliabilities,
    }
}

/// How a pair of encoded samples is reduced to one dissimilarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// `dᴸ`, the top level alone.
    TopLevel,
    /// `dˡ` of one level (1-based).
    SingleLevel(usize),
    /// Mean of `dˡ` over levels (every gate fixed at 1).
    MultiLayerMean,
    /// Mean over levels of gate-weighted node sums, `Σᵢ pˡᵢ δˡᵢ` (level 1 ungated).
    MultiLayerReliability,
    /// Squared distance between normalized concatenated embeddings.
    Concat,
    /// Rectified overall dissimilarity `d̂`.
    Rectified,
}

/// Scores pairs under a fixed model; cheap to share across threads.
pub struct PairScorer<'a> {
    pub params: &'a InferenceParams,
    pub edges: NormalizedEdges,
    pub scoring: Scoring,
}

impl<'a> PairScorer<'a> {
    pub fn new(model: &'a Model, scoring: Scoring) -> Result<Self> {
        if let Scoring::SingleLevel(l) = scoring {
            if !(1..=model.levels()).contains(&l) {
                return Err(Error::config(format!(
                    "level {l} outside 1..={}",
                    model.levels()
                )));
            }
        }
        Ok(Self {
            params: &model.params,
            edges: model.normalized_edges()?,
            scoring,
        })
    }

    pub fn score(&self, a: &EncodedSample, b: &EncodedSample) -> f64 {
        match self.scoring {
            Scoring::TopLevel => {
                let l = a.embeddings.len() - 1;
                node_values(&a.embeddings[l], &b.embeddings[l]).sum()
            }
            Scoring::SingleLevel(l) => node_values(&a.embeddings[l - 1], &b.embeddings[l - 1]).sum(),
            Scoring::MultiLayerMean => {
                let n = a.embeddings.len() as f64;
                a.embeddings
                    .iter()
                    .zip(&b.embeddings)
                    .map(|(x, y)| node_values(x, y).sum())
                    .sum::<f64>()
                    / n
            }
            Scoring::MultiLayerReliability => {
                let g = pair_graph(self.params, a, b);
                let mut total = g.nodes[0].sum();
                for (n, rel) in g.nodes[1..].iter().zip(&g.reliabilities) {
                    total += n.dot(&rel.values);
                }
                total / g.nodes.len() as f64
            }
            Scoring::Concat => node_values(&a.concat, &b.concat).sum(),
            Scoring::Rectified => pair_graph(self.params, a, b)
                .rectify(&self.edges)
                .expect("encoded samples share the model's shapes")
                .overall,
        }
    }
}
