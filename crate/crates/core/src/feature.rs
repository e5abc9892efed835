//! Feature maps, the max+avg pooling linearization, and per-level projection heads.
//!
//! Max pooling does not commute with a linear projection, so CAMs computed from the
//! raw map would not average back to the embedding. [`linearize_map`] rewrites each
//! channel so that plain average pooling of the result equals max pooling plus
//! average pooling of the source. Everything downstream (embeddings and CAMs) is
//! computed from the linearized map, where averaging and projection commute.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// One level of a feature pyramid: `channels × rows × cols` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    level: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, level: usize) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "feature map at level {level} has a zero dimension ({c}x{h}x{w})"
            )));
        }
        if level == 0 {
            return Err(Error::config("feature map levels are numbered from 1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "feature map at level {level} contains non-finite values"
            )));
        }
        Ok(Self { data, level })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// `(channels, rows, cols)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// Ordered bottom-to-top stack of feature maps for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureMap>,
    pub sample_id: String,
    pub label: u32,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>, sample_id: impl Into<String>, label: u32) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("a pyramid needs at least one level"));
        }
        for (i, m) in levels.iter().enumerate() {
            if m.level != i + 1 {
                return Err(Error::config(format!(
                    "pyramid level {} is tagged {}; levels must run 1..L bottom to top",
                    i + 1,
                    m.level
                )));
            }
        }
        Ok(Self {
            levels,
            sample_id: sample_id.into(),
            label,
        })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Level `l` counted from 1.
    pub fn level(&self, l: usize) -> &FeatureMap {
        &self.levels[l - 1]
    }
}

/// A feature map after the pooling linearization, `z + g̃(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMap {
    data: Array3<f64>,
    level: usize,
}

impl LinearizedMap {
    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Spatial mean of every channel.
    pub fn channel_means(&self) -> Array1<f64> {
        let (_, h, w) = self.data.dim();
        let area = (h * w) as f64;
        self.data
            .axis_iter(Axis(0))
            .map(|ch| ch.sum() / area)
            .collect()
    }
}

/// Per channel, every maximal element is scaled by `K = HW / #maxima` and added to
/// the source; all other elements are left as-is.
pub fn linearize_map(z: &FeatureMap) -> LinearizedMap {
    let (c, h, w) = z.dims();
    let area = (h * w) as f64;
    let mut out = Array3::<f64>::zeros((c, h, w));
    for (src, mut dst) in z.data.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let ties = src.iter().filter(|&&v| v == max).count();
        let scale = area / ties as f64;
        for (s, d) in src.iter().zip(dst.iter_mut()) {
            let v = *s as f64;
            *d = if *s == max { v + scale * v } else { v };
        }
    }
    LinearizedMap {
        data: out,
        level: z.level,
    }
}

/// Linear projection head `h`: an `r × c` weight matrix with no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionLayer {
    weights: Array2<f64>,
    level: usize,
}

impl ProjectionLayer {
    pub fn new(weights: Array2<f64>, level: usize) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "projection at level {level} has non-finite weights"
            )));
        }
        Ok(Self { weights, level })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// Embedding dimension `r`.
    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn apply(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.in_dim() {
            return Err(Error::shape("projection input channels", self.in_dim(), v.len()));
        }
        Ok(self.weights.dot(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Array1<f64>,
    pub level: usize,
}

impl EmbeddingVector {
    pub fn new(values: Array1<f64>, level: usize) -> Self {
        Self { values, level }
    }

    pub fn norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }
}

/// `h(g_avg(z̃))`, which equals `h(g_max(z) + g_avg(z))` on the source map.
pub fn pool_and_project(z: &LinearizedMap, proj: &ProjectionLayer) -> Result<EmbeddingVector> {
    let (c, _, _) = z.dims();
    if proj.in_dim() != c {
        return Err(Error::shape("pool_and_project channels", proj.in_dim(), c));
    }
    Ok(EmbeddingVector::new(proj.apply(&z.channel_means())?, z.level))
}

pub fn normalize_embedding(e: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = e.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding { level: e.level });
    }
    Ok(EmbeddingVector::new(&e.values / norm, e.level))
}

/// Flattened spatial view `c × (h·w)` of a linearized map.
pub(crate) fn spatial_matrix(z: &LinearizedMap) -> ArrayView2<'_, f64> {
    let (c, h, w) = z.dims();
    z.data
        .view()
        .into_shape_with_order((c, h * w))
        .expect("linearized maps are contiguous")
}
