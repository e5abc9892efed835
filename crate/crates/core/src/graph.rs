//! Bottom-up similarity construction: nodes from normalized embeddings, CAMs,
//! rescaled CAM correlations between adjacent levels, and the momentum edge store.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};

use crate::codec::{dim_u32, put_f64, put_f64s, put_u32, put_u64, ByteReader};
use crate::error::{Error, ParseErrorKind, Result};
use crate::feature::{spatial_matrix, EmbeddingVector, LinearizedMap, ProjectionLayer};

/// `δᵢ = (ẽᵢ − ẽ′ᵢ)²` for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityNodeVector {
    pub values: Array1<f64>,
    pub level: usize,
}

impl SimilarityNodeVector {
    /// Level similarity `dˡ = Σᵢ δᵢ`.
    pub fn level_sum(&self) -> f64 {
        self.values.sum()
    }
}

pub fn compute_similarity_nodes(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
) -> Result<SimilarityNodeVector> {
    if a.level != b.level {
        return Err(Error::shape("similarity node levels", a.level, b.level));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::shape(
            "similarity node length",
            a.values.len(),
            b.values.len(),
        ));
    }
    Ok(SimilarityNodeVector {
        values: node_values(&a.values, &b.values),
        level: a.level,
    })
}

pub(crate) fn node_values(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .collect()
}

/// One CAM per embedding coordinate: `uᵢ = Σⱼ aᵢⱼ z̃ⱼ`, stored `r × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamStack {
    pub maps: Array3<f64>,
    pub level: usize,
}

impl CamStack {
    pub fn len(&self) -> usize {
        self.maps.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of every map.
    pub fn spatial_dims(&self) -> (usize, usize) {
        let (_, h, w) = self.maps.dim();
        (h, w)
    }

    pub fn map(&self, i: usize) -> ArrayView2<'_, f64> {
        self.maps.index_axis(Axis(0), i)
    }
}

pub fn compute_cams(z: &LinearizedMap, proj: &ProjectionLayer) -> Result<CamStack> {
    let (c, h, w) = z.dims();
    if proj.in_dim() != c {
        return Err(Error::shape("compute_cams channels", proj.in_dim(), c));
    }
    let flat = proj.weights().dot(&spatial_matrix(z));
    let maps = flat
        .into_shape_with_order((proj.out_dim(), h, w))
        .expect("r·h·w elements");
    Ok(CamStack {
        maps,
        level: z.level(),
    })
}

/// A CAM average-pooled to a common grid, vectorized row-major, unit-L2 normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledCam {
    pub vector: Array1<f64>,
    /// Set when the pooled map was all zeros; the vector is then all zeros too.
    pub zero: bool,
}

/// Target grid shared by levels `a` and `a − 1`: the elementwise minimum.
pub fn common_grid(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (a.0.min(b.0), a.1.min(b.1))
}

/// `out × src` matrix of area-overlap weights; each row sums to 1.
fn area_weights(src: usize, out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, src));
    if out == src {
        m.diag_mut().fill(1.0);
        return m;
    }
    if src % out == 0 {
        let b = src / out;
        for o in 0..out {
            for i in o * b..(o + 1) * b {
                m[[o, i]] = 1.0 / b as f64;
            }
        }
        return m;
    }
    let step = src as f64 / out as f64;
    for o in 0..out {
        let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(src);
        for i in first..last {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[[o, i]] = overlap / step;
        }
    }
    m
}

/// Area-weighted average pooling of one map down to `target` (exact block means
/// when the sizes divide).
pub fn pool_to_grid(u: ArrayView2<'_, f64>, target: (usize, usize)) -> Array2<f64> {
    let (h, w) = u.dim();
    if (h, w) == target {
        return u.to_owned();
    }
    let rows = area_weights(h, target.0);
    let cols = area_weights(w, target.1);
    rows.dot(&u).dot(&cols.t())
}

pub fn rescale_and_normalize_cam(u: ArrayView2<'_, f64>, target: (usize, usize)) -> RescaledCam {
    let pooled = pool_to_grid(u, target);
    let vector = Array1::from_iter(pooled.iter().copied());
    let norm = vector.dot(&vector).sqrt();
    if norm == 0.0 {
        RescaledCam { vector, zero: true }
    } else {
        RescaledCam {
            vector: vector / norm,
            zero: false,
        }
    }
}

/// Rescaled CAMs of all `r` nodes of one level, rows of an `r × p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledStack {
    pub vectors: Array2<f64>,
    pub zero: Vec<bool>,
    pub level: usize,
}

impl RescaledStack {
    pub fn from_cams(cams: &CamStack, target: (usize, usize)) -> Self {
        let r = cams.len();
        let mut vectors = Array2::zeros((r, target.0 * target.1));
        let mut zero = Vec::with_capacity(r);
        for i in 0..r {
            let rc = rescale_and_normalize_cam(cams.map(i), target);
            vectors.row_mut(i).assign(&rc.vector);
            zero.push(rc.zero);
        }
        Self {
            vectors,
            zero,
            level: cams.level,
        }
    }

    /// Population standard deviation of every node's rescaled vector.
    pub fn spreads(&self) -> Array1<f64> {
        self.vectors
            .rows()
            .into_iter()
            .map(|row| row.std(0.0))
            .collect()
    }
}

/// `ω̂ᵢⱼ = ⟨ûˡᵢ, ûˡ⁻¹ⱼ⟩` for one sample. Both stacks must share a grid.
pub fn pair_correlations(upper: &RescaledStack, lower: &RescaledStack) -> Result<Array2<f64>> {
    if upper.vectors.ncols() != lower.vectors.ncols() {
        return Err(Error::shape(
            "pair_correlations grid",
            upper.vectors.ncols(),
            lower.vectors.ncols(),
        ));
    }
    Ok(upper.vectors.dot(&lower.vectors.t()))
}

/// Correlation matrices between CAMs of adjacent levels `l = 2..L` for one sample.
pub fn sample_correlations(cams: &[CamStack]) -> Result<Vec<Array2<f64>>> {
    (1..cams.len())
        .map(|i| {
            let grid = common_grid(cams[i].spatial_dims(), cams[i - 1].spatial_dims());
            let upper = RescaledStack::from_cams(&cams[i], grid);
            let lower = RescaledStack::from_cams(&cams[i - 1], grid);
            pair_correlations(&upper, &lower)
        })
        .collect()
}

/// Swap-symmetric pair statistic: the mean of both samples' correlation matrices.
pub fn pair_edge_statistic(a: &[Array2<f64>], b: &[Array2<f64>]) -> Vec<Array2<f64>> {
    a.iter().zip(b).map(|(x, y)| (x + y) * 0.5).collect()
}

/// Dataset-level edges `ωˡ` for `l = 2..L`, maintained as an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStore {
    matrices: Vec<Array2<f64>>,
    gamma: f64,
    update_count: u64,
    r: usize,
}

pub const EDGE_MAGIC: &[u8; 4] = b"AVSE";
pub const EDGE_VERSION: u32 = 1;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("momentum {gamma} outside [0, 1]")));
    }
    Ok(())
}

impl EdgeStore {
    /// Zero-initialized store for `levels` levels of `r` nodes.
    pub fn new(levels: usize, r: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if levels == 0 || r == 0 {
            return Err(Error::config("edge store needs L >= 1 and r >= 1"));
        }
        Ok(Self {
            matrices: vec![Array2::zeros((r, r)); levels - 1],
            gamma,
            update_count: 0,
            r,
        })
    }

    pub fn from_matrices(matrices: Vec<Array2<f64>>, r: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        for m in &matrices {
            if m.dim() != (r, r) {
                return Err(Error::shape("edge matrix size", r, m.nrows().max(m.ncols())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("edge matrices must be finite"));
            }
        }
        Ok(Self {
            matrices,
            gamma,
            update_count: 0,
            r,
        })
    }

    pub fn levels(&self) -> usize {
        self.matrices.len() + 1
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Edges into level `l` (`2 ≤ l ≤ L`) from level `l − 1`.
    pub fn matrix(&self, l: usize) -> &Array2<f64> {
        &self.matrices[l - 2]
    }

    pub fn matrices(&self) -> &[Array2<f64>] {
        &self.matrices
    }

    /// `ω ← γω + (1 − γ)·mean(ω̂)` with one mean per level over the batch.
    pub fn batch_edge_update(&mut self, batch: &[Vec<Array2<f64>>]) -> Result<()> {
        check_gamma(self.gamma)?;
        if batch.is_empty() {
            return Err(Error::config("edge update needs a non-empty batch"));
        }
        let mut means: Vec<Array2<f64>> = vec![Array2::zeros((self.r, self.r)); self.matrices.len()];
        for sample in batch {
            if sample.len() != self.matrices.len() {
                return Err(Error::shape(
                    "edge update level count",
                    self.matrices.len(),
                    sample.len(),
                ));
            }
            for (acc, m) in means.iter_mut().zip(sample) {
                if m.dim() != (self.r, self.r) {
                    return Err(Error::shape("edge update matrix", self.r, m.nrows()));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("non-finite correlation in edge update"));
                }
                *acc += m;
            }
        }
        let n = batch.len() as f64;
        let g = self.gamma;
        for (w, mean) in self.matrices.iter_mut().zip(&means) {
            w.zip_mut_with(mean, |w, m| *w = g * *w + (1.0 - g) * (m / n));
        }
        self.update_count += 1;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(EDGE_MAGIC);
        put_u32(&mut out, EDGE_VERSION);
        put_u32(&mut out, dim_u32(self.levels(), "levels")?);
        put_u32(&mut out, dim_u32(self.r, "r")?);
        put_f64(&mut out, self.gamma);
        put_u64(&mut out, self.update_count);
        for m in &self.matrices {
            put_f64s(&mut out, m.iter());
        }
        Ok(out)
    }

    pub(crate) fn read_from(rd: &mut ByteReader<'_>) -> Result<Self> {
        rd.magic(EDGE_MAGIC)?;
        rd.version(EDGE_VERSION)?;
        let at = rd.offset();
        let levels = rd.u32()? as usize;
        let r = rd.u32()? as usize;
        if levels == 0 || r == 0 {
            return Err(Error::Parse {
                offset: at,
                kind: ParseErrorKind::ZeroDimension,
            });
        }
        let gamma = rd.f64()?;
        let update_count = rd.u64()?;
        let per = (r as u64)
            .checked_mul(r as u64)
            .and_then(|v| v.checked_mul(8 * (levels as u64 - 1)))
            .ok_or(Error::Parse {
                offset: at,
                kind: ParseErrorKind::DimOverflow,
            })?;
        rd.require(per)?;
        let mut matrices = Vec::with_capacity(levels - 1);
        for _ in 1..levels {
            let data = rd.f64_vec(r * r)?;
            matrices.push(Array2::from_shape_vec((r, r), data).expect("r·r values"));
        }
        let mut store = Self::from_matrices(matrices, r, gamma).map_err(|e| Error::Parse {
            offset: at,
            kind: ParseErrorKind::Invalid(e.to_string()),
        })?;
        store.update_count = update_count;
        Ok(store)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let s = Self::read_from(&mut rd)?;
        rd.finish()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
