//! Top-down similarity inference.
//!
//! Each node above level 1 is blended with its rectified children:
//! `δ̂ˡ = Pˡδˡ + (I − Pˡ)W̃ˡδ̂ˡ⁻¹`, with `δ̂¹ = δ¹`. `Pˡ` holds the sigmoid-gated
//! reliabilities and `W̃ˡ` the top-k row-normalized dataset edges. The overall
//! dissimilarity is the sum of the rectified top level.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::codec::{dim_u32, put_f64s, put_u32, ByteReader};
use crate::error::{Error, ParseErrorKind, Result};
use crate::graph::{EdgeStore, RescaledStack};

pub const PARAMS_MAGIC: &[u8; 4] = b"AVSP";
pub const PARAMS_VERSION: u32 = 1;

/// Node-wise gating parameters `(αˡ, βˡ)` for levels `2..L` plus the top-k size.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceParams {
    pub(crate) alpha: Vec<Array1<f64>>,
    pub(crate) beta: Vec<Array1<f64>>,
    k: usize,
    r: usize,
}

impl InferenceParams {
    /// `α = 1`, `β = 0` everywhere.
    pub fn new(levels: usize, r: usize, k: usize) -> Result<Self> {
        if levels == 0 || r == 0 {
            return Err(Error::config("inference params need L >= 1 and r >= 1"));
        }
        Self::from_parts(
            vec![Array1::ones(r); levels - 1],
            vec![Array1::zeros(r); levels - 1],
            r,
            k,
        )
    }

    pub fn from_parts(
        alpha: Vec<Array1<f64>>,
        beta: Vec<Array1<f64>>,
        r: usize,
        k: usize,
    ) -> Result<Self> {
        if !(1..=r).contains(&k) {
            return Err(Error::config(format!("top-k {k} outside [1, {r}]")));
        }
        if alpha.len() != beta.len() {
            return Err(Error::shape("inference param levels", alpha.len(), beta.len()));
        }
        for v in alpha.iter().chain(&beta) {
            if v.len() != r {
                return Err(Error::shape("inference param length", r, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config("inference params must be finite"));
            }
        }
        Ok(Self { alpha, beta, k, r })
    }

    /// Parameters whose gates evaluate to exactly 1.0 in `f64`, so every node
    /// keeps its own value.
    pub fn fully_trusted(levels: usize, r: usize, k: usize) -> Result<Self> {
        Self::from_parts(
            vec![Array1::zeros(r); levels.saturating_sub(1)],
            vec![Array1::from_elem(r, 40.0); levels.saturating_sub(1)],
            r,
            k,
        )
    }

    pub fn levels(&self) -> usize {
        self.alpha.len() + 1
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self, level: usize) -> &Array1<f64> {
        &self.alpha[level - 2]
    }

    pub fn beta(&self, level: usize) -> &Array1<f64> {
        &self.beta[level - 2]
    }

    pub fn set_k(&mut self, k: usize) -> Result<()> {
        if !(1..=self.r).contains(&k) {
            return Err(Error::config(format!("top-k {k} outside [1, {}]", self.r)));
        }
        self.k = k;
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        put_u32(&mut out, PARAMS_VERSION);
        put_u32(&mut out, dim_u32(self.levels(), "levels")?);
        put_u32(&mut out, dim_u32(self.r, "r")?);
        put_u32(&mut out, dim_u32(self.k, "k")?);
        for (a, b) in self.alpha.iter().zip(&self.beta) {
            put_f64s(&mut out, a.iter());
            put_f64s(&mut out, b.iter());
        }
        Ok(out)
    }

    pub(crate) fn read_from(rd: &mut ByteReader<'_>) -> Result<Self> {
        rd.magic(PARAMS_MAGIC)?;
        rd.version(PARAMS_VERSION)?;
        let at = rd.offset();
        let levels = rd.u32()? as usize;
        let r = rd.u32()? as usize;
        let k = rd.u32()? as usize;
        if levels == 0 || r == 0 {
            return Err(Error::Parse {
                offset: at,
                kind: ParseErrorKind::ZeroDimension,
            });
        }
        let need = (r as u64)
            .checked_mul(16 * (levels as u64 - 1))
            .ok_or(Error::Parse {
                offset: at,
                kind: ParseErrorKind::DimOverflow,
            })?;
        rd.require(need)?;
        let mut alpha = Vec::with_capacity(levels - 1);
        let mut beta = Vec::with_capacity(levels - 1);
        for _ in 1..levels {
            alpha.push(Array1::from(rd.f64_vec(r)?));
            beta.push(Array1::from(rd.f64_vec(r)?));
        }
        Self::from_parts(alpha, beta, r, k).map_err(|e| Error::Parse {
            offset: at,
            kind: ParseErrorKind::Invalid(e.to_string()),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let p = Self::read_from(&mut rd)?;
        rd.finish()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate values `p` and the raw spread products `η` for one level.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityVector {
    pub values: Array1<f64>,
    pub raw: Array1<f64>,
}

/// `ηᵢ = std(ûᵢ)·std(û′ᵢ)`, `pᵢ = σ(αᵢηᵢ + βᵢ)` from precomputed CAM spreads.
pub fn reliability_from_spreads(
    spread_a: &Array1<f64>,
    spread_b: &Array1<f64>,
    alpha: &Array1<f64>,
    beta: &Array1<f64>,
) -> ReliabilityVector {
    let raw = spread_a * spread_b;
    let values = raw
        .iter()
        .zip(alpha.iter().zip(beta.iter()))
        .map(|(eta, (a, b))| sigmoid(a * eta + b))
        .collect();
    ReliabilityVector { values, raw }
}

/// Reliability of level `level` (`2..=L`) from both samples' rescaled CAMs.
pub fn compute_reliability(
    a: &RescaledStack,
    b: &RescaledStack,
    params: &InferenceParams,
    level: usize,
) -> Result<ReliabilityVector> {
    if !(2..=params.levels()).contains(&level) {
        return Err(Error::config(format!(
            "reliability is defined for levels 2..={}, got {level}",
            params.levels()
        )));
    }
    if a.vectors.nrows() != params.r() || b.vectors.nrows() != params.r() {
        return Err(Error::shape(
            "reliability node count",
            params.r(),
            a.vectors.nrows().min(b.vectors.nrows()),
        ));
    }
    Ok(reliability_from_spreads(
        &a.spreads(),
        &b.spreads(),
        params.alpha(level),
        params.beta(level),
    ))
}

/// Indices of the `k` largest entries, ties to the lower index, in ascending index order.
pub fn top_k_indices(row: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k.min(row.len()));
    order.sort_unstable();
    order
}

/// Masked, clamped, sum-normalized edge row. Falls back to uniform `1/k` over the
/// selection when nothing positive survives the clamp.
pub fn normalize_edges(row: ArrayView1<'_, f64>, selected: &[usize]) -> Array1<f64> {
    assert!(!selected.is_empty(), "edge selection must be non-empty");
    let mut out = Array1::zeros(row.len());
    let total: f64 = selected.iter().map(|&j| row[j].max(0.0)).sum();
    if total > 0.0 {
        for &j in selected {
            out[j] = row[j].max(0.0) / total;
        }
    } else {
        let u = 1.0 / selected.len() as f64;
        for &j in selected {
            out[j] = u;
        }
    }
    out
}

/// Row-normalized top-k edge matrices `W̃ˡ` for `l = 2..L`, derived once from a store.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedEdges {
    mats: Vec<Array2<f64>>,
}

impl NormalizedEdges {
    pub fn from_store(store: &EdgeStore, k: usize) -> Result<Self> {
        if !(1..=store.r()).contains(&k) {
            return Err(Error::config(format!("top-k {k} outside [1, {}]", store.r())));
        }
        let mats = store
            .matrices()
            .iter()
            .map(|w| {
                let mut m = Array2::zeros(w.dim());
                for (i, row) in w.rows().into_iter().enumerate() {
                    let sel = top_k_indices(row, k);
                    m.row_mut(i).assign(&normalize_edges(row, &sel));
                }
                m
            })
            .collect();
        Ok(Self { mats })
    }

    /// Takes already row-normalized matrices as-is.
    pub fn from_matrices(mats: Vec<Array2<f64>>) -> Self {
        Self { mats }
    }

    pub fn levels(&self) -> usize {
        self.mats.len() + 1
    }

    /// `W̃ˡ` for `2 ≤ l ≤ L`.
    pub fn matrix(&self, l: usize) -> &Array2<f64> {
        &self.mats[l - 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedNodes {
    /// `δ̂ˡ` for every level, bottom first.
    pub values: Vec<Array1<f64>>,
    /// `d̂ = Σᵢ δ̂ᴸᵢ`.
    pub overall: f64,
    /// `dˡ = Σᵢ δˡᵢ`, un-rectified.
    pub level_sums: Vec<f64>,
}

fn check_shapes(nodes: &[Array1<f64>], gates: &[Array1<f64>], edges: &NormalizedEdges) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::config("rectification needs at least one level"));
    }
    let r = nodes[0].len();
    if gates.len() + 1 != nodes.len() {
        return Err(Error::shape("reliability levels", nodes.len() - 1, gates.len()));
    }
    if edges.levels() != nodes.len() {
        return Err(Error::shape("edge levels", nodes.len(), edges.levels()));
    }
    for (i, n) in nodes.iter().enumerate() {
        if n.len() != r {
            return Err(Error::shape("node vector length", r, n.len()));
        }
        if i > 0 {
            if gates[i - 1].len() != r {
                return Err(Error::shape("reliability length", r, gates[i - 1].len()));
            }
            if edges.matrix(i + 1).dim() != (r, r) {
                return Err(Error::shape("edge matrix size", r, edges.matrix(i + 1).nrows()));
            }
        }
    }
    Ok(())
}

/// Matrix-form recursion. `gates[l − 2]` holds `pˡ` for `l = 2..L`.
pub fn rectify_with(
    nodes: &[Array1<f64>],
    gates: &[Array1<f64>],
    edges: &NormalizedEdges,
) -> Result<RectifiedNodes> {
    check_shapes(nodes, gates, edges)?;
    let mut values: Vec<Array1<f64>> = Vec::with_capacity(nodes.len());
    values.push(nodes[0].clone());
    for l in 2..=nodes.len() {
        let p = &gates[l - 2];
        let mixed = edges.matrix(l).dot(&values[l - 2]);
        let own = &nodes[l - 1];
        let next: Array1<f64> = p
            .iter()
            .zip(own.iter().zip(mixed.iter()))
            .map(|(p, (d, m))| p * d + (1.0 - p) * m)
            .collect();
        values.push(next);
    }
    let overall = values.last().unwrap().sum();
    let level_sums = nodes.iter().map(|n| n.sum()).collect();
    Ok(RectifiedNodes {
        values,
        overall,
        level_sums,
    })
}

/// Rectification against a raw edge store; normalizes edges with the params' `k`.
pub fn rectify(
    nodes: &[Array1<f64>],
    reliabilities: &[ReliabilityVector],
    store: &EdgeStore,
    params: &InferenceParams,
) -> Result<RectifiedNodes> {
    if store.levels() != nodes.len() || params.levels() != nodes.len() {
        return Err(Error::shape("rectify levels", nodes.len(), store.levels()));
    }
    let edges = NormalizedEdges::from_store(store, params.k())?;
    let gates: Vec<Array1<f64>> = reliabilities.iter().map(|r| r.values.clone()).collect();
    rectify_with(nodes, &gates, &edges)
}

/// `gˡ = ∂d̂/∂δ̂ˡ` for every level, bottom first: `gᴸ = 1`,
/// `gˡ⁻¹ = W̃ˡᵀ((1 − pˡ) ⊙ gˡ)`.
pub fn rectified_adjoints(
    r: usize,
    gates: &[Array1<f64>],
    edges: &NormalizedEdges,
) -> Vec<Array1<f64>> {
    let levels = gates.len() + 1;
    let mut adj = vec![Array1::zeros(r); levels];
    adj[levels - 1] = Array1::ones(r);
    for l in (2..=levels).rev() {
        let p = &gates[l - 2];
        let through: Array1<f64> = adj[l - 1]
            .iter()
            .zip(p.iter())
            .map(|(g, p)| g * (1.0 - p))
            .collect();
        adj[l - 2] = edges.matrix(l).t().dot(&through);
    }
    adj
}

/// `∂d̂/∂pˡᵢ = gˡᵢ(δˡᵢ − (W̃ˡδ̂ˡ⁻¹)ᵢ)` for `l = 2..L`.
pub fn gate_gradients(
    nodes: &[Array1<f64>],
    rectified: &RectifiedNodes,
    adjoints: &[Array1<f64>],
    edges: &NormalizedEdges,
) -> Vec<Array1<f64>> {
    (2..=nodes.len())
        .map(|l| {
            let mixed = edges.matrix(l).dot(&rectified.values[l - 2]);
            let diff = &nodes[l - 1] - &mixed;
            &adjoints[l - 1] * &diff
        })
        .collect()
}
