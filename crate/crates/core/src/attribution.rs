//! Per-node attribution of the overall dissimilarity.
//!
//! Unrolling the rectification makes `d̂` linear in the raw nodes:
//! `d̂ = Σₗ Σᵢ λˡᵢ δˡᵢ`. The coefficients are the adjoints of the recursion gated by
//! each level's reliability, and over the whole graph they sum to `r`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{CamStack, EdgeStore};
use crate::inference::{rectified_adjoints, InferenceParams, NormalizedEdges, ReliabilityVector};
use crate::model::PairGraph;

/// Sensitivities `λˡ` per level, bottom first.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityField {
    pub lambdas: Vec<Array1<f64>>,
}

impl SensitivityField {
    pub fn total(&self) -> f64 {
        self.lambdas.iter().map(|l| l.sum()).sum()
    }

    /// `λˡᵢ δˡᵢ` per node.
    pub fn contributions(&self, nodes: &[Array1<f64>]) -> Result<Vec<Array1<f64>>> {
        if nodes.len() != self.lambdas.len() {
            return Err(Error::shape("contribution levels", self.lambdas.len(), nodes.len()));
        }
        self.lambdas
            .iter()
            .zip(nodes)
            .map(|(l, d)| {
                if l.len() != d.len() {
                    return Err(Error::shape("contribution length", l.len(), d.len()));
                }
                Ok(l * d)
            })
            .collect()
    }

    /// `Σ λˡᵢ δˡᵢ`, which reproduces `d̂`.
    pub fn reconstruct(&self, nodes: &[Array1<f64>]) -> Result<f64> {
        Ok(self.contributions(nodes)?.iter().map(|c| c.sum()).sum())
    }
}

/// Sensitivities from gates `pˡ` (levels `2..L`) and normalized edges.
pub fn sensitivities_with(r: usize, gates: &[Array1<f64>], edges: &NormalizedEdges) -> Result<SensitivityField> {
    if edges.levels() != gates.len() + 1 {
        return Err(Error::shape("edge levels", gates.len() + 1, edges.levels()));
    }
    for (i, p) in gates.iter().enumerate() {
        if p.len() != r {
            return Err(Error::shape("reliability length", r, p.len()));
        }
        if edges.matrix(i + 2).dim() != (r, r) {
            return Err(Error::shape("edge matrix size", r, edges.matrix(i + 2).nrows()));
        }
    }
    let adj = rectified_adjoints(r, gates, edges);
    let lambdas = adj
        .into_iter()
        .enumerate()
        .map(|(i, g)| if i == 0 { g } else { &gates[i - 1] * &g })
        .collect();
    Ok(SensitivityField { lambdas })
}

pub fn compute_sensitivities(
    reliabilities: &[ReliabilityVector],
    store: &EdgeStore,
    params: &InferenceParams,
) -> Result<SensitivityField> {
    if store.levels() != reliabilities.len() + 1 || params.levels() != store.levels() {
        return Err(Error::shape("sensitivity levels", store.levels(), reliabilities.len() + 1));
    }
    let edges = NormalizedEdges::from_store(store, params.k())?;
    let gates: Vec<Array1<f64>> = reliabilities.iter().map(|r| r.values.clone()).collect();
    sensitivities_with(params.r(), &gates, &edges)
}

/// Ordering applied to attribution records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    /// Most reliable first.
    Reliability,
    /// Most similar (smallest `δ`) first.
    NodeValue,
    /// Largest `λδ` first.
    Contribution,
    /// The `top_n` most reliable nodes, then ordered by node value.
    ReliableThenValue,
}

impl std::str::FromStr for RankKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reliability" => Ok(Self::Reliability),
            "node_value" => Ok(Self::NodeValue),
            "contribution" => Ok(Self::Contribution),
            "reliable_then_value" | "default" => Ok(Self::ReliableThenValue),
            other => Err(Error::config(format!("unknown ranking key '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeRecord {
    pub level: usize,
    pub index: usize,
    pub delta: f64,
    /// Gate value; level-1 nodes are ungated and report 1.
    pub p: f64,
    pub lambda: f64,
    pub contribution: f64,
    pub cam_files: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NodeRef {
    pub level: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionReport {
    pub pair: [String; 2],
    pub overall_similarity: f64,
    pub key: RankKey,
    pub nodes: Vec<NodeRecord>,
    /// Smallest `δ` among the reported nodes.
    pub most_similar: Option<NodeRef>,
    /// Largest `δ` among the reported nodes.
    pub most_dissimilar: Option<NodeRef>,
}

impl AttributionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

fn by_level_index(a: &NodeRecord, b: &NodeRecord) -> std::cmp::Ordering {
    (a.level, a.index).cmp(&(b.level, b.index))
}

fn sort_records(records: &mut [NodeRecord], key: RankKey) {
    match key {
        RankKey::Reliability | RankKey::ReliableThenValue => {
            records.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| by_level_index(a, b)))
        }
        RankKey::NodeValue => {
            records.sort_by(|a, b| a.delta.total_cmp(&b.delta).then_with(|| by_level_index(a, b)))
        }
        RankKey::Contribution => records.sort_by(|a, b| {
            b.contribution
                .total_cmp(&a.contribution)
                .then_with(|| by_level_index(a, b))
        }),
    }
}

/// Ranks every node of a pair graph and keeps `top_n` records.
pub fn rank_nodes(
    pair: [String; 2],
    graph: &PairGraph,
    sensitivities: &SensitivityField,
    overall: f64,
    key: RankKey,
    top_n: usize,
) -> Result<AttributionReport> {
    let contributions = sensitivities.contributions(&graph.nodes)?;
    let mut records = Vec::new();
    for (li, delta) in graph.nodes.iter().enumerate() {
        for (i, &d) in delta.iter().enumerate() {
            let p = if li == 0 {
                1.0
            } else {
                graph.reliabilities[li - 1].values[i]
            };
            records.push(NodeRecord {
                level: li + 1,
                index: i,
                delta: d,
                p,
                lambda: sensitivities.lambdas[li][i],
                contribution: contributions[li][i],
                cam_files: Vec::new(),
            });
        }
    }
    if top_n > records.len() {
        return Err(Error::config(format!(
            "top_n {top_n} exceeds the {} nodes of the graph",
            records.len()
        )));
    }
    sort_records(&mut records, key);
    records.truncate(top_n);
    if key == RankKey::ReliableThenValue {
        sort_records(&mut records, RankKey::NodeValue);
    }
    let extreme = |pick_max: bool| {
        records
            .iter()
            .min_by(|a, b| {
                let ord = a.delta.total_cmp(&b.delta);
                let ord = if pick_max { ord.reverse() } else { ord };
                ord.then_with(|| by_level_index(a, b))
            })
            .map(|r| NodeRef {
                level: r.level,
                index: r.index,
            })
    };
    let most_similar = extreme(false);
    let most_dissimilar = extreme(true);
    Ok(AttributionReport {
        pair,
        overall_similarity: overall,
        key,
        nodes: records,
        most_similar,
        most_dissimilar,
    })
}

/// Min–max scales a map to bytes; a constant map becomes mid-gray.
pub fn to_graymap(map: ArrayView2<'_, f64>) -> Vec<u8> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; map.len()];
    }
    map.iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}

pub fn write_pgm(path: &Path, map: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(to_graymap(map));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_f32_sidecar(path: &Path, map: ArrayView2<'_, f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut out = Vec::with_capacity(16 + 4 * map.len());
    writeln!(out, "{h} {w}").expect("writing to a Vec");
    for &v in map.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_f32_sidecar(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::config(format!("{}: {msg}", path.display()));
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let mut dims = header.split_whitespace().map(str::parse::<usize>);
    let (h, w) = match (dims.next(), dims.next(), dims.next()) {
        (Some(Ok(h)), Some(Ok(w)), None) => (h, w),
        _ => return Err(bad("header must be 'h w'")),
    };
    let body = &bytes[nl + 1..];
    if Some(body.len()) != h.checked_mul(w).and_then(|n| n.checked_mul(4)) {
        return Err(bad("payload size does not match header"));
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("size checked"))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes both samples' CAMs for each `(level, index)` node as PGM plus `.f32`
/// sidecar and returns the two PGM paths per node.
pub fn export_saliency(
    pair: &[String; 2],
    cams: [&[CamStack]; 2],
    nodes: &[NodeRef],
    dir: &Path,
) -> Result<Vec<[PathBuf; 2]>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{}__{}", file_safe(&pair[0]), file_safe(&pair[1]));
    let mut written = Vec::with_capacity(nodes.len());
    for node in nodes {
        let mut paths: [PathBuf; 2] = Default::default();
        for (side, stacks) in cams.iter().enumerate() {
            let stack = stacks
                .get(node.level.wrapping_sub(1))
                .ok_or_else(|| Error::config(format!("no level {} in CAM stack", node.level)))?;
            if node.index >= stack.len() {
                return Err(Error::config(format!(
                    "node {} out of range at level {}",
                    node.index, node.level
                )));
            }
            let map = stack.map(node.index);
            let base = dir.join(format!(
                "{stem}_l{}_n{:03}_{}",
                node.level,
                node.index,
                ["a", "b"][side]
            ));
            let pgm = base.with_extension("pgm");
            write_pgm(&pgm, map)?;
            write_f32_sidecar(&base.with_extension("f32"), map)?;
            paths[side] = pgm;
        }
        written.push(paths);
    }
    Ok(written)
}
