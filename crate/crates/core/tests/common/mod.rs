//! Random instances and reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simgraph::inference::reliability_from_spreads;
use simgraph::synth::LevelSpec;
use simgraph::{Config, EdgeStore, FeatureMap, InferenceParams, LossKind, ReliabilityVector, SynthSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random rectification problem: nodes, reliabilities, raw edges and params.
pub struct GraphInstance {
    pub nodes: Vec<Array1<f64>>,
    pub etas: Vec<Array1<f64>>,
    pub reliabilities: Vec<ReliabilityVector>,
    pub store: EdgeStore,
    pub params: InferenceParams,
}

impl GraphInstance {
    pub fn gates(&self) -> Vec<Array1<f64>> {
        self.reliabilities.iter().map(|r| r.values.clone()).collect()
    }

    pub fn r(&self) -> usize {
        self.params.r()
    }
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.random_range(lo..hi)))
}

/// Edges in `[-1, 1]`; about one row in ten is entirely non-positive so the
/// uniform fallback is exercised.
pub fn random_edges(rng: &mut ChaCha8Rng, r: usize) -> Array2<f64> {
    let mut w = Array2::from_shape_fn((r, r), |_| rng.random_range(-1.0..1.0));
    for mut row in w.rows_mut() {
        if rng.random_bool(0.1) {
            row.mapv_inplace(|v: f64| -v.abs());
        }
    }
    w
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_levels: usize, max_r: usize) -> GraphInstance {
    let levels = rng.random_range(1..=max_levels);
    let r = rng.random_range(1..=max_r);
    let k = rng.random_range(1..=r);
    let nodes = (0..levels).map(|_| random_vec(rng, r, 0.0, 4.0)).collect();
    let alpha: Vec<_> = (1..levels).map(|_| random_vec(rng, r, -30.0, 30.0)).collect();
    let beta: Vec<_> = (1..levels).map(|_| random_vec(rng, r, -4.0, 4.0)).collect();
    let params = InferenceParams::from_parts(alpha, beta, r, k).unwrap();
    let mut etas = Vec::new();
    let mut reliabilities = Vec::new();
    for l in 2..=levels {
        let sa = random_vec(rng, r, 0.0, 0.2);
        let sb = random_vec(rng, r, 0.0, 0.2);
        let rel = reliability_from_spreads(&sa, &sb, params.alpha(l), params.beta(l));
        etas.push(rel.raw.clone());
        reliabilities.push(rel);
    }
    let mats = (1..levels).map(|_| random_edges(rng, r)).collect();
    let store = EdgeStore::from_matrices(mats, r, 0.95).unwrap();
    GraphInstance {
        nodes,
        etas,
        reliabilities,
        store,
        params,
    }
}

/// Row-normalized top-k edges computed entry by entry.
pub fn scalar_normalized_edges(w: &Array2<f64>, k: usize) -> Array2<f64> {
    let r = w.nrows();
    let mut out = Array2::zeros((r, r));
    for i in 0..r {
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&a, &b| w[[i, b]].partial_cmp(&w[[i, a]]).unwrap().then(a.cmp(&b)));
        let chosen = &order[..k];
        let mut total = 0.0;
        for &j in chosen {
            if w[[i, j]] > 0.0 {
                total += w[[i, j]];
            }
        }
        for &j in chosen {
            out[[i, j]] = if total > 0.0 {
                w[[i, j]].max(0.0) / total
            } else {
                1.0 / k as f64
            };
        }
    }
    out
}

/// Node-by-node rectification recursion followed by the top-level sum.
pub fn scalar_rectify(inst: &GraphInstance) -> f64 {
    let r = inst.r();
    let levels = inst.nodes.len();
    let mut prev: Vec<f64> = inst.nodes[0].to_vec();
    for l in 2..=levels {
        let w = scalar_normalized_edges(inst.store.matrix(l), inst.params.k());
        let p = &inst.reliabilities[l - 2].values;
        let mut cur = vec![0.0; r];
        for i in 0..r {
            let mut mixed = 0.0;
            for j in 0..r {
                if w[[i, j]] != 0.0 {
                    mixed += w[[i, j]] * prev[j];
                }
            }
            cur[i] = p[i] * inst.nodes[l - 1][i] + (1.0 - p[i]) * mixed;
        }
        prev = cur;
    }
    let mut total = 0.0;
    for v in prev {
        total += v;
    }
    total
}

/// Sensitivities from the explicit coefficient matrices
/// `Λˡ = (I − Pᴸ)W̃ᴸ ⋯ (I − Pˡ⁺¹)W̃ˡ⁺¹ Pˡ` (with `P¹ = I`), as column sums.
pub fn explicit_sensitivities(inst: &GraphInstance) -> Vec<Array1<f64>> {
    let r = inst.r();
    let levels = inst.nodes.len();
    let diag = |v: &Array1<f64>| Array2::from_diag(v);
    let gate = |l: usize| -> Array2<f64> {
        if l == 1 {
            Array2::eye(r)
        } else {
            diag(&inst.reliabilities[l - 2].values)
        }
    };
    let mut out = vec![Array1::zeros(r); levels];
    let mut prefix: Array2<f64> = Array2::eye(r);
    for l in (1..=levels).rev() {
        let lam = prefix.dot(&gate(l));
        out[l - 1] = lam.sum_axis(ndarray::Axis(0));
        if l > 1 {
            let w = scalar_normalized_edges(inst.store.matrix(l), inst.params.k());
            let open = diag(&inst.reliabilities[l - 2].values.mapv(|p| 1.0 - p));
            prefix = prefix.dot(&open).dot(&w);
        }
    }
    out
}

/// Relative max-norm error between two gradient vectors.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Small synthetic benchmark for fast training tests.
pub fn tiny_config(loss: LossKind, seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.loss = loss;
    cfg.r = 6;
    cfg.k = 3;
    cfg.batch_size = 6;
    cfg.classes_per_batch = 3;
    cfg.epochs = 1;
    cfg.seed = seed;
    cfg.lr = 0.01;
    cfg.lr_inference = 0.1;
    cfg.synth = SynthSpec {
        levels: vec![
            LevelSpec {
                channels: 5,
                rows: 6,
                cols: 6,
                noise: 0.5,
                corruption: 0.3,
            },
            LevelSpec {
                channels: 6,
                rows: 4,
                cols: 4,
                noise: 0.5,
                corruption: 0.3,
            },
            LevelSpec {
                channels: 7,
                rows: 2,
                cols: 3,
                noise: 0.5,
                corruption: 0.3,
            },
        ],
        classes: 6,
        samples_per_class: 6,
        ..SynthSpec::default()
    };
    cfg.levels = 3;
    cfg.level_weights = vec![1.0; 3];
    cfg.validate().unwrap();
    cfg
}

/// A random feature map; with `ties`, values come from a small grid so channel
/// maxima repeat.
pub fn random_feature_map(rng: &mut ChaCha8Rng, ties: bool) -> FeatureMap {
    let c = rng.random_range(1..=6);
    let h = rng.random_range(1..=7);
    let w = rng.random_range(1..=7);
    let data = Array3::from_shape_fn((c, h, w), |_| {
        if ties {
            rng.random_range(-2i32..=2) as f32 * 0.5
        } else {
            rng.random_range(-3.0f32..3.0)
        }
    });
    FeatureMap::new(data, 1).unwrap()
}
