//! Shared fixtures for the benchmarks.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simgraph::inference::reliability_from_spreads;
use simgraph::model::{prepare_all, EncodedSample, Model};
use simgraph::synth::synthesize_pyramid;
use simgraph::{Config, EdgeStore, InferenceParams, ReliabilityVector};

/// A rectification problem with `levels` levels of `r` nodes.
pub struct Graph {
    pub nodes: Vec<Array1<f64>>,
    pub reliabilities: Vec<ReliabilityVector>,
    pub store: EdgeStore,
    pub params: InferenceParams,
}

pub fn graph(levels: usize, r: usize, k: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vec = |lo: f64, hi: f64| Array1::from_iter((0..r).map(|_| rng.random_range(lo..hi)));
    let nodes: Vec<_> = (0..levels).map(|_| vec(0.0, 4.0)).collect();
    let alpha: Vec<_> = (1..levels).map(|_| vec(-30.0, 30.0)).collect();
    let beta: Vec<_> = (1..levels).map(|_| vec(-4.0, 4.0)).collect();
    let spreads: Vec<_> = (1..levels).map(|_| (vec(0.0, 0.2), vec(0.0, 0.2))).collect();
    let params = InferenceParams::from_parts(alpha, beta, r, k).unwrap();
    let reliabilities = spreads
        .iter()
        .enumerate()
        .map(|(i, (a, b))| reliability_from_spreads(a, b, params.alpha(i + 2), params.beta(i + 2)))
        .collect();
    let mats = (1..levels)
        .map(|_| Array2::from_shape_fn((r, r), |_| rng.random_range(-1.0..1.0)))
        .collect();
    Graph {
        nodes,
        reliabilities,
        store: EdgeStore::from_matrices(mats, r, 0.95).unwrap(),
        params,
    }
}

/// `n` synthetic samples encoded by an untrained model with `r` nodes.
pub fn encoded(n: usize, r: usize, k: usize) -> (Model, Vec<EncodedSample>) {
    let spec = Config::default().synth;
    let pyramids: Vec<_> = (0..n)
        .map(|i| synthesize_pyramid(&spec, 0, (i % 8) as u32, i).unwrap())
        .collect();
    let samples = prepare_all(&pyramids);
    let model = Model::init(&samples[0].channels(), r, k, 0.95, 0).unwrap();
    let enc = model.encode_all(&samples).unwrap();
    (model, enc)
}
