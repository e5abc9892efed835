//! Acceptance criteria, one line of output each. Run with `cargo test --test acceptance`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;

use common::*;
use simgraph::ablation::{default_k_values, run_ablation, run_sweep, synthetic_split, AblationVariant, SweepAxis};
use simgraph::attribution::compute_sensitivities;
use simgraph::eval::{evaluate, recall_at_k, recall_from_matrix, similarity_matrix, sliced_similarity};
use simgraph::inference::{rectify, reliability_from_spreads, NormalizedEdges};
use simgraph::losses::{margin_loss, proxy_anchor_loss, LabeledDistance, MarginLossConfig, ProxyAnchorConfig};
use simgraph::model::{prepare_all, Model, PairScorer, PreparedSample, Scoring};
use simgraph::synth::synthesize_pyramid;
use simgraph::training::{overall_objective, rectified_gradient, LossHead, TrainOptions, TrainState};
use simgraph::{
    compute_cams, linearize_map, pool_and_project, Config, EdgeStore, InferenceParams, LossKind,
    ProjectionLayer,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn conservation() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(11);
    let mut worst = 0.0f64;
    let mut worst_oracle = 0.0f64;
    for n in 0..1000 {
        let inst = random_instance(&mut rng, 4, 64);
        let s = compute_sensitivities(&inst.reliabilities, &inst.store, &inst.params).map_err(|e| e.to_string())?;
        let r = inst.r() as f64;
        let err = (s.total() - r).abs() / r;
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("instance {n}: Σλ = {} for r = {r}", s.total()))?;
        ensure(s.lambdas.iter().flatten().all(|&l| l >= 0.0), || format!("instance {n}: negative λ"))?;
        let oracle = explicit_sensitivities(&inst);
        for (a, b) in s.lambdas.iter().zip(&oracle) {
            worst_oracle = worst_oracle.max(rel_err(a.as_slice().unwrap(), b.as_slice().unwrap()));
        }
    }
    ensure(worst_oracle <= 1e-9, || format!("λ disagrees with explicit products by {worst_oracle:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "1000 instances, max |Σλ − r|/r = {worst:.1e}, max λ vs explicit products = {worst_oracle:.1e}, {secs:.2}s"
    ))
}

fn reconstruction() -> Outcome {
    let mut rng = rng(11);
    let mut worst = 0.0f64;
    for n in 0..1000 {
        let inst = random_instance(&mut rng, 4, 64);
        let s = compute_sensitivities(&inst.reliabilities, &inst.store, &inst.params).map_err(|e| e.to_string())?;
        let d = rectify(&inst.nodes, &inst.reliabilities, &inst.store, &inst.params)
            .map_err(|e| e.to_string())?
            .overall;
        let rec = s.reconstruct(&inst.nodes).map_err(|e| e.to_string())?;
        let err = (rec - d).abs() / d.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("instance {n}: Σλδ = {rec}, d̂ = {d}"))?;
    }
    Ok(format!("1000 instances, max relative error {worst:.1e}"))
}

fn matrix_scalar() -> Outcome {
    let mut rng = rng(23);
    let mut worst = 0.0f64;
    for n in 0..500 {
        let inst = random_instance(&mut rng, 4, 8);
        let matrix = rectify(&inst.nodes, &inst.reliabilities, &inst.store, &inst.params)
            .map_err(|e| e.to_string())?
            .overall;
        let scalar = scalar_rectify(&inst);
        let err = (matrix - scalar).abs();
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("instance {n}: matrix {matrix} vs scalar {scalar}"))?;
    }
    Ok(format!("500 instances (r ≤ 8), max |difference| {worst:.1e}"))
}

fn degeneracy() -> Outcome {
    let spec = Config::default().synth;
    let mut rng = rng(5);
    for n in 0..100 {
        let a = PreparedSample::new(&synthesize_pyramid(&spec, n, rng.random_range(0..16), rng.random_range(0..40)).unwrap());
        let b = PreparedSample::new(&synthesize_pyramid(&spec, n, rng.random_range(0..16), rng.random_range(0..40)).unwrap());
        let r = rng.random_range(2..=32);
        let k = rng.random_range(1..=r);
        let mut model = Model::init(&a.channels(), r, k, 0.95, n).unwrap();
        model.edges = EdgeStore::from_matrices(vec![random_edges(&mut rng, r), random_edges(&mut rng, r)], r, 0.95).unwrap();
        model.params = InferenceParams::fully_trusted(3, r, k).unwrap();
        let (ea, eb) = (model.encode(&a, false).unwrap(), model.encode(&b, false).unwrap());
        let rect = PairScorer::new(&model, Scoring::Rectified).unwrap().score(&ea, &eb);
        let top = PairScorer::new(&model, Scoring::TopLevel).unwrap().score(&ea, &eb);
        ensure(rect == top, || format!("pair {n}: d̂ = {rect:e}, Σδᴸ = {top:e}"))?;
    }
    Ok("100 synthetic pairs, d̂ == Σδᴸ bit-exactly with all p = 1".into())
}

fn pooling() -> Outcome {
    let mut rng = rng(31);
    let mut worst_mean = 0.0f64;
    let mut worst_commute = 0.0f64;
    let mut tied = 0;
    for n in 0..200 {
        let ties = n % 2 == 0;
        let map = random_feature_map(&mut rng, ties);
        let lin = linearize_map(&map);
        let means = lin.channel_means();
        let (c, h, w) = map.dims();
        for ch in 0..c {
            let vals: Vec<f64> = map.data().index_axis(ndarray::Axis(0), ch).iter().map(|&v| v as f64).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if vals.iter().filter(|&&v| v == max).count() > 1 {
                tied += 1;
            }
            let expected = max + vals.iter().sum::<f64>() / vals.len() as f64;
            let scale = max.abs() + vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64;
            let err = (means[ch] - expected).abs() / scale.max(f64::MIN_POSITIVE);
            worst_mean = worst_mean.max(err);
            ensure(err <= 1e-9, || format!("map {n} channel {ch}: {} vs {expected}", means[ch]))?;
        }
        let r = rng.random_range(1..=5);
        let a = Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let proj = ProjectionLayer::new(a.clone(), 1).unwrap();
        let pooled = pool_and_project(&lin, &proj).map_err(|e| e.to_string())?;
        let cams = compute_cams(&lin, &proj).map_err(|e| e.to_string())?;
        for i in 0..r {
            let cam_mean = cams.map(i).sum() / (h * w) as f64;
            let scale: f64 = a.row(i).iter().zip(means.iter()).map(|(x, y)| (x * y).abs()).sum();
            let err = (pooled.values[i] - cam_mean).abs() / scale.max(f64::MIN_POSITIVE);
            worst_commute = worst_commute.max(err);
            ensure(err <= 1e-9, || format!("map {n} node {i}: {} vs {cam_mean}", pooled.values[i]))?;
        }
    }
    ensure(tied > 0, || "no tied maxima generated".into())?;
    Ok(format!(
        "200 maps ({tied} channels with tied maxima), max rel error: mean {worst_mean:.1e}, commutation {worst_commute:.1e}"
    ))
}

fn theta2_pair_check(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64, String> {
    let inst = loop {
        let i = random_instance(rng, 4, 12);
        if i.nodes.len() > 1 {
            break i;
        }
    };
    let edges = NormalizedEdges::from_store(&inst.store, inst.params.k()).unwrap();
    let grad = rectified_gradient(&inst.nodes, &inst.etas, &inst.gates(), &edges).map_err(|e| e.to_string())?;
    let levels = inst.nodes.len();
    let value = |alpha: &[Array1<f64>], beta: &[Array1<f64>]| -> f64 {
        let gates: Vec<Array1<f64>> = (0..levels - 1)
            .map(|i| {
                let ones = Array1::ones(inst.r());
                reliability_from_spreads(&inst.etas[i], &ones, &alpha[i], &beta[i]).values
            })
            .collect();
        simgraph::rectify_with(&inst.nodes, &gates, &edges).unwrap().overall
    };
    let alpha: Vec<Array1<f64>> = (2..=levels).map(|l| inst.params.alpha(l).clone()).collect();
    let beta: Vec<Array1<f64>> = (2..=levels).map(|l| inst.params.beta(l).clone()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for which in 0..2 {
        for li in 0..levels - 1 {
            for i in 0..inst.r() {
                let h = 1e-5;
                let (mut ap, mut bp) = (alpha.clone(), beta.clone());
                let (mut am, mut bm) = (alpha.clone(), beta.clone());
                if which == 0 {
                    ap[li][i] += h;
                    am[li][i] -= h;
                    analytic.push(grad.d_alpha[li][i]);
                } else {
                    bp[li][i] += h;
                    bm[li][i] -= h;
                    analytic.push(grad.d_beta[li][i]);
                }
                numeric.push((value(&ap, &bp) - value(&am, &bm)) / (2.0 * h));
            }
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn theta2_objective_check(seed: u64) -> Result<f64, String> {
    let cfg = tiny_config(LossKind::ProxyAnchor, seed);
    let (train_set, _) = synthetic_split(&cfg, seed).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(cfg.clone(), &train_set[0].channels(), train_set.iter().map(|s| s.label).collect(), TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let mut rng = rng(seed);
    let r = cfg.r;
    state.model.edges = EdgeStore::from_matrices(vec![random_edges(&mut rng, r), random_edges(&mut rng, r)], r, 0.95).unwrap();
    let alpha: Vec<Array1<f64>> = (0..2).map(|_| random_vec(&mut rng, r, 0.0, 40.0)).collect();
    let beta: Vec<Array1<f64>> = (0..2).map(|_| random_vec(&mut rng, r, -2.0, 2.0)).collect();
    let batch_idx: Vec<usize> = (0..train_set.len()).step_by(3).collect();
    let encoded: Vec<_> = batch_idx.iter().map(|&i| state.model.encode(&train_set[i], false).unwrap()).collect();
    let objective = |model: &Model| overall_objective(model, &state.head, &state.classes, &cfg, &encoded).unwrap();
    let mut model = state.model.clone();
    model.params = InferenceParams::from_parts(alpha.clone(), beta.clone(), r, cfg.k).unwrap();
    let at = objective(&model);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for which in 0..2 {
        for li in 0..2 {
            for i in 0..r {
                let h = 1e-5;
                let eval = |sign: f64| {
                    let (mut a, mut b) = (alpha.clone(), beta.clone());
                    if which == 0 {
                        a[li][i] += sign * h;
                    } else {
                        b[li][i] += sign * h;
                    }
                    let mut m = model.clone();
                    m.params = InferenceParams::from_parts(a, b, r, cfg.k).unwrap();
                    objective(&m).loss
                };
                numeric.push((eval(1.0) - eval(-1.0)) / (2.0 * h));
                analytic.push(if which == 0 { at.grad.alpha[li][i] } else { at.grad.beta[li][i] });
            }
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn margin_check(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64, String> {
    loop {
        let classes = rng.random_range(1..=3);
        let n = rng.random_range(2..=8);
        let beta = random_vec(rng, classes, 0.5, 1.5);
        let pairs: Vec<LabeledDistance> = (0..n)
            .map(|_| LabeledDistance {
                distance: rng.random_range(0.0..2.0),
                anchor_class: rng.random_range(0..classes),
                positive: rng.random_bool(0.5),
            })
            .collect();
        let cfg = MarginLossConfig {
            alpha_margin: 0.2,
            beta_class: beta.clone(),
        };
        let near_kink = pairs.iter().any(|p| {
            let b = beta[p.anchor_class];
            let slack = if p.positive { p.distance - (b - 0.2) } else { (b + 0.2) - p.distance };
            slack.abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let out = margin_loss(&pairs, &cfg).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for i in 0..n {
            let f = |s: f64| {
                let mut p = pairs.clone();
                p[i].distance += s * h;
                margin_loss(&p, &cfg).unwrap().loss
            };
            analytic.push(out.grad_distance[i]);
            numeric.push((f(1.0) - f(-1.0)) / (2.0 * h));
        }
        for c in 0..classes {
            let f = |s: f64| {
                let mut c2 = cfg.clone();
                c2.beta_class[c] += s * h;
                margin_loss(&pairs, &c2).unwrap().loss
            };
            analytic.push(out.grad_beta[c]);
            numeric.push((f(1.0) - f(-1.0)) / (2.0 * h));
        }
        return Ok(rel_err(&analytic, &numeric));
    }
}

/// Textbook evaluation of the dissimilarity-form ProxyAnchor loss.
fn proxy_anchor_direct(d: &Array2<f64>, labels: &[usize], cfg: &ProxyAnchorConfig) -> f64 {
    let (n, c) = d.dim();
    let with_pos: Vec<usize> = (0..c).filter(|p| labels.contains(p)).collect();
    let mut pos = 0.0;
    for &p in &with_pos {
        let s: f64 = (0..n).filter(|&x| labels[x] == p).map(|x| (cfg.scale * (d[[x, p]] - (cfg.beta - cfg.tau))).exp()).sum();
        pos += (1.0 + s).ln();
    }
    if !with_pos.is_empty() {
        pos /= with_pos.len() as f64;
    }
    let mut neg = 0.0;
    for p in 0..c {
        let s: f64 = (0..n).filter(|&x| labels[x] != p).map(|x| (-cfg.scale * (d[[x, p]] - (cfg.beta + cfg.tau))).exp()).sum();
        neg += (1.0 + s).ln();
    }
    pos + neg / c as f64
}

fn proxy_check(rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64, String> {
    let cfg = ProxyAnchorConfig::default();
    let d = Array2::from_shape_fn((4, 3), |_| rng.random_range(1.0..3.0));
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let out = proxy_anchor_loss(&d, &labels, &cfg).map_err(|e| e.to_string())?;
    let direct = proxy_anchor_direct(&d, &labels, &cfg);
    ensure((out.loss - direct).abs() <= 1e-10 * direct.abs().max(1.0), || format!("loss {} vs textbook {direct}", out.loss))?;
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for x in 0..4 {
        for p in 0..3 {
            let f = |s: f64| {
                let mut d2 = d.clone();
                d2[[x, p]] += s * h;
                proxy_anchor_direct(&d2, &labels, &cfg)
            };
            analytic.push(out.grad[[x, p]]);
            numeric.push((f(1.0) - f(-1.0)) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn theta1_check(seed: u64) -> Result<f64, String> {
    let cfg = tiny_config(LossKind::ProxyAnchor, seed);
    let (train_set, _) = synthetic_split(&cfg, seed).map_err(|e| e.to_string())?;
    let state = TrainState::new(cfg.clone(), &train_set[0].channels(), train_set.iter().map(|s| s.label).collect(), TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let batch: Vec<&PreparedSample> = train_set.iter().step_by(4).collect();
    let grads = state.construction_gradients(&batch).map_err(|e| e.to_string())?;
    let mut rng = rng(seed ^ 0xfeed);
    let h = 1e-5;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..12 {
        let l = rng.random_range(0..cfg.levels);
        let (rows, cols) = state.model.projections[l].weights().dim();
        let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let f = |s: f64| {
            let mut st = state.clone();
            let mut w = st.model.projections[l].weights().clone();
            w[[i, j]] += s * h;
            st.model.projections[l] = ProjectionLayer::new(w, l + 1).unwrap();
            st.construction_loss(&batch).unwrap()
        };
        analytic.push(grads.projections[l][[i, j]]);
        numeric.push((f(1.0) - f(-1.0)) / (2.0 * h));
    }
    let LossHead::ProxyAnchor { proxies } = &grads.head else {
        return Err("expected a proxy head".into());
    };
    for _ in 0..12 {
        let l = rng.random_range(0..cfg.levels);
        let (rows, cols) = proxies[l].dim();
        let (i, j) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let f = |s: f64| {
            let mut st = state.clone();
            if let LossHead::ProxyAnchor { proxies } = &mut st.head {
                proxies[l][[i, j]] += s * h;
            }
            st.construction_loss(&batch).unwrap()
        };
        analytic.push(proxies[l][[i, j]]);
        numeric.push((f(1.0) - f(-1.0)) / (2.0 * h));
    }
    Ok(rel_err(&analytic, &numeric))
}

fn gradients() -> Outcome {
    let mut rng = rng(47);
    let mut worst_pair = 0.0f64;
    for n in 0..100 {
        let e = theta2_pair_check(&mut rng)?;
        worst_pair = worst_pair.max(e);
        ensure(e <= 1e-6, || format!("θ₂ instance {n}: relative error {e:e}"))?;
    }
    let mut worst_obj = 0.0f64;
    for seed in 0..10 {
        let e = theta2_objective_check(seed)?;
        worst_obj = worst_obj.max(e);
        ensure(e <= 1e-6, || format!("θ₂ objective seed {seed}: relative error {e:e}"))?;
    }
    let mut worst_loss = 0.0f64;
    for n in 0..100 {
        let e = margin_check(&mut rng)?.max(proxy_check(&mut rng)?);
        worst_loss = worst_loss.max(e);
        ensure(e <= 1e-4, || format!("loss instance {n}: relative error {e:e}"))?;
    }
    let mut worst_theta1 = 0.0f64;
    for seed in 0..10 {
        let e = theta1_check(seed)?;
        worst_theta1 = worst_theta1.max(e);
        ensure(e <= 1e-4, || format!("θ₁ seed {seed}: relative error {e:e}"))?;
    }
    Ok(format!(
        "θ₂: 100 pair instances {worst_pair:.1e}, 10 batch objectives {worst_obj:.1e} (≤ 1e-6); losses: 100 instances {worst_loss:.1e}, θ₁ backprop {worst_theta1:.1e} (≤ 1e-4)"
    ))
}

fn isolation() -> Outcome {
    for loss in [LossKind::Margin, LossKind::ProxyAnchor] {
        let cfg = tiny_config(loss, 3);
        let (train_set, _) = synthetic_split(&cfg, 3).map_err(|e| e.to_string())?;
        let labels: Vec<u32> = train_set.iter().map(|s| s.label).collect();
        let mut sampler = simgraph::sampler::BatchSampler::new(&labels, cfg.batch_size, cfg.classes_per_batch, 1).unwrap();
        let batches: Vec<Vec<usize>> = (0..10).map(|_| sampler.next_batch()).collect();
        for (options, frozen) in [
            (TrainOptions { overall_loss: false, ..TrainOptions::default() }, "θ₂"),
            (TrainOptions { level_loss: false, ..TrainOptions::default() }, "θ₁"),
        ] {
            let mut state = TrainState::new(cfg.clone(), &train_set[0].channels(), labels.clone(), options).unwrap();
            let snapshot = |s: &TrainState| if frozen == "θ₂" { s.theta2_bytes().unwrap() } else { s.theta1_bytes().unwrap() };
            let moving = |s: &TrainState| if frozen == "θ₂" { s.theta1_bytes().unwrap() } else { s.theta2_bytes().unwrap() };
            let (before, before_other) = (snapshot(&state), moving(&state));
            for b in &batches {
                let samples: Vec<&PreparedSample> = b.iter().map(|&i| &train_set[i]).collect();
                state.objective_step(&samples).map_err(|e| e.to_string())?;
            }
            ensure(snapshot(&state) == before, || format!("{} loss: {frozen} changed", loss.name()))?;
            ensure(moving(&state) != before_other, || format!("{} loss: the other block did not train", loss.name()))?;
        }
    }
    Ok("10 steps, both losses: θ₂ byte-identical without L^f, θ₁ byte-identical without level losses".into())
}

fn momentum() -> Outcome {
    let mut rng = rng(59);
    let mut worst = 0.0f64;
    for &gamma in &[0.5, 0.95, 0.0, 1.0] {
        let r = 5;
        let w0 = random_edges(&mut rng, r);
        let c = random_edges(&mut rng, r);
        let mut store = EdgeStore::from_matrices(vec![w0.clone()], r, gamma).unwrap();
        let batch = vec![vec![c.clone()]; 4];
        for t in 1..=100 {
            store.batch_edge_update(&batch).unwrap();
            let g = gamma.powi(t);
            let expected = &w0 * g + &c * (1.0 - g);
            let err = (store.matrix(2) - &expected).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            worst = worst.max(err);
            ensure(err <= 1e-12, || format!("γ = {gamma}, t = {t}: error {err:e}"))?;
        }
    }
    Ok(format!("γ ∈ {{0.5, 0.95, 0, 1}}, t ≤ 100, max error {worst:.1e}"))
}

fn oracle_recall(d: &Array2<f64>, labels: &[u32], ks: &[usize]) -> Vec<f64> {
    let n = labels.len();
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut gallery: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        gallery.sort_by(|&a, &b| d[[q, a]].partial_cmp(&d[[q, b]]).unwrap().then(a.cmp(&b)));
        for (h, &k) in hits.iter_mut().zip(ks) {
            if gallery[..k].iter().any(|&j| labels[j] == labels[q]) {
                *h += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / n as f64).collect()
}

fn retrieval() -> Outcome {
    let mut rng = rng(61);
    for n in 0..50 {
        let size = rng.random_range(2..=30);
        let classes = rng.random_range(1..=5);
        let labels: Vec<u32> = (0..size).map(|_| rng.random_range(0..classes)).collect();
        let d = Array2::from_shape_fn((size, size), |_| rng.random_range(0..6) as f64 * 0.25);
        let ks: Vec<usize> = (1..size).filter(|k| k.is_power_of_two()).collect();
        let got = recall_from_matrix(&d, &labels, &ks).map_err(|e| e.to_string())?;
        let want = oracle_recall(&d, &labels, &ks);
        ensure(got.recalls == want, || format!("dataset {n}: {:?} vs oracle {want:?}", got.recalls))?;
    }
    let spec = Config::default().synth;
    for n in 0..5u64 {
        let size = 12 + 3 * n as usize;
        let pyramids: Vec<_> = (0..size)
            .map(|i| synthesize_pyramid(&spec, n, (i % 4) as u32, i).unwrap())
            .collect();
        let samples = prepare_all(&pyramids);
        let mut model = Model::init(&samples[0].channels(), 8, 3, 0.95, n).unwrap();
        model.edges = EdgeStore::from_matrices(vec![random_edges(&mut rng, 8), random_edges(&mut rng, 8)], 8, 0.95).unwrap();
        let encoded = model.encode_all(&samples).unwrap();
        let scorer = PairScorer::new(&model, Scoring::Rectified).unwrap();
        let labels: Vec<u32> = samples.iter().map(|s| s.label).collect();
        let full = similarity_matrix(&encoded, &scorer, size).unwrap();
        let full_recall = recall_from_matrix(&full, &labels, &[1, 2, 4]).unwrap();
        for rows in [1, 3, size] {
            let m = similarity_matrix(&encoded, &scorer, rows).unwrap();
            let same = m.iter().zip(full.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("slice_rows = {rows} changed the matrix"))?;
            let rec = recall_at_k(sliced_similarity(&encoded, &scorer, rows).unwrap(), &labels, &[1, 2, 4]).unwrap();
            ensure(rec == full_recall, || format!("slice_rows = {rows} changed recall"))?;
        }
    }
    Ok("50 toy datasets match the sort oracle; slices {1, 3, N} bit-identical on 5 encoded sets".into())
}

fn trend_config() -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic_trend.cfg");
    Config::load(&path).expect("experiment config")
}

fn trend() -> Outcome {
    let start = Instant::now();
    let cfg = trend_config();
    let seeds = [0u64, 1, 2];
    let test_classes = cfg.synth.classes - cfg.synth.classes / 2;
    ensure(test_classes >= 8 && cfg.synth.samples_per_class >= 40, || "benchmark below the required size".into())?;
    let table = run_ablation(&cfg, &AblationVariant::ALL, &seeds, &[1], 64).map_err(|e| e.to_string())?;
    let r1 = |name: &str| 100.0 * table.row(name).unwrap().mean_std(0).0;
    let (full, multi, base) = (r1("full_avsl"), r1("multi_layer"), r1("baseline_top_level"));

    let mut single_best = 0.0f64;
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let (train_set, test_set) = synthetic_split(&c, seed).unwrap();
        let model = simgraph::training::train(&c, &train_set, TrainOptions::default()).unwrap().0.model;
        for l in 1..=c.levels {
            let r = evaluate(&model, &test_set, Scoring::SingleLevel(l), &[1], 64).unwrap();
            single_best = single_best.max(100.0 * r.recalls[0]);
        }
    }

    let ks = default_k_values(cfg.r);
    let sweep = run_sweep(&cfg, SweepAxis::K, &ks, &seeds, &[1], 64).map_err(|e| e.to_string())?;
    let curve: Vec<f64> = sweep.rows.iter().map(|row| 100.0 * row.mean_std(0).0).collect();
    let half = curve.len() / 2;
    let first_gain = curve[half] - curve[0];
    let second_gain = curve[curve.len() - 1] - curve[half];
    let max_drop = curve.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
    let secs = start.elapsed().as_secs_f64();

    let summary = format!(
        "R@1 full {full:.1} / multi {multi:.1} / baseline {base:.1} / reliability {:.1} / concat {:.1}; best single level {single_best:.1}; k sweep {:?}; {secs:.0}s",
        r1("multi_layer_reliability"),
        r1("concat"),
        curve.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
    );
    ensure(full >= multi && multi >= base, || format!("ordering violated: {summary}"))?;
    ensure(full - base >= 1.0, || format!("full − baseline < 1 point: {summary}"))?;
    ensure(single_best < full, || format!("a single level suffices: {summary}"))?;
    ensure(curve[curve.len() - 1] >= curve[0], || format!("k sweep ends below its start: {summary}"))?;
    ensure(max_drop <= 1.0, || format!("k sweep drops by {max_drop:.2} points: {summary}"))?;
    ensure(second_gain <= first_gain + 0.5, || format!("k sweep does not plateau: {summary}"))?;
    ensure(secs <= 600.0, || format!("over the time budget: {summary}"))?;
    Ok(summary)
}

fn self_similarity() -> Outcome {
    let spec = Config::default().synth;
    let mut rng = rng(71);
    let mut worst = 0.0f64;
    for n in 0..200u64 {
        let a = PreparedSample::new(&synthesize_pyramid(&spec, n, rng.random_range(0..16), rng.random_range(0..40)).unwrap());
        let b = PreparedSample::new(&synthesize_pyramid(&spec, n + 1, rng.random_range(0..16), rng.random_range(0..40)).unwrap());
        let r = rng.random_range(1..=16);
        let k = rng.random_range(1..=r);
        let mut model = Model::init(&a.channels(), r, k, 0.95, n).unwrap();
        model.edges = EdgeStore::from_matrices(vec![random_edges(&mut rng, r), random_edges(&mut rng, r)], r, 0.95).unwrap();
        model.params = InferenceParams::from_parts(
            (0..2).map(|_| random_vec(&mut rng, r, -500.0, 500.0)).collect(),
            (0..2).map(|_| random_vec(&mut rng, r, -3.0, 3.0)).collect(),
            r,
            k,
        )
        .unwrap();
        let (ea, eb) = (model.encode(&a, false).unwrap(), model.encode(&b, false).unwrap());
        let scorer = PairScorer::new(&model, Scoring::Rectified).unwrap();
        ensure(scorer.score(&ea, &ea) == 0.0, || format!("pair {n}: d̂(x, x) ≠ 0"))?;
        let diff = (scorer.score(&ea, &eb) - scorer.score(&eb, &ea)).abs();
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("pair {n}: asymmetry {diff:e}"))?;
    }
    Ok(format!("200 pairs, d̂(x, x) = 0, max asymmetry {worst:.1e}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("conservation", conservation),
        ("reconstruction", reconstruction),
        ("matrix-scalar equivalence", matrix_scalar),
        ("degeneracy", degeneracy),
        ("pooling linearization", pooling),
        ("gradient checks", gradients),
        ("gradient-flow isolation", isolation),
        ("momentum closed form", momentum),
        ("retrieval oracle", retrieval),
        ("trend reproduction", trend),
        ("self-similarity and symmetry", self_similarity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
