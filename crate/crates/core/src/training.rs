//! Split training objective.
//!
//! Level losses on `dˡ = Σᵢ δˡᵢ` update the construction parameters (projections
//! plus the loss head: class boundaries or proxies). The loss on the rectified
//! overall dissimilarity updates only the gating parameters `(α, β)`; nodes, edges
//! and CAM spreads are constants on that path. Both blocks step with AdamW, then
//! the edge store absorbs the batch's CAM correlations.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codec::{dim_u32, put_f64s, put_u32, put_u64, ByteReader};
use crate::config::{Config, LossKind};
use crate::error::{Error, ParseErrorKind, Result};
use crate::feature::ProjectionLayer;
use crate::graph::{node_values, EdgeStore};
use crate::inference::{
    gate_gradients, rectified_adjoints, rectify_with, reliability_from_spreads, InferenceParams,
    NormalizedEdges,
};
use crate::losses::{
    margin_loss, proxy_anchor_loss, LabeledDistance, MarginLossConfig, ProxyAnchorConfig,
};
use crate::model::{pair_graph, EncodedSample, Model, PreparedSample};
use crate::sampler::BatchSampler;

/// Loss-specific construction parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LossHead {
    /// Learnable per-class boundaries of the margin loss.
    Margin { beta_class: Array1<f64> },
    /// One `classes × r` proxy matrix per level.
    ProxyAnchor { proxies: Vec<Array2<f64>> },
}

impl LossHead {
    pub fn kind(&self) -> LossKind {
        match self {
            LossHead::Margin { .. } => LossKind::Margin,
            LossHead::ProxyAnchor { .. } => LossKind::ProxyAnchor,
        }
    }
}

/// Adaptive-moment state for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One AdamW step with decoupled weight decay.
pub fn adamw_step(params: &mut [f64], grads: &[f64], mom: &mut Moments, lr: f64, decay: f64) {
    mom.t += 1;
    let c1 = 1.0 - ADAM_B1.powi(mom.t as i32);
    let c2 = 1.0 - ADAM_B2.powi(mom.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(mom.m.iter_mut())
        .zip(mom.v.iter_mut())
    {
        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        *p -= lr * (update + decay * *p);
    }
}

/// Which parts of the split objective run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainOptions {
    /// Level losses, updating the construction parameters.
    pub level_loss: bool,
    /// Overall loss, updating the gating parameters.
    pub overall_loss: bool,
    pub update_edges: bool,
    /// Level losses on the top level only (single-level baseline).
    pub top_level_only: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            level_loss: true,
            overall_loss: true,
            update_edges: true,
            top_level_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta2Gradients {
    pub alpha: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub level_losses: Vec<f64>,
    pub overall_loss: f64,
    pub theta2: Theta2Gradients,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub head: LossHead,
    /// Sorted training labels; index into the head's per-class parameters.
    pub classes: Vec<u32>,
    pub config: Config,
    pub options: TrainOptions,
    pub step: u64,
    theta1_moments: Vec<Moments>,
    theta2_moments: Vec<Moments>,
}

fn margin_cfg(cfg: &Config, beta_class: &Array1<f64>) -> MarginLossConfig {
    MarginLossConfig {
        alpha_margin: cfg.margin_alpha,
        beta_class: beta_class.clone(),
    }
}

fn pa_cfg(cfg: &Config) -> ProxyAnchorConfig {
    ProxyAnchorConfig {
        scale: cfg.pa_scale,
        beta: cfg.pa_beta,
        tau: cfg.pa_tau,
    }
}

fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row /= n;
        }
    }
    (out, norms)
}

/// Backpropagates through `ẽ = e/‖e‖`.
fn unnormalize_grad(unit: &Array1<f64>, norm: f64, grad_unit: &Array1<f64>) -> Array1<f64> {
    (grad_unit - &(unit * unit.dot(grad_unit))) / norm
}

fn check_finite<'a>(block: &str, vals: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if vals.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient {
            block: block.to_string(),
        });
    }
    Ok(())
}

fn class_index(classes: &[u32], label: u32) -> Result<usize> {
    classes
        .binary_search(&label)
        .map_err(|_| Error::config(format!("label {label} is not a training class")))
}

/// Result of the overall (gating) objective on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct OverallObjective {
    pub loss: f64,
    pub grad: Theta2Gradients,
}

/// `d̂` of one pair with `∂d̂/∂αˡ` and `∂d̂/∂βˡ` for `l = 2..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedGradient {
    pub value: f64,
    pub d_alpha: Vec<Array1<f64>>,
    pub d_beta: Vec<Array1<f64>>,
}

/// Gradient of `d̂` with respect to the gating parameters. Nodes, edges and the
/// spread products `η` are constants; `gates[l − 2] = σ(αˡηˡ + βˡ)`.
pub fn rectified_gradient(
    nodes: &[Array1<f64>],
    etas: &[Array1<f64>],
    gates: &[Array1<f64>],
    edges: &NormalizedEdges,
) -> Result<RectifiedGradient> {
    if etas.len() != gates.len() {
        return Err(Error::shape("spread product levels", gates.len(), etas.len()));
    }
    let rect = rectify_with(nodes, gates, edges)?;
    let r = nodes[0].len();
    let adj = rectified_adjoints(r, gates, edges);
    let dp = gate_gradients(nodes, &rect, &adj, edges);
    let mut d_alpha = Vec::with_capacity(gates.len());
    let mut d_beta = Vec::with_capacity(gates.len());
    for ((g, p), eta) in dp.iter().zip(gates).zip(etas) {
        let slope: Array1<f64> = p.mapv(|p| p * (1.0 - p));
        let db = g * &slope;
        d_alpha.push(&db * eta);
        d_beta.push(db);
    }
    Ok(RectifiedGradient {
        value: rect.overall,
        d_alpha,
        d_beta,
    })
}

/// Overall loss `L^f(d̂)` and its analytic gradient with respect to `(α, β)`.
///
/// With the margin loss, all ordered in-batch pairs are scored and the distance is
/// `√d̂`. With ProxyAnchor, each sample is scored against every proxy: nodes come
/// from the sample's and the normalized proxy's embeddings, and the spread product
/// uses the sample's own CAM spread squared since proxies have no spatial map.
pub fn overall_objective(
    model: &Model,
    head: &LossHead,
    classes: &[u32],
    cfg: &Config,
    batch: &[EncodedSample],
) -> Result<OverallObjective> {
    let edges = model.normalized_edges()?;
    let params = &model.params;
    let levels = model.levels();
    let r = model.r();
    let mut grad = Theta2Gradients {
        alpha: vec![Array1::zeros(r); levels - 1],
        beta: vec![Array1::zeros(r); levels - 1],
    };
    let accumulate = |grad: &mut Theta2Gradients, d: &RectifiedGradient, w: f64| {
        for (acc, x) in grad.alpha.iter_mut().zip(&d.d_alpha) {
            acc.scaled_add(w, x);
        }
        for (acc, x) in grad.beta.iter_mut().zip(&d.d_beta) {
            acc.scaled_add(w, x);
        }
    };

    let loss = match head {
        LossHead::Margin { beta_class } => {
            let pairs: Vec<(usize, usize)> = (0..batch.len())
                .flat_map(|i| (0..batch.len()).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect();
            let derivs = pairs
                .par_iter()
                .map(|&(i, j)| {
                    let g = pair_graph(params, &batch[i], &batch[j]);
                    let etas: Vec<_> = g.reliabilities.iter().map(|r| r.raw.clone()).collect();
                    rectified_gradient(&g.nodes, &etas, &g.gates(), &edges)
                })
                .collect::<Result<Vec<_>>>()?;
            let labeled = pairs
                .iter()
                .zip(&derivs)
                .map(|(&(i, j), d)| {
                    Ok(LabeledDistance {
                        distance: d.value.max(0.0).sqrt(),
                        anchor_class: class_index(classes, batch[i].label)?,
                        positive: batch[i].label == batch[j].label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = margin_loss(&labeled, &margin_cfg(cfg, beta_class))?;
            for ((l, d), g) in labeled.iter().zip(&derivs).zip(&out.grad_distance) {
                if *g != 0.0 && l.distance > 0.0 {
                    accumulate(&mut grad, d, g / (2.0 * l.distance));
                }
            }
            out.loss
        }
        LossHead::ProxyAnchor { proxies } => {
            let units: Vec<Array2<f64>> = proxies.iter().map(|p| normalize_rows(p).0).collect();
            let n_proxy = classes.len();
            let derivs = (0..batch.len() * n_proxy)
                .into_par_iter()
                .map(|idx| {
                    let (i, c) = (idx / n_proxy, idx % n_proxy);
                    let s = &batch[i];
                    let nodes: Vec<Array1<f64>> = (0..levels)
                        .map(|l| node_values(&s.embeddings[l], &units[l].row(c).to_owned()))
                        .collect();
                    let rels: Vec<_> = (2..=levels)
                        .map(|l| {
                            reliability_from_spreads(
                                &s.spreads[l - 1],
                                &s.spreads[l - 1],
                                params.alpha(l),
                                params.beta(l),
                            )
                        })
                        .collect();
                    let etas: Vec<_> = rels.iter().map(|r| r.raw.clone()).collect();
                    let gates: Vec<_> = rels.iter().map(|r| r.values.clone()).collect();
                    rectified_gradient(&nodes, &etas, &gates, &edges)
                })
                .collect::<Result<Vec<_>>>()?;
            let dists = Array2::from_shape_fn((batch.len(), n_proxy), |(i, c)| {
                derivs[i * n_proxy + c].value
            });
            let labels = batch
                .iter()
                .map(|s| class_index(classes, s.label))
                .collect::<Result<Vec<_>>>()?;
            let out = proxy_anchor_loss(&dists, &labels, &pa_cfg(cfg))?;
            for (idx, d) in derivs.iter().enumerate() {
                let g = out.grad[[idx / n_proxy, idx % n_proxy]];
                if g != 0.0 {
                    accumulate(&mut grad, d, g);
                }
            }
            out.loss
        }
    };
    Ok(OverallObjective { loss, grad })
}

/// Gradients of the weighted level losses with respect to the construction
/// parameters, plus each level's unweighted loss value.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta1Gradients {
    pub projections: Vec<Array2<f64>>,
    /// Same variant as the state's head, holding gradients.
    pub head: LossHead,
    pub level_losses: Vec<f64>,
}

fn level_objective(
    state: &TrainState,
    samples: &[&PreparedSample],
    batch: &[EncodedSample],
) -> Result<Theta1Gradients> {
    let levels = state.model.levels();
    let r = state.model.r();
    let cfg = &state.config;
    let mut projections: Vec<Array2<f64>> = state
        .model
        .projections
        .iter()
        .map(|p| Array2::zeros(p.weights().dim()))
        .collect();
    let mut head = match &state.head {
        LossHead::Margin { beta_class } => LossHead::Margin {
            beta_class: Array1::zeros(beta_class.len()),
        },
        LossHead::ProxyAnchor { proxies } => LossHead::ProxyAnchor {
            proxies: proxies.iter().map(|p| Array2::zeros(p.dim())).collect(),
        },
    };
    let mut level_losses = vec![0.0; levels];
    let labels = batch
        .iter()
        .map(|s| class_index(&state.classes, s.label))
        .collect::<Result<Vec<_>>>()?;
    let first = if state.options.top_level_only { levels - 1 } else { 0 };

    for l in first..levels {
        let weight = cfg.level_weights[l];
        let mut grad_unit: Vec<Array1<f64>> = vec![Array1::zeros(r); batch.len()];
        match (&state.head, &mut head) {
            (LossHead::Margin { beta_class }, LossHead::Margin { beta_class: gb }) => {
                let mut pairs = Vec::new();
                let mut labeled = Vec::new();
                for i in 0..batch.len() {
                    for j in 0..batch.len() {
                        if i == j {
                            continue;
                        }
                        let diff = &batch[i].embeddings[l] - &batch[j].embeddings[l];
                        let dist = diff.dot(&diff).sqrt();
                        labeled.push(LabeledDistance {
                            distance: dist,
                            anchor_class: labels[i],
                            positive: labels[i] == labels[j],
                        });
                        pairs.push((i, j, diff));
                    }
                }
                let out = margin_loss(&labeled, &margin_cfg(cfg, beta_class))?;
                level_losses[l] = out.loss;
                for ((i, j, diff), (lab, g)) in pairs
                    .iter()
                    .zip(labeled.iter().zip(&out.grad_distance))
                {
                    if *g == 0.0 || lab.distance == 0.0 {
                        continue;
                    }
                    let step = diff * (weight * g / lab.distance);
                    grad_unit[*i] += &step;
                    grad_unit[*j] -= &step;
                }
                gb.scaled_add(weight, &out.grad_beta);
            }
            (LossHead::ProxyAnchor { proxies }, LossHead::ProxyAnchor { proxies: gp }) => {
                let (units, norms) = normalize_rows(&proxies[l]);
                let n_proxy = units.nrows();
                let dists = Array2::from_shape_fn((batch.len(), n_proxy), |(i, c)| {
                    let diff = &batch[i].embeddings[l] - &units.row(c);
                    diff.dot(&diff)
                });
                let out = proxy_anchor_loss(&dists, &labels, &pa_cfg(cfg))?;
                level_losses[l] = out.loss;
                let mut grad_proxy_unit = Array2::<f64>::zeros(units.dim());
                for i in 0..batch.len() {
                    for c in 0..n_proxy {
                        let g = out.grad[[i, c]];
                        if g == 0.0 {
                            continue;
                        }
                        let diff = &batch[i].embeddings[l] - &units.row(c);
                        grad_unit[i].scaled_add(2.0 * weight * g, &diff);
                        let mut row = grad_proxy_unit.row_mut(c);
                        row.scaled_add(-2.0 * weight * g, &diff);
                    }
                }
                for c in 0..n_proxy {
                    if norms[c] == 0.0 {
                        continue;
                    }
                    let g = unnormalize_grad(
                        &units.row(c).to_owned(),
                        norms[c],
                        &grad_proxy_unit.row(c).to_owned(),
                    );
                    let mut row = gp[l].row_mut(c);
                    row += &g;
                }
            }
            _ => unreachable!("gradient head mirrors the state head"),
        }
        for (i, gu) in grad_unit.iter().enumerate() {
            let s = &batch[i];
            let norm = s.raw[l].dot(&s.raw[l]).sqrt();
            let ge = unnormalize_grad(&s.embeddings[l], norm, gu);
            let v = &samples[i].pooled[l];
            let ge2 = ge.view().insert_axis(ndarray::Axis(1));
            let v2 = v.view().insert_axis(ndarray::Axis(0));
            projections[l] += &ge2.dot(&v2);
        }
    }
    Ok(Theta1Gradients {
        projections,
        head,
        level_losses,
    })
}

impl TrainState {
    /// Fresh state for the given training classes and per-level channel counts.
    pub fn new(config: Config, channels: &[usize], classes: Vec<u32>, options: TrainOptions) -> Result<Self> {
        config.validate()?;
        if channels.len() != config.levels {
            return Err(Error::shape("channel list", config.levels, channels.len()));
        }
        let mut classes = classes;
        classes.sort_unstable();
        classes.dedup();
        if classes.is_empty() {
            return Err(Error::config("training needs at least one class"));
        }
        let model = Model::init(channels, config.r, config.k, config.gamma, config.seed)?;
        let head = match config.loss {
            LossKind::Margin => LossHead::Margin {
                beta_class: Array1::from_elem(classes.len(), config.margin_beta),
            },
            LossKind::ProxyAnchor => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9a0c5);
                LossHead::ProxyAnchor {
                    proxies: (0..config.levels)
                        .map(|_| {
                            Array2::from_shape_fn((classes.len(), config.r), |_| {
                                StandardNormal.sample(&mut rng)
                            })
                        })
                        .collect(),
                }
            }
        };
        let mut state = Self {
            model,
            head,
            classes,
            config,
            options,
            step: 0,
            theta1_moments: Vec::new(),
            theta2_moments: Vec::new(),
        };
        state.reset_moments();
        Ok(state)
    }

    fn reset_moments(&mut self) {
        let mut t1: Vec<Moments> = self
            .model
            .projections
            .iter()
            .map(|p| Moments::new(p.weights().len()))
            .collect();
        match &self.head {
            LossHead::Margin { beta_class } => t1.push(Moments::new(beta_class.len())),
            LossHead::ProxyAnchor { proxies } => {
                t1.extend(proxies.iter().map(|p| Moments::new(p.len())))
            }
        }
        self.theta1_moments = t1;
        self.theta2_moments = (0..2 * (self.model.levels() - 1))
            .map(|_| Moments::new(self.model.r()))
            .collect();
    }

    /// Level-loss gradients for `samples` under the current parameters.
    pub fn construction_gradients(&self, samples: &[&PreparedSample]) -> Result<Theta1Gradients> {
        let encoded = samples
            .iter()
            .map(|s| self.model.encode(s, false))
            .collect::<Result<Vec<_>>>()?;
        level_objective(self, samples, &encoded)
    }

    /// Weighted sum of the level losses.
    pub fn construction_loss(&self, samples: &[&PreparedSample]) -> Result<f64> {
        let g = self.construction_gradients(samples)?;
        Ok(g
            .level_losses
            .iter()
            .zip(&self.config.level_weights)
            .map(|(l, w)| l * w)
            .sum())
    }

    /// Construction parameters serialized as bytes (for equality checks).
    pub fn theta1_bytes(&self) -> Result<Vec<u8>> {
        encode_theta1(&self.model.projections, &self.head, &self.classes)
    }

    /// Gating parameters serialized as bytes.
    pub fn theta2_bytes(&self) -> Result<Vec<u8>> {
        self.model.params.encode()
    }

    /// One step of the split objective on `samples`.
    pub fn objective_step(&mut self, samples: &[&PreparedSample]) -> Result<StepMetrics> {
        if samples.len() < 2 {
            return Err(Error::config("a training batch needs at least two samples"));
        }
        let encoded = samples
            .par_iter()
            .map(|s| self.model.encode(s, self.options.update_edges))
            .collect::<Result<Vec<_>>>()?;
        if self.head.kind() == LossKind::Margin {
            let mut labels: Vec<u32> = encoded.iter().map(|e| e.label).collect();
            labels.sort_unstable();
            labels.dedup();
            if labels.len() < 2 {
                return Err(Error::config("pair-based loss needs at least two classes per batch"));
            }
        }

        let theta1 = if self.options.level_loss {
            Some(level_objective(self, samples, &encoded)?)
        } else {
            None
        };
        let levels = self.model.levels();
        let overall = if self.options.overall_loss && levels > 1 {
            Some(overall_objective(
                &self.model,
                &self.head,
                &self.classes,
                &self.config,
                &encoded,
            )?)
        } else {
            None
        };

        if let Some(g) = &theta1 {
            for (l, p) in g.projections.iter().enumerate() {
                check_finite(&format!("projection[{}]", l + 1), p.iter())?;
            }
            match &g.head {
                LossHead::Margin { beta_class } => check_finite("beta_class", beta_class.iter())?,
                LossHead::ProxyAnchor { proxies } => {
                    for (l, p) in proxies.iter().enumerate() {
                        check_finite(&format!("proxies[{}]", l + 1), p.iter())?;
                    }
                }
            }
        }
        if let Some(o) = &overall {
            for (i, (a, b)) in o.grad.alpha.iter().zip(&o.grad.beta).enumerate() {
                check_finite(&format!("alpha[{}]", i + 2), a.iter())?;
                check_finite(&format!("beta[{}]", i + 2), b.iter())?;
            }
        }

        let (lr1, lr2, wd) = (self.config.lr, self.config.lr_inference, self.config.weight_decay);
        if let (Some(g), true) = (&theta1, lr1 > 0.0) {
            let mut moments = self.theta1_moments.iter_mut();
            for (proj, grad) in self.model.projections.iter_mut().zip(&g.projections) {
                let w = proj.weights_mut();
                adamw_step(
                    w.as_slice_mut().expect("standard layout"),
                    grad.as_slice().expect("standard layout"),
                    moments.next().unwrap(),
                    lr1,
                    wd,
                );
            }
            match (&mut self.head, &g.head) {
                (LossHead::Margin { beta_class }, LossHead::Margin { beta_class: gb }) => {
                    adamw_step(
                        beta_class.as_slice_mut().unwrap(),
                        gb.as_slice().unwrap(),
                        moments.next().unwrap(),
                        lr1,
                        wd,
                    );
                }
                (LossHead::ProxyAnchor { proxies }, LossHead::ProxyAnchor { proxies: gp }) => {
                    for (p, gpl) in proxies.iter_mut().zip(gp) {
                        adamw_step(
                            p.as_slice_mut().unwrap(),
                            gpl.as_slice().unwrap(),
                            moments.next().unwrap(),
                            lr1,
                            wd,
                        );
                    }
                }
                _ => unreachable!(),
            }
        }
        if let (Some(o), true) = (&overall, lr2 > 0.0) {
            let params = &mut self.model.params;
            for i in 0..levels - 1 {
                let (ma, mb) = self.theta2_moments.split_at_mut(2 * i + 1);
                adamw_step(
                    params.alpha[i].as_slice_mut().unwrap(),
                    o.grad.alpha[i].as_slice().unwrap(),
                    &mut ma[2 * i],
                    lr2,
                    wd,
                );
                adamw_step(
                    params.beta[i].as_slice_mut().unwrap(),
                    o.grad.beta[i].as_slice().unwrap(),
                    &mut mb[0],
                    lr2,
                    wd,
                );
            }
        }
        if self.options.update_edges && levels > 1 {
            let stats: Vec<Vec<Array2<f64>>> = encoded
                .into_iter()
                .map(|e| e.correlations.expect("requested at encode time"))
                .collect();
            self.model.edges.batch_edge_update(&stats)?;
        }
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            level_losses: theta1.map(|g| g.level_losses).unwrap_or_default(),
            overall_loss: overall.as_ref().map(|o| o.loss).unwrap_or(0.0),
            theta2: overall.map(|o| o.grad).unwrap_or_else(|| Theta2Gradients {
                alpha: Vec::new(),
                beta: Vec::new(),
            }),
        })
    }

    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        let mut out = self.model.params.encode()?;
        out.extend(self.model.edges.encode()?);
        out.extend(self.theta1_bytes()?);
        put_u64(&mut out, self.step);
        Ok(out)
    }

    /// Restores parameters from a checkpoint; optimizer moments start fresh.
    pub fn from_checkpoint(bytes: &[u8], config: Config, options: TrainOptions) -> Result<Self> {
        let ck = Checkpoint::decode(bytes)?;
        let mut state = Self {
            model: ck.model,
            head: ck.head,
            classes: ck.classes,
            config,
            options,
            step: ck.step,
            theta1_moments: Vec::new(),
            theta2_moments: Vec::new(),
        };
        state.reset_moments();
        Ok(state)
    }
}

pub const THETA1_MAGIC: &[u8; 4] = b"AVST";
pub const THETA1_VERSION: u32 = 1;

fn encode_theta1(projections: &[ProjectionLayer], head: &LossHead, classes: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(THETA1_MAGIC);
    put_u32(&mut out, THETA1_VERSION);
    put_u32(&mut out, dim_u32(projections.len(), "levels")?);
    let r = projections.first().map(|p| p.out_dim()).unwrap_or(0);
    put_u32(&mut out, dim_u32(r, "r")?);
    for p in projections {
        put_u32(&mut out, dim_u32(p.in_dim(), "channels")?);
        put_f64s(&mut out, p.weights().iter());
    }
    put_u32(
        &mut out,
        match head {
            LossHead::Margin { .. } => 0,
            LossHead::ProxyAnchor { .. } => 1,
        },
    );
    put_u32(&mut out, dim_u32(classes.len(), "classes")?);
    for c in classes {
        put_u32(&mut out, *c);
    }
    match head {
        LossHead::Margin { beta_class } => put_f64s(&mut out, beta_class.iter()),
        LossHead::ProxyAnchor { proxies } => {
            for p in proxies {
                put_f64s(&mut out, p.iter());
            }
        }
    }
    Ok(out)
}

/// Everything a trained run persists: gates, edges, construction parameters, step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub head: LossHead,
    pub classes: Vec<u32>,
    pub step: u64,
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader::new(bytes);
        let params = InferenceParams::read_from(&mut rd)?;
        let edges = EdgeStore::read_from(&mut rd)?;
        rd.magic(THETA1_MAGIC)?;
        rd.version(THETA1_VERSION)?;
        let at = rd.offset();
        let levels = rd.u32()? as usize;
        let r = rd.u32()? as usize;
        let invalid = |msg: String| Error::Parse {
            offset: at,
            kind: ParseErrorKind::Invalid(msg),
        };
        if levels != params.levels() || levels != edges.levels() || r != params.r() || r != edges.r() {
            return Err(invalid(format!(
                "construction blob is L={levels}, r={r}; gates are L={}, r={}",
                params.levels(),
                params.r()
            )));
        }
        let mut projections = Vec::with_capacity(levels);
        for l in 0..levels {
            let c = rd.u32()? as usize;
            let n = r.checked_mul(c).ok_or_else(|| invalid("projection overflow".into()))?;
            rd.require(n as u64 * 8)?;
            let w = Array2::from_shape_vec((r, c), rd.f64_vec(n)?).expect("r·c values");
            projections.push(ProjectionLayer::new(w, l + 1).map_err(|e| invalid(e.to_string()))?);
        }
        let kind = rd.u32()?;
        let n_classes = rd.u32()? as usize;
        rd.require(n_classes as u64 * 4)?;
        let classes = (0..n_classes).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
        let head = match kind {
            0 => LossHead::Margin {
                beta_class: Array1::from(rd.f64_vec(n_classes)?),
            },
            1 => {
                rd.require((levels * n_classes * r) as u64 * 8)?;
                LossHead::ProxyAnchor {
                    proxies: (0..levels)
                        .map(|_| {
                            rd.f64_vec(n_classes * r).map(|v| {
                                Array2::from_shape_vec((n_classes, r), v).expect("C·r values")
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                }
            }
            other => return Err(invalid(format!("unknown loss head {other}"))),
        };
        let step = rd.u64()?;
        rd.finish()?;
        Ok(Self {
            model: Model {
                projections,
                params,
                edges,
            },
            head,
            classes,
            step,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Runs `config.epochs` epochs of class-balanced batches over `train`.
pub fn train(
    config: &Config,
    train: &[PreparedSample],
    options: TrainOptions,
) -> Result<(TrainState, Vec<StepMetrics>)> {
    let first = train
        .first()
        .ok_or_else(|| Error::config("training set is empty"))?;
    let labels: Vec<u32> = train.iter().map(|s| s.label).collect();
    let mut state = TrainState::new(config.clone(), &first.channels(), labels.clone(), options)?;
    let mut sampler = BatchSampler::new(
        &labels,
        config.batch_size,
        config.classes_per_batch,
        config.seed,
    )?;
    let mut metrics = Vec::new();
    for _ in 0..config.epochs {
        for batch in sampler.epoch() {
            let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &train[i]).collect();
            metrics.push(state.objective_step(&samples)?);
        }
    }
    Ok((state, metrics))
}
