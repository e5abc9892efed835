//! Margin loss and the dissimilarity form of ProxyAnchor, each returning the loss
//! together with its gradient with respect to the distances it consumed.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLossConfig {
    /// Fixed margin `α`.
    pub alpha_margin: f64,
    /// Learnable per-class boundary `β_y`.
    pub beta_class: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledDistance {
    pub distance: f64,
    pub anchor_class: usize,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLossOutput {
    pub loss: f64,
    pub grad_distance: Vec<f64>,
    pub grad_beta: Array1<f64>,
}

/// `mean_P [d − (β_y − α)]₊ + mean_N [(β_y + α) − d]₊`. An empty side contributes 0;
/// the subgradient at a hinge kink is 0.
pub fn margin_loss(pairs: &[LabeledDistance], cfg: &MarginLossConfig) -> Result<MarginLossOutput> {
    if !(cfg.alpha_margin > 0.0) {
        return Err(Error::config("margin alpha must be positive"));
    }
    let n_pos = pairs.iter().filter(|p| p.positive).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 && n_neg == 0 {
        return Err(Error::config("margin loss needs at least one pair"));
    }
    let classes = cfg.beta_class.len();
    let mut loss = 0.0;
    let mut grad_distance = vec![0.0; pairs.len()];
    let mut grad_beta = Array1::zeros(classes);
    for (pair, g) in pairs.iter().zip(grad_distance.iter_mut()) {
        if pair.anchor_class >= classes {
            return Err(Error::config(format!(
                "anchor class {} out of range for {classes} boundaries",
                pair.anchor_class
            )));
        }
        let beta = cfg.beta_class[pair.anchor_class];
        if pair.positive {
            let w = 1.0 / n_pos as f64;
            let slack = pair.distance - (beta - cfg.alpha_margin);
            if slack > 0.0 {
                loss += w * slack;
                *g = w;
                grad_beta[pair.anchor_class] -= w;
            }
        } else {
            let w = 1.0 / n_neg as f64;
            let slack = (beta + cfg.alpha_margin) - pair.distance;
            if slack > 0.0 {
                loss += w * slack;
                *g = -w;
                grad_beta[pair.anchor_class] += w;
            }
        }
    }
    Ok(MarginLossOutput {
        loss,
        grad_distance,
        grad_beta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyAnchorConfig {
    /// Scale `α`.
    pub scale: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for ProxyAnchorConfig {
    /// Positive margin `β − τ = 1.8`, negative margin `β + τ = 2.2`, scale 16.
    fn default() -> Self {
        Self {
            scale: 16.0,
            beta: 2.0,
            tau: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyAnchorOutput {
    pub loss: f64,
    /// `∂L/∂d` for the `samples × proxies` distance matrix.
    pub grad: Array2<f64>,
}

/// `log(1 + Σ exp(aᵢ))` and the softmax-like weights `exp(aᵢ)/(1 + Σ exp(a))`,
/// shifted so no exponent exceeds 0.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    let m = a.iter().copied().fold(0.0f64, f64::max);
    let base = (-m).exp();
    let exps: Vec<f64> = a.iter().map(|&x| (x - m).exp()).collect();
    let denom = base + exps.iter().sum::<f64>();
    (m + denom.ln(), exps.into_iter().map(|e| e / denom).collect())
}

/// Dissimilarity-form ProxyAnchor over a `samples × proxies` distance matrix.
///
/// Positive term averages over proxies with at least one positive sample in the
/// batch and is skipped when there are none; the negative term averages over all
/// proxies.
pub fn proxy_anchor_loss(
    dists: &Array2<f64>,
    labels: &[usize],
    cfg: &ProxyAnchorConfig,
) -> Result<ProxyAnchorOutput> {
    let (n, c) = dists.dim();
    if c == 0 {
        return Err(Error::config("proxy anchor loss needs at least one proxy"));
    }
    if labels.len() != n {
        return Err(Error::shape("proxy anchor labels", n, labels.len()));
    }
    if !(cfg.scale > 0.0) {
        return Err(Error::config("proxy anchor scale must be positive"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::config(format!("label {bad} has no proxy (only {c})")));
    }
    if dists.iter().any(|d| !d.is_finite()) {
        return Err(Error::config("proxy distances must be finite"));
    }
    let pos_margin = cfg.beta - cfg.tau;
    let neg_margin = cfg.beta + cfg.tau;
    let with_pos: Vec<usize> = (0..c).filter(|p| labels.contains(p)).collect();
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));

    if !with_pos.is_empty() {
        let w = 1.0 / with_pos.len() as f64;
        for &p in &with_pos {
            let members: Vec<usize> = (0..n).filter(|&x| labels[x] == p).collect();
            let a: Vec<f64> = members
                .iter()
                .map(|&x| cfg.scale * (dists[[x, p]] - pos_margin))
                .collect();
            let (val, soft) = log1p_sum_exp(&a);
            loss += w * val;
            for (&x, s) in members.iter().zip(soft) {
                grad[[x, p]] += w * cfg.scale * s;
            }
        }
    }

    let w = 1.0 / c as f64;
    for p in 0..c {
        let members: Vec<usize> = (0..n).filter(|&x| labels[x] != p).collect();
        if members.is_empty() {
            continue;
        }
        let b: Vec<f64> = members
            .iter()
            .map(|&x| -cfg.scale * (dists[[x, p]] - neg_margin))
            .collect();
        let (val, soft) = log1p_sum_exp(&b);
        loss += w * val;
        for (&x, s) in members.iter().zip(soft) {
            grad[[x, p]] -= w * cfg.scale * s;
        }
    }
    Ok(ProxyAnchorOutput { loss, grad })
}
