//! Training objectives: prediction matching, distribution matching, prior and
//! post reconstruction, and their weighted total.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sigmoid, Graph, Matrix, Var, BCE_CLAMP};
use crate::encoder::{fuse_vars, EncoderParams, Modal, SubVars};
use crate::error::{GeeaError, Result};
use crate::mvae::FlowTag;
use crate::params::ParamStore;

/// How negatives enter the prediction-matching loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Every other pair of the batch is a negative, normalized by `B − 1`.
    InBatch,
    /// Positives only.
    Disabled,
}

/// Cosine similarity matrix `S[i][j] = cos(a_i, b_j) / τ`.
fn similarity_vars(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Var {
    let an = g.row_normalize(a);
    let bn = g.row_normalize(b);
    let bt = g.transpose(bn);
    let s = g.matmul(an, bt);
    g.scale(s, 1.0 / temperature)
}

/// Prediction-matching loss over row-aligned positive pairs.
///
/// For anchor `i`: `−log σ(S_ii) − 1/(B−1) Σ_{j≠i} log σ(−S_ij)`, averaged over
/// anchors. The reverse direction uses `Sᵀ`; with in-batch negatives its sum
/// over anchors is the same, so the value reported is the mean of the two
/// directions, which equals either one.
pub fn prediction_match_vars(
    g: &mut Graph,
    source: Var,
    target: Var,
    temperature: f64,
    negatives: NegativePolicy,
) -> Result<Var> {
    let b = g.value(source).nrows();
    if g.value(target).dim() != g.value(source).dim() {
        return Err(GeeaError::Shape(format!(
            "prediction match: {:?} vs {:?}",
            g.value(source).dim(),
            g.value(target).dim()
        )));
    }
    if b == 0 {
        return Err(GeeaError::Argument("prediction match on an empty batch".into()));
    }
    if negatives == NegativePolicy::InBatch && b < 2 {
        return Err(GeeaError::Argument("in-batch negatives need at least two pairs".into()));
    }
    if temperature <= 0.0 {
        return Err(GeeaError::Argument(format!("temperature {temperature} must be positive")));
    }
    let s = similarity_vars(g, source, target, temperature);
    let pos = g.log_sigmoid(s);
    let pos_mask = g.constant(Matrix::eye(b) / b as f64);
    let pos_terms = g.mul(pos, pos_mask);
    let mut total = g.sum(pos_terms);
    if negatives == NegativePolicy::InBatch {
        let neg_s = g.scale(s, -1.0);
        let neg = g.log_sigmoid(neg_s);
        let w = 1.0 / (b as f64 * (b - 1) as f64);
        let neg_mask = g.constant(Matrix::from_shape_fn((b, b), |(i, j)| if i == j { 0.0 } else { w }));
        let neg_terms = g.mul(neg, neg_mask);
        let neg_sum = g.sum(neg_terms);
        total = g.add(total, neg_sum);
    }
    Ok(g.scale(total, -1.0))
}

/// Value-level prediction matching. `pairs` index rows of `source` and
/// `target`.
pub fn loss_prediction_match(
    source: &Matrix,
    target: &Matrix,
    pairs: &[(usize, usize)],
    negatives: NegativePolicy,
    temperature: f64,
) -> Result<f64> {
    if let Some(&(x, y)) = pairs.iter().find(|&&(x, y)| x >= source.nrows() || y >= target.nrows()) {
        return Err(GeeaError::Argument(format!("pair ({x}, {y}) outside the embedding tables")));
    }
    let xs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mut g = Graph::new();
    let a = g.constant(source.select(ndarray::Axis(0), &xs));
    let b = g.constant(target.select(ndarray::Axis(0), &ys));
    let l = prediction_match_vars(&mut g, a, b, temperature, negatives)?;
    Ok(g.scalar(l))
}

/// Mean over elements of `KL(N(μ, σ²) ‖ N(0, 1)) = −ln σ + (σ² + μ²)/2 − ½`.
pub fn distribution_match_vars(g: &mut Graph, mu: Var, sigma: Var) -> Var {
    let log_sigma = g.log(sigma);
    let s2 = g.square(sigma);
    let m2 = g.square(mu);
    let sum = g.add(s2, m2);
    let half = g.scale(sum, 0.5);
    let kl = g.sub(half, log_sigma);
    let kl = g.add_scalar(kl, -0.5);
    g.mean(kl)
}

/// Distribution-matching loss summed over the given latent Gaussians (one per
/// self flow).
pub fn loss_distribution_match(latents: &[(&Matrix, &Matrix)]) -> Result<f64> {
    let mut total = 0.0;
    for (mu, sigma) in latents {
        if mu.dim() != sigma.dim() {
            return Err(GeeaError::Shape(format!("μ {:?} vs σ {:?}", mu.dim(), sigma.dim())));
        }
        if sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(GeeaError::Argument("σ must be strictly positive".into()));
        }
        let sum: f64 = mu
            .iter()
            .zip(sigma.iter())
            .map(|(&m, &s)| -s.ln() + (s * s + m * m) / 2.0 - 0.5)
            .sum();
        total += sum / mu.len().max(1) as f64;
    }
    Ok(total)
}

/// Prior reconstruction inside a graph: BCE for label modals, MSE for image.
pub fn prior_reconstruction_vars(g: &mut Graph, prediction: Var, target: Matrix, modal: Modal) -> Var {
    match modal {
        Modal::Graph | Modal::Attr => g.bce_mean(prediction, target),
        Modal::Image => {
            let t = g.constant(target);
            g.mse(prediction, t)
        }
    }
}

pub fn loss_prior_reconstruction(prediction: &Matrix, target: &Matrix, modal: Modal) -> Result<f64> {
    if prediction.dim() != target.dim() {
        return Err(GeeaError::Shape(format!(
            "{} prediction {:?} vs target {:?}",
            modal.name(),
            prediction.dim(),
            target.dim()
        )));
    }
    let n = prediction.len().max(1) as f64;
    Ok(match modal {
        Modal::Graph | Modal::Attr => {
            prediction
                .iter()
                .zip(target.iter())
                .map(|(&p, &t)| {
                    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n
        }
        Modal::Image => prediction.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n,
    })
}

/// `MSE(fuse(reconstructed subs), NoGradient(true joint))`.
pub fn post_reconstruction_vars(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &EncoderParams,
    reconstructed: &SubVars,
    true_joint: Var,
) -> Var {
    let fused = fuse_vars(g, store, encoder, reconstructed);
    let target = g.detach(true_joint);
    g.mse(fused, target)
}

pub fn loss_post_reconstruction(
    reconstructed: &[Matrix; 3],
    encoder: &EncoderParams,
    store: &ParamStore,
    true_joint: &Matrix,
) -> Result<f64> {
    let fused = crate::encoder::fuse(&reconstructed[0], &reconstructed[1], &reconstructed[2], encoder, store)?;
    if fused.dim() != true_joint.dim() {
        return Err(GeeaError::Shape(format!(
            "re-fused joint {:?} vs true joint {:?}",
            fused.dim(),
            true_joint.dim()
        )));
    }
    Ok(fused.iter().zip(true_joint.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / fused.len().max(1) as f64)
}

/// Term weights of the total loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Indexed in [`FlowTag::ALL`] order: x→x, y→y, x→y, y→x.
    pub flow: [f64; 4],
    pub distribution_match: f64,
    pub prior: f64,
    pub post: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            flow: [1.0, 1.0, 5.0, 5.0],
            distribution_match: 0.5,
            prior: 1.0,
            post: 1.0,
        }
    }
}

impl LossWeights {
    pub fn flow_weight(&self, flow: FlowTag) -> f64 {
        let i = FlowTag::ALL.iter().position(|&f| f == flow).unwrap();
        self.flow[i]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .flow
            .iter()
            .chain([&self.distribution_match, &self.prior, &self.post]);
        for &w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(GeeaError::Argument(format!("loss weight {w} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Which objective terms are active; used for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSwitches {
    pub prediction_match: bool,
    pub distribution_match: bool,
    pub prior: bool,
    pub post: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        TermSwitches {
            prediction_match: true,
            distribution_match: true,
            prior: true,
            post: true,
        }
    }
}

impl TermSwitches {
    pub fn prediction_only() -> Self {
        TermSwitches {
            prediction_match: true,
            distribution_match: false,
            prior: false,
            post: false,
        }
    }

    /// Whether the M-VAE runs at all.
    pub fn uses_mvae(&self) -> bool {
        self.distribution_match || self.prior || self.post
    }
}

/// Individual loss values of one step. `total` is filled by [`total_loss`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "l_ns")]
    pub prediction_match: Option<f64>,
    /// Summed over modals and self flows.
    #[serde(rename = "l_dm")]
    pub distribution_match: Option<f64>,
    #[serde(rename = "l_prior_by_flow_modal")]
    pub prior: BTreeMap<FlowTag, BTreeMap<Modal, f64>>,
    #[serde(rename = "l_post_by_flow")]
    pub post: BTreeMap<FlowTag, f64>,
    pub total: f64,
}

/// Weighted total:
/// `Σ_f w_f (w_prior Σ_m prior(f, m) + w_post post(f)) + w_dm · dm + l_ns`.
///
/// Every term enabled in `switches` must be present, for every flow in
/// `flows` and every modal where applicable.
pub fn total_loss(parts: &LossBreakdown, weights: &LossWeights, switches: &TermSwitches, flows: &[FlowTag]) -> Result<f64> {
    let missing = |what: String| GeeaError::Contract(format!("loss part missing: {what}"));
    let mut total = 0.0;
    if switches.prediction_match {
        total += parts.prediction_match.ok_or_else(|| missing("prediction match".into()))?;
    }
    if switches.distribution_match {
        total += weights.distribution_match * parts.distribution_match.ok_or_else(|| missing("distribution match".into()))?;
    }
    for &flow in flows {
        let wf = weights.flow_weight(flow);
        if switches.prior {
            let by_modal = parts.prior.get(&flow).ok_or_else(|| missing(format!("prior {flow}")))?;
            for m in Modal::ALL {
                let v = by_modal.get(&m).ok_or_else(|| missing(format!("prior {flow}/{}", m.name())))?;
                total += wf * weights.prior * v;
            }
        }
        if switches.post {
            total += wf * weights.post * parts.post.get(&flow).ok_or_else(|| missing(format!("post {flow}")))?;
        }
    }
    Ok(total)
}

/// Scalar form of the per-anchor prediction-matching term, used as a
/// reference in tests.
pub fn prediction_match_scalar(scores: &[Vec<f64>]) -> f64 {
    let b = scores.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut term = -log_sigmoid(scores[i][i]);
        if b > 1 {
            let neg: f64 = (0..b).filter(|&j| j != i).map(|j| log_sigmoid(-scores[i][j])).sum();
            term -= neg / (b - 1) as f64;
        }
        total += term;
    }
    total / b as f64
}
