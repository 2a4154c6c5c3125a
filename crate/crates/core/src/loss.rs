//! InfoNCE-style objectives over cosine similarities.
//!
//! The joint loss contrasts the anchor `q` against its positive `z⁺`, the `k`
//! intra-video negatives `z_j⁻` and the aggregated cross-video negative `ẑ⁻`.
//! The cross-only loss drops the intra-video terms. Both go through
//! [`contrastive_loss`], so `loss_full` with `k = 0` is bitwise `loss_cross`.

use crate::error::{Error, Result};

/// Temperature shared by the similarity weighting and the loss.
pub const DEFAULT_TAU: f64 = 0.07;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossInputs {
    pub q: Vec<f64>,
    pub z_plus: Vec<f64>,
    pub z_minus: Vec<Vec<f64>>,
    pub z_hat_minus: Vec<f64>,
    pub tau: f64,
}

/// Gradients of the joint loss with respect to every input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub q: Vec<f64>,
    pub z_plus: Vec<f64>,
    pub z_minus: Vec<Vec<f64>>,
    pub z_hat_minus: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR)
}

/// `s(a, b) = a·b / (‖a‖ ‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// `−log softmax(logits)[0]` where `logits = [positive, negatives...]`, with
/// max subtraction. When the positive is the max the result goes through
/// `ln_1p` so near-zero losses keep their precision.
pub fn nll_positive(positive: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().copied().fold(positive, f64::max);
    if max == positive {
        negatives.iter().map(|l| (l - positive).exp()).sum::<f64>().ln_1p()
    } else {
        let sum = (positive - max).exp() + negatives.iter().map(|l| (l - max).exp()).sum::<f64>();
        (max - positive) + sum.ln()
    }
}

fn validate(q: &[f64], z_plus: &[f64], negatives: &[&[f64]], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Temperature(tau));
    }
    let dim = q.len();
    for v in std::iter::once(z_plus).chain(negatives.iter().copied()) {
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !(finite(q) && finite(z_plus) && negatives.iter().all(|v| finite(v))) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Contrastive loss of `q` against one positive and any list of negatives.
pub fn contrastive_loss(q: &[f64], z_plus: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    validate(q, z_plus, negatives, tau)?;
    let pos = cosine(q, z_plus) / tau;
    let negs: Vec<f64> = negatives.iter().map(|n| cosine(q, n) / tau).collect();
    Ok(nll_positive(pos, &negs))
}

fn joint_negatives(inputs: &LossInputs) -> Vec<&[f64]> {
    inputs
        .z_minus
        .iter()
        .map(Vec::as_slice)
        .chain(std::iter::once(inputs.z_hat_minus.as_slice()))
        .collect()
}

/// Joint intra- and cross-video loss.
pub fn loss_full(inputs: &LossInputs) -> Result<f64> {
    contrastive_loss(&inputs.q, &inputs.z_plus, &joint_negatives(inputs), inputs.tau)
}

/// Cross-video-only loss.
pub fn loss_cross(q: &[f64], z_plus: &[f64], z_hat_minus: &[f64], tau: f64) -> Result<f64> {
    contrastive_loss(q, z_plus, &[z_hat_minus], tau)
}

/// Loss plus gradients w.r.t. `q`, `z⁺` and every negative, for an arbitrary negative list.
pub fn contrastive_gradients(
    q: &[f64],
    z_plus: &[f64],
    negatives: &[&[f64]],
    tau: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    validate(q, z_plus, negatives, tau)?;
    let qn = norm(q);
    let q_hat: Vec<f64> = q.iter().map(|x| x / qn).collect();

    let others: Vec<&[f64]> = std::iter::once(z_plus).chain(negatives.iter().copied()).collect();
    let sims: Vec<f64> = others.iter().map(|v| cosine(q, v)).collect();
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let loss = nll_positive(logits[0], &logits[1..]);

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    // dL/ds_i = (p_i − [i = 0]) / τ
    let d_sims: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (w / total - if i == 0 { 1.0 } else { 0.0 }) / tau)
        .collect();

    let mut d_q = vec![0.0; q.len()];
    let mut d_others = Vec::with_capacity(others.len());
    for ((v, &s), &ds) in others.iter().zip(&sims).zip(&d_sims) {
        let vn = norm(v);
        // ∂s/∂q = (v̂ − s q̂)/‖q‖,  ∂s/∂v = (q̂ − s v̂)/‖v‖
        for ((dq, vi), qh) in d_q.iter_mut().zip(v.iter()).zip(&q_hat) {
            *dq += ds * (vi / vn - s * qh) / qn;
        }
        d_others.push(
            v.iter()
                .zip(&q_hat)
                .map(|(vi, qh)| ds * (qh - s * vi / vn) / vn)
                .collect::<Vec<f64>>(),
        );
    }
    let d_plus = d_others.remove(0);
    Ok((loss, d_q, d_plus, d_others))
}

/// Closed-form gradients of [`loss_full`].
pub fn loss_gradients(inputs: &LossInputs) -> Result<LossGradients> {
    let (_, q, z_plus, mut negs) =
        contrastive_gradients(&inputs.q, &inputs.z_plus, &joint_negatives(inputs), inputs.tau)?;
    let z_hat_minus = negs.pop().expect("ẑ⁻ is always the last negative");
    Ok(LossGradients {
        q,
        z_plus,
        z_minus: negs,
        z_hat_minus,
    })
}
