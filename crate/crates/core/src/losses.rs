//! Training objectives for the position and orientation branches.
//!
//! Every loss comes in two forms: a value-only function on poses, and a
//! `*_grad` variant returning the gradient w.r.t. the raw network output it
//! is applied to.

use serde::{Deserialize, Serialize};

use crate::codec::{encode_soft, OrientationGrid, ProbabilityVector};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Position3, UnitQuaternion};
use crate::model::NetOutput;

/// Guard for normalizing a regressed quaternion.
pub const QUAT_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the orientation term.
    pub lambda_ori: f64,
    /// `|<q, q_gt>|` is clamped to `1 - epsilon_clamp` before `acos`.
    pub epsilon_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ori: 1.0,
            epsilon_clamp: 1e-7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ori >= 0.0) {
            return Err(Error::InvalidConfig("lambda_ori must be >= 0".into()));
        }
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp < 1e-3) {
            return Err(Error::InvalidConfig("epsilon_clamp must be in (0, 1e-3)".into()));
        }
        Ok(())
    }
}

/// Orientation objective used by [`combined_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationLoss {
    /// `acos |<q, q_gt>|` on the normalized regressed quaternion.
    Regression,
    /// The regression loss divided by the ground-truth distance.
    RegressionDistanceWeighted,
    /// Negative log-likelihood of a Gaussian soft label.
    SoftNll,
}

/// `|t_pred - t_gt| / |t_gt|`.
pub fn position_loss(t_pred: Position3, t_gt: Position3) -> Result<f64> {
    position_loss_grad(t_pred.to_array(), t_gt).map(|(l, _)| l)
}

pub fn position_loss_grad(t_pred: [f64; 3], t_gt: Position3) -> Result<(f64, [f64; 3])> {
    let n_gt = t_gt.norm();
    if !(n_gt > 0.0) {
        return Err(Error::ZeroNormGroundTruth);
    }
    let d = [t_pred[0] - t_gt.x, t_pred[1] - t_gt.y, t_pred[2] - t_gt.z];
    let nd = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let loss = nd / n_gt;
    if nd == 0.0 {
        return Ok((0.0, [0.0; 3]));
    }
    let s = 1.0 / (nd * n_gt);
    Ok((loss, [d[0] * s, d[1] * s, d[2] * s]))
}

/// `acos(clamp(|<q_pred, q_gt>|, 0, 1 - eps))`, in `[0, pi/2]`.
pub fn orientation_regression_loss(q_pred: UnitQuaternion, q_gt: UnitQuaternion, eps: f64) -> f64 {
    q_pred.dot(q_gt).abs().clamp(0.0, 1.0 - eps).acos()
}

/// Regression loss on a raw 4-vector, normalized inside the loss, with its
/// gradient w.r.t. the raw vector.
pub fn orientation_regression_loss_grad(
    raw: [f64; 4],
    q_gt: UnitQuaternion,
    eps: f64,
) -> (f64, [f64; 4]) {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(QUAT_NORM_EPS);
    let q = raw.map(|v| v / norm);
    let g = q_gt.to_array();
    let dot: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
    let c = dot.abs();
    let hi = 1.0 - eps;
    if c >= hi {
        return (hi.acos(), [0.0; 4]);
    }
    let loss = c.acos();
    // dL/dc * sign(dot) * (I - q q^T) g / |raw|
    let k = -1.0 / (1.0 - c * c).sqrt() * dot.signum() / norm;
    let grad = std::array::from_fn(|i| k * (g[i] - dot * q[i]));
    (loss, grad)
}

/// Orientation regression loss scaled by inverse ground-truth distance
/// (rad / m): errors on close targets cost more.
pub fn orientation_regression_loss_distance_weighted(
    q_pred: UnitQuaternion,
    q_gt: UnitQuaternion,
    t_gt: Position3,
    eps: f64,
) -> Result<f64> {
    let n = t_gt.norm();
    if !(n > 0.0) {
        return Err(Error::ZeroNormGroundTruth);
    }
    Ok(orientation_regression_loss(q_pred, q_gt, eps) / n)
}

pub fn orientation_regression_loss_distance_weighted_grad(
    raw: [f64; 4],
    q_gt: UnitQuaternion,
    t_gt: Position3,
    eps: f64,
) -> Result<(f64, [f64; 4])> {
    let n = t_gt.norm();
    if !(n > 0.0) {
        return Err(Error::ZeroNormGroundTruth);
    }
    let (l, g) = orientation_regression_loss_grad(raw, q_gt, eps);
    Ok((l / n, g.map(|v| v / n)))
}

/// `-sum_i target_i * log softmax_i(logits)` via log-sum-exp.
pub fn soft_classification_nll(logits: &[f64], target: &ProbabilityVector) -> Result<f64> {
    soft_classification_nll_grad(logits, target).map(|(l, _)| l)
}

/// NLL and its logit gradient `softmax(logits) - target`.
pub fn soft_classification_nll_grad(
    logits: &[f64],
    target: &ProbabilityVector,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::shape(target.len(), logits.len()));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let t = target.values();
    let loss = t
        .iter()
        .zip(logits)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * (lse - l))
        .sum();
    let grad = logits
        .iter()
        .zip(t)
        .map(|(l, p)| (l - lse).exp() - p)
        .collect();
    Ok((loss, grad))
}

/// Batch-mean objective with gradients w.r.t. the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub position: f64,
    pub orientation: f64,
    /// Per-sample `position + lambda_ori * orientation`.
    pub per_sample: Vec<f64>,
    pub d_positions: Vec<f32>,
    pub d_orientation: Vec<f32>,
}

/// Mean over the batch of `position_loss + lambda_ori * orientation term`.
///
/// Soft-classification targets are built from `labels` with `grid`, which is
/// required for [`OrientationLoss::SoftNll`].
pub fn combined_loss(
    out: &NetOutput,
    labels: &[Pose],
    grid: Option<&OrientationGrid>,
    weights: &LossWeights,
    mode: OrientationLoss,
) -> Result<BatchLoss> {
    let b = out.batch;
    if labels.len() != b {
        return Err(Error::shape(b, labels.len()));
    }
    if b == 0 {
        return Err(Error::EmptyInput);
    }
    let dim = out.orientation_dim;
    match mode {
        OrientationLoss::SoftNll => {
            let g = grid.ok_or_else(|| {
                Error::InvalidConfig("soft-classification loss needs an orientation grid".into())
            })?;
            if g.len() != dim {
                return Err(Error::shape(g.len(), dim));
            }
        }
        _ if dim != 4 => return Err(Error::shape(4, dim)),
        _ => {}
    }
    let inv_b = 1.0 / b as f64;
    let mut res = BatchLoss {
        total: 0.0,
        position: 0.0,
        orientation: 0.0,
        per_sample: Vec::with_capacity(b),
        d_positions: vec![0.0; b * 3],
        d_orientation: vec![0.0; b * dim],
    };
    for (i, label) in labels.iter().enumerate() {
        let (lp, gp) = position_loss_grad(out.position(i), label.position)?;
        let row: Vec<f64> = out.orientation_row(i).iter().map(|v| *v as f64).collect();
        let (lo, go) = match mode {
            OrientationLoss::Regression => {
                let raw = [row[0], row[1], row[2], row[3]];
                let (l, g) =
                    orientation_regression_loss_grad(raw, label.orientation, weights.epsilon_clamp);
                (l, g.to_vec())
            }
            OrientationLoss::RegressionDistanceWeighted => {
                let raw = [row[0], row[1], row[2], row[3]];
                let (l, g) = orientation_regression_loss_distance_weighted_grad(
                    raw,
                    label.orientation,
                    label.position,
                    weights.epsilon_clamp,
                )?;
                (l, g.to_vec())
            }
            OrientationLoss::SoftNll => {
                let target = encode_soft(label.orientation, grid.expect("checked above"));
                soft_classification_nll_grad(&row, &target)?
            }
        };
        let sample = lp + weights.lambda_ori * lo;
        res.position += lp * inv_b;
        res.orientation += lo * inv_b;
        res.total += sample * inv_b;
        res.per_sample.push(sample);
        for k in 0..3 {
            res.d_positions[i * 3 + k] = (gp[k] * inv_b) as f32;
        }
        let scale = weights.lambda_ori * inv_b;
        for (d, g) in res.d_orientation[i * dim..(i + 1) * dim].iter_mut().zip(go) {
            *d = (g * scale) as f32;
        }
    }
    Ok(res)
}
