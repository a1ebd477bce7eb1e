//! Weighted dice similarity/loss and the voxel-count evaluation metrics.

use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};
use crate::volume::{Volume, VolumeError};
use serde::{Deserialize, Serialize};

pub const DEFAULT_BETA: f64 = 6.0;
/// Numerator/denominator smoothing used during training only.
pub const TRAIN_SMOOTH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Per-case metric report; `None` marks an undefined metric (zero
/// denominator) and serializes as JSON null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub case_id: String,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub dice: Option<f64>,
}

fn validate_dice_inputs(p0: &Volume, g0: &Volume) -> Result<(), VolumeError> {
    p0.check_same_extents(g0)?;
    if !g0.is_binary() {
        return Err(VolumeError::NotBinary("dice ground truth".into()));
    }
    if p0.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(VolumeError::InvalidArgument(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Weighted dice similarity
/// `M(beta) = S1 / (S1 + 0.5 beta (S2 + S3))` with
/// `S1 = sum p0 g0`, `S2 = sum p0 (1-g0)`, `S3 = sum (1-p0) g0`.
/// `beta = 1` reduces to soft dice. Empty prediction against empty truth is
/// perfect agreement, M = 1.
pub fn weighted_dice_similarity(
    p0: &Volume,
    g0: &Volume,
    beta: f64,
) -> Result<f64, VolumeError> {
    validate_dice_inputs(p0, g0)?;
    if beta <= 0.0 {
        return Err(VolumeError::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    let mut s3 = 0.0f64;
    for (&p, &g) in p0.data().iter().zip(g0.data()) {
        let (p, g) = (p as f64, g as f64);
        s1 += p * g;
        s2 += p * (1.0 - g);
        s3 += (1.0 - p) * g;
    }
    let denom = s1 + 0.5 * beta * (s2 + s3);
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(s1 / denom)
}

/// Weighted dice loss `1 - M(beta)` on volumes (evaluation form, no
/// smoothing).
pub fn weighted_dice_loss(p0: &Volume, g0: &Volume, beta: f64) -> Result<f64, VolumeError> {
    Ok(1.0 - weighted_dice_similarity(p0, g0, beta)?)
}

/// Differentiable weighted dice loss on the tape. `p0` holds foreground
/// probabilities of any shape; `g0` is the binary label tensor of the same
/// shape. `smooth_eps` stabilizes early training and is zero for exact
/// evaluation semantics.
pub fn weighted_dice_loss_node<T: Scalar>(
    tape: &mut Tape<T>,
    p0: NodeId,
    g0: &Tensor<T>,
    beta: f64,
    smooth_eps: f64,
) -> Result<NodeId, TensorError> {
    if tape.value(p0).shape() != g0.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "weighted dice loss (p0 vs g0)".into(),
            lhs: tape.value(p0).shape().to_vec(),
            rhs: g0.shape().to_vec(),
        });
    }
    let g0_node = tape.constant(g0.clone());
    let g1 = g0.map(|v| T::one() - v);
    let g1_node = tape.constant(g1);
    let p1 = tape.affine(p0, -1.0, 1.0);
    let s1t = tape.mul(p0, g0_node)?;
    let s1 = tape.sum_all(s1t);
    let s2t = tape.mul(p0, g1_node)?;
    let s2 = tape.sum_all(s2t);
    let s3t = tape.mul(p1, g0_node)?;
    let s3 = tape.sum_all(s3t);
    let s23 = tape.add(s2, s3)?;
    let penalty = tape.affine(s23, 0.5 * beta, 0.0);
    let num = tape.affine(s1, 1.0, smooth_eps);
    let den_base = tape.add(s1, penalty)?;
    let den = tape.affine(den_base, 1.0, smooth_eps);
    let m = tape.div(num, den)?;
    Ok(tape.affine(m, -1.0, 1.0))
}

/// Exact voxel confusion counts between binary volumes.
pub fn confusion(pred: &Volume, truth: &Volume) -> Result<ConfusionCounts, VolumeError> {
    pred.check_same_extents(truth)?;
    if !pred.is_binary() {
        return Err(VolumeError::NotBinary("prediction".into()));
    }
    if !truth.is_binary() {
        return Err(VolumeError::NotBinary("truth".into()));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &g) in pred.data().iter().zip(truth.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision, sensitivity and dice from confusion counts; a zero denominator
/// yields `None` rather than a fabricated zero.
pub fn metrics(case_id: &str, c: &ConfusionCounts) -> MetricsRow {
    let ratio = |num: u64, den: u64| (den != 0).then(|| num as f64 / den as f64);
    MetricsRow {
        case_id: case_id.to_string(),
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}
