//! Layer fusion for the encoder stack and the task-interplay gate.
//!
//! Two stack fusions: residual integration concatenates the final layer with
//! a learned weighted sum of all earlier layers (`[F_L ; sum w_i F_i]`,
//! width 2d), while plain weighted-sum fusion blends all L layers into width
//! d. The co-attention gate then lets the pooled emotion vector attend over
//! the auxiliary tasks' hidden vectors and rescales itself per dimension.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::init_uniform;
use crate::optim::ParamSet;
use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Ari,
    WeightedSum,
}

impl FusionMode {
    /// Feature width of the fused output for a given encoder width.
    pub fn width(self, model_dim: usize) -> usize {
        match self {
            FusionMode::Ari => 2 * model_dim,
            FusionMode::WeightedSum => model_dim,
        }
    }
}

/// Residual-integration weights: one per layer `1..L-1`, uniform start.
pub fn init_ari_weights(n_layers: usize, set: &mut ParamSet) -> Result<()> {
    let n = n_layers - 1;
    set.insert("fusion.ari_w", Tensor::full(&[n], 1.0 / n as f64))
}

/// Weighted-sum weights: one per layer, uniform start.
pub fn init_sum_weights(n_layers: usize, set: &mut ParamSet) -> Result<()> {
    set.insert(
        "fusion.sum_v",
        Tensor::full(&[n_layers], 1.0 / n_layers as f64),
    )
}

/// `concat(F_L, sum_{i=1}^{L-1} w_i F_i)` along the feature axis.
pub fn ari_fuse(tape: &mut Tape, taps: &[VarId], w: VarId) -> Result<VarId> {
    let l = taps.len();
    let wn = tape.value(w).numel();
    if l < 2 || wn != l - 1 {
        return Err(Error::ShapeMismatch {
            op: "ari_fuse",
            lhs: vec![l],
            rhs: vec![wn],
        });
    }
    let blend = blend_layers(tape, &taps[..l - 1], w)?;
    tape.concat(&[taps[l - 1], blend], 1)
}

/// `sum_{i=1}^{L} v_i F_i`.
pub fn weighted_sum_fuse(tape: &mut Tape, taps: &[VarId], v: VarId) -> Result<VarId> {
    let vn = tape.value(v).numel();
    if taps.is_empty() || vn != taps.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_sum_fuse",
            lhs: vec![taps.len()],
            rhs: vec![vn],
        });
    }
    blend_layers(tape, taps, v)
}

fn blend_layers(tape: &mut Tape, taps: &[VarId], weights: VarId) -> Result<VarId> {
    let mut acc: Option<VarId> = None;
    for (i, &tap) in taps.iter().enumerate() {
        let wi = tape.slice(weights, 0, i, 1)?;
        let term = tape.mul(tap, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Gate projections shared across all auxiliary tasks. `d_s` is the pooled
/// emotion-feature width, `d_a` the auxiliary hidden width.
pub fn init_coattn_params<R: Rng>(
    d_s: usize,
    d_a: usize,
    set: &mut ParamSet,
    rng: &mut R,
) -> Result<()> {
    set.insert("coattn.q", init_uniform(&[d_s, d_a], d_s, rng))?;
    set.insert("coattn.k", init_uniform(&[d_a, d_a], d_a, rng))?;
    set.insert("coattn.v", init_uniform(&[d_a, d_a], d_a, rng))?;
    set.insert("coattn.g", init_uniform(&[d_a, d_s], d_a, rng))?;
    set.insert("coattn.b", Tensor::zeros(&[d_s]))
}

/// Pooled emotion vector `ser` (`[1, d_s]`) attends over auxiliary hidden
/// vectors (`[1, d_a]` each): scores `(ser Q)·(h_i K)/sqrt(d_a)` softmax to
/// weights, the blended context is projected to a sigmoid gate, and the gated
/// emotion vector is concatenated with every auxiliary vector in order.
pub fn co_attention(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    ser: VarId,
    aux: &[VarId],
) -> Result<VarId> {
    if aux.is_empty() {
        return Err(Error::InvalidOp {
            op: "co_attention",
            msg: "no auxiliary vectors; bypass the gate in single-task mode".into(),
        });
    }
    let get = |name: &str| -> Result<VarId> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter {
                name: name.to_string(),
            })
    };
    let (q, k, v) = (get("coattn.q")?, get("coattn.k")?, get("coattn.v")?);
    let (g, b) = (get("coattn.g")?, get("coattn.b")?);
    let d_a = tape.value(k).shape()[0];
    let scale = 1.0 / (d_a as f64).sqrt();

    let query = tape.matmul(ser, q)?;
    let mut scores = Vec::with_capacity(aux.len());
    let mut values = Vec::with_capacity(aux.len());
    for &h in aux {
        let key = tape.matmul(h, k)?;
        let s = tape.matmul_abt(query, key)?;
        scores.push(tape.scale(s, scale)?);
        values.push(tape.matmul(h, v)?);
    }
    let scores = if scores.len() == 1 {
        scores[0]
    } else {
        tape.concat(&scores, 1)?
    };
    let alpha = tape.softmax(scores)?;
    let stacked = if values.len() == 1 {
        values[0]
    } else {
        tape.concat(&values, 0)?
    };
    let context = tape.matmul(alpha, stacked)?;

    let pre = tape.matmul(context, g)?;
    let pre = tape.add(pre, b)?;
    let gate = tape.sigmoid(pre)?;
    let gated = tape.mul(ser, gate)?;

    let mut parts = vec![gated];
    parts.extend_from_slice(aux);
    tape.concat(&parts, 1)
}
