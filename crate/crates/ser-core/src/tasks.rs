//! Task heads, the per-task losses, the stage loss compositions, and greedy
//! sequence decoding.
//!
//! Every head is two affine layers around a relu. The post-relu activation
//! is each auxiliary head's hidden tap (pooled over frames for the sequence
//! head), which the co-attention gate consumes.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Utterance, EMOTIONS, VOCAB};
use crate::nn::{init_uniform, mean_pool_valid};
use crate::optim::ParamSet;
use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

/// Auxiliary tasks in canonical order; this order fixes weight application,
/// co-attention input order, and report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Gender,
    Speaker,
    Style,
    Asr,
}

pub const ALL_TASKS: [Task; 4] = [Task::Gender, Task::Speaker, Task::Style, Task::Asr];

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Gender => "gender",
            Task::Speaker => "speaker",
            Task::Style => "style",
            Task::Asr => "asr",
        }
    }

    /// Output classes; the sequence task adds a trailing blank.
    pub fn classes(self, n_speakers: usize) -> usize {
        match self {
            Task::Gender => 2,
            Task::Speaker => n_speakers,
            Task::Style => 2,
            Task::Asr => VOCAB.len() + 1,
        }
    }

    /// Classification target for an utterance; `None` for the sequence task.
    pub fn label(self, utt: &Utterance) -> Option<usize> {
        match self {
            Task::Gender => Some(utt.gender.index()),
            Task::Speaker => Some(utt.speaker),
            Task::Style => Some(utt.style.index()),
            Task::Asr => None,
        }
    }
}

/// Index of the blank class in the sequence head's output.
pub fn blank_id() -> usize {
    VOCAB.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub asr: f64,
    pub gender: f64,
    pub speaker: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            asr: 1.0,
            gender: 0.3,
            speaker: 0.3,
            style: 0.3,
        }
    }
}

impl LossWeights {
    pub fn for_task(&self, task: Task) -> f64 {
        match task {
            Task::Gender => self.gender,
            Task::Speaker => self.speaker,
            Task::Style => self.style,
            Task::Asr => self.asr,
        }
    }

    pub fn validate(&self, enabled: &BTreeSet<Task>) -> Result<()> {
        for &task in enabled {
            if self.for_task(task) < 0.0 {
                return Err(Error::BadConfig(format!(
                    "negative loss weight for task {}",
                    task.name()
                )));
            }
        }
        if !enabled.is_empty() && enabled.iter().all(|&t| self.for_task(t) == 0.0) {
            return Err(Error::BadConfig(
                "stage-1 loss weights are all zero for the enabled tasks".into(),
            ));
        }
        Ok(())
    }
}

// ---- heads ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Auxiliary hidden width `d_a`: the tap consumed by co-attention.
    pub aux_dim: usize,
    /// Hidden width of the emotion head.
    pub ser_hidden: usize,
    /// Train-time dropout inside the emotion head.
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            aux_dim: 32,
            ser_hidden: 64,
            dropout: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aux_dim == 0 || self.ser_hidden == 0 {
            return Err(Error::BadConfig("head widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Two affine layers with a relu between, named `<prefix>.{w1,b1,w2,b2}`.
pub fn init_two_layer<R: Rng>(
    prefix: &str,
    d_in: usize,
    hidden: usize,
    classes: usize,
    set: &mut ParamSet,
    rng: &mut R,
) -> Result<()> {
    set.insert(format!("{prefix}.w1"), init_uniform(&[d_in, hidden], d_in, rng))?;
    set.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
    set.insert(
        format!("{prefix}.w2"),
        init_uniform(&[hidden, classes], hidden, rng),
    )?;
    set.insert(format!("{prefix}.b2"), Tensor::zeros(&[classes]))
}

fn bound(params: &BTreeMap<String, VarId>, name: String) -> Result<VarId> {
    params
        .get(&name)
        .copied()
        .ok_or(Error::UnknownParameter { name })
}

fn two_layer(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    prefix: &str,
    x: VarId,
) -> Result<(VarId, VarId)> {
    let w1 = bound(params, format!("{prefix}.w1"))?;
    let b1 = bound(params, format!("{prefix}.b1"))?;
    let w2 = bound(params, format!("{prefix}.w2"))?;
    let b2 = bound(params, format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add(logits, b2)?;
    Ok((h, logits))
}

/// Logits plus the post-relu hidden tap (`[1, d_a]`) of an auxiliary head.
pub struct AuxOut {
    pub logits: VarId,
    pub hidden: VarId,
}

/// Classification auxiliary head over pooled fused features.
pub fn aux_class_head(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    task: Task,
    fused: VarId,
    frames: usize,
) -> Result<AuxOut> {
    let pooled = mean_pool_valid(tape, fused, frames)?;
    let (hidden, logits) = two_layer(tape, params, &format!("heads.{}", task.name()), pooled)?;
    Ok(AuxOut { logits, hidden })
}

/// Encoder frames averaged per CTC step. The encoder hops 4 ms — far finer
/// than token durations — so the head coarsens time 4× before the logits;
/// fewer blank steps per emission makes the alignment loss far easier to
/// escape from its all-blank plateau.
pub const ASR_POOL: usize = 4;

/// CTC steps the head emits for `frames` encoder frames.
pub fn asr_steps(frames: usize) -> usize {
    frames.div_ceil(ASR_POOL)
}

/// Sequence head over fused features: time is mean-pooled in groups of
/// [`ASR_POOL`] frames, logits are `[steps, V+1]` (blank last) and the
/// hidden tap is the step-mean of the relu activation.
pub fn asr_head(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    fused: VarId,
    frames: usize,
) -> Result<AuxOut> {
    let valid = tape.slice(fused, 0, 0, frames)?;
    let steps = asr_steps(frames);
    let mut pool = Tensor::zeros(&[steps, frames]);
    for j in 0..steps {
        let lo = j * ASR_POOL;
        let hi = ((j + 1) * ASR_POOL).min(frames);
        for t in lo..hi {
            pool.data_mut()[j * frames + t] = 1.0 / (hi - lo) as f64;
        }
    }
    let pool = tape.watch(&pool)?;
    let coarse = tape.matmul(pool, valid)?;
    let (hidden, logits) = two_layer(tape, params, "heads.asr", coarse)?;
    let pooled = tape.mean_axis(hidden, 0)?;
    Ok(AuxOut {
        logits,
        hidden: pooled,
    })
}

/// Emotion head: affine → relu → dropout (train only) → affine. `input` is
/// either the co-attention output or the pooled fused features.
pub fn ser_head<R: Rng>(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    input: VarId,
    dropout: f64,
    rng: &mut R,
) -> Result<VarId> {
    let w1 = bound(params, "heads.ser.w1".into())?;
    let b1 = bound(params, "heads.ser.b1".into())?;
    let w2 = bound(params, "heads.ser.w2".into())?;
    let b2 = bound(params, "heads.ser.b2".into())?;
    let h = tape.matmul(input, w1)?;
    let h = tape.add(h, b1)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, dropout, rng)?;
    let logits = tape.matmul(h, w2)?;
    tape.add(logits, b2)
}

pub fn emotion_classes() -> usize {
    EMOTIONS
}

// ---- losses -----------------------------------------------------------------

/// `-log_softmax(logits)[label]` for a `[1, C]` logit row.
pub fn cross_entropy(tape: &mut Tape, logits: VarId, label: usize) -> Result<VarId> {
    let shape = tape.value(logits).shape().to_vec();
    let classes = *shape.last().unwrap();
    if shape.iter().product::<usize>() != classes {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![1, classes],
        });
    }
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let lsm = tape.log_softmax(logits)?;
    let axis = shape.len() - 1;
    let picked = tape.slice(lsm, axis, label, 1)?;
    tape.scale(picked, -1.0)
}

/// CTC loss over raw sequence logits: log-softmax per frame, then the
/// alignment-sum recursion (blank is the trailing class).
pub fn ctc_from_logits(tape: &mut Tape, logits: VarId, targets: &[usize]) -> Result<VarId> {
    let lp = tape.log_softmax(logits)?;
    tape.ctc_loss(lp, targets, blank_id())
}

/// Per-frame argmax, collapse adjacent repeats, drop blanks.
pub fn ctc_greedy_decode(frame_scores: &Tensor, blank: usize) -> Vec<usize> {
    let shape = frame_scores.shape();
    let (t, c) = (shape[0], shape[1]);
    let data = frame_scores.data();
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for frame in 0..t {
        let row = &data[frame * c..(frame + 1) * c];
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        if best != prev && best != blank {
            out.push(best);
        }
        prev = best;
    }
    out
}

/// Stage-1 objective: the weighted sum of enabled auxiliary losses. The
/// emotion loss is excluded by construction.
pub fn stage1_loss(
    tape: &mut Tape,
    losses: &BTreeMap<Task, VarId>,
    weights: &LossWeights,
    enabled: &BTreeSet<Task>,
) -> Result<VarId> {
    let provided: BTreeSet<Task> = losses.keys().copied().collect();
    if provided != *enabled {
        return Err(Error::WeightTaskMismatch {
            stage: 1,
            msg: format!(
                "losses for {:?}, enabled {:?}",
                provided.iter().map(|t| t.name()).collect::<Vec<_>>(),
                enabled.iter().map(|t| t.name()).collect::<Vec<_>>()
            ),
        });
    }
    if enabled.is_empty() {
        return Err(Error::WeightTaskMismatch {
            stage: 1,
            msg: "no auxiliary tasks enabled".into(),
        });
    }
    weights.validate(enabled)?;
    let mut acc: Option<VarId> = None;
    for (&task, &loss) in losses {
        let term = tape.scale(loss, weights.for_task(task))?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one task"))
}

/// Stage-2 objective is the emotion loss itself.
pub fn stage2_loss(ser_loss: VarId) -> VarId {
    ser_loss
}
