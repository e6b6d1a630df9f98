//! Full pipeline assembly: encoder → layer fusion → auxiliary heads →
//! co-attention gate → emotion head, with per-stage parameter freezing.
//!
//! One utterance is one graph. A batch is a loop over utterances whose
//! gradients are averaged before the optimizer step, so batch composition
//! never changes any utterance's forward values.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::encoder::{self, EncoderConfig, Stage};
use crate::fusion::{self, FusionMode};
use crate::nn::mean_pool_valid;
use crate::optim::ParamSet;
use crate::seeding::subseed;
use crate::tasks::{self, AuxOut, HeadConfig, LossWeights, Task};
use crate::tensor::{Tape, VarId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub fusion: FusionMode,
    /// Enabled auxiliary tasks; the emotion task is always on.
    pub tasks: BTreeSet<Task>,
    /// Gate the emotion features with the auxiliary hidden vectors.
    /// Ignored (treated as off) when no auxiliary task is enabled.
    pub coattn: bool,
    /// Distinct speakers the speaker head can output; fixed per fold to the
    /// training speakers, so held-out speakers are unpredictable by design.
    pub n_speakers: usize,
    /// Keep auxiliary heads learning during stage 2 instead of freezing them.
    pub train_aux_heads_stage2: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
            fusion: FusionMode::Ari,
            tasks: [Task::Gender, Task::Speaker, Task::Style, Task::Asr].into(),
            coattn: true,
            n_speakers: 8,
            train_aux_heads_stage2: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()?;
        if self.tasks.contains(&Task::Speaker) && self.n_speakers < 2 {
            return Err(Error::BadConfig(format!(
                "speaker task needs at least 2 speakers, got {}",
                self.n_speakers
            )));
        }
        Ok(())
    }

    /// The gate only exists when there is something to attend over.
    pub fn effective_coattn(&self) -> bool {
        self.coattn && !self.tasks.is_empty()
    }

    /// Fused feature width: the emotion branch and every head read this.
    pub fn fused_dim(&self) -> usize {
        self.fusion.width(self.encoder.model_dim)
    }

    /// Emotion-head input width: gate output in co-attention mode, pooled
    /// fused features otherwise.
    pub fn ser_input_dim(&self) -> usize {
        if self.effective_coattn() {
            self.fused_dim() + self.tasks.len() * self.heads.aux_dim
        } else {
            self.fused_dim()
        }
    }

    /// Enabled tasks in canonical order.
    pub fn task_order(&self) -> Vec<Task> {
        tasks::ALL_TASKS
            .into_iter()
            .filter(|t| self.tasks.contains(t))
            .collect()
    }
}

/// Builds the complete parameter set with per-component seed streams, so
/// adding or removing one component never shifts another's initial values.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut set = ParamSet::new();

    let mut enc_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "encoder", 0));
    encoder::init_params(&cfg.encoder, &mut set, &mut enc_rng)?;

    match cfg.fusion {
        FusionMode::Ari => fusion::init_ari_weights(cfg.encoder.n_layers, &mut set)?,
        FusionMode::WeightedSum => fusion::init_sum_weights(cfg.encoder.n_layers, &mut set)?,
    }
    if cfg.effective_coattn() {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "coattn", 0));
        fusion::init_coattn_params(cfg.fused_dim(), cfg.heads.aux_dim, &mut set, &mut rng)?;
    }

    let mut head_rng = ChaCha8Rng::seed_from_u64(subseed(seed, "heads", 0));
    tasks::init_two_layer(
        "heads.ser",
        cfg.ser_input_dim(),
        cfg.heads.ser_hidden,
        tasks::emotion_classes(),
        &mut set,
        &mut head_rng,
    )?;
    for task in cfg.task_order() {
        tasks::init_two_layer(
            &format!("heads.{}", task.name()),
            cfg.fused_dim(),
            cfg.heads.aux_dim,
            task.classes(cfg.n_speakers),
            &mut set,
            &mut head_rng,
        )?;
    }
    Ok(set)
}

/// Applies the stage freeze rules across the whole set. Unknown namespaces
/// are rejected rather than silently trained.
pub fn apply_stage(set: &mut ParamSet, stage: Stage, cfg: &ModelConfig) -> Result<()> {
    encoder::apply_freeze(set, stage, &cfg.encoder)?;
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        if name.starts_with("encoder.") {
            continue;
        }
        let trainable = if name.starts_with("fusion.") || name.starts_with("coattn.") {
            true
        } else if name.starts_with("heads.ser.") {
            true
        } else if tasks::ALL_TASKS
            .iter()
            .any(|t| name.starts_with(&format!("heads.{}.", t.name())))
        {
            match stage {
                Stage::One => true,
                Stage::Two => cfg.train_aux_heads_stage2,
            }
        } else {
            return Err(Error::UnclassifiedParameter { name });
        };
        set.set_trainable(&name, trainable)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-utterance graph outputs. `ser_logits` is absent when the emotion
/// branch was skipped (stage 1 trains auxiliary tasks only).
pub struct Forward {
    pub ser_logits: Option<VarId>,
    pub aux: BTreeMap<Task, AuxOut>,
    pub frames: usize,
}

/// Builds the forward graph for one utterance.
///
/// `pad_frames` is the frame count the batch was padded to; when processing
/// an utterance alone pass its own frame count. `rng` drives emotion-head
/// dropout and is only drawn from in train mode.
pub fn forward_utterance(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    cfg: &ModelConfig,
    audio: &[f64],
    pad_frames: usize,
    mode: Mode,
    with_ser: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Forward> {
    let stack = encoder::forward(tape, params, &cfg.encoder, audio, pad_frames)?;
    let fused = match cfg.fusion {
        FusionMode::Ari => fusion::ari_fuse(tape, &stack.taps, bound(params, "fusion.ari_w")?)?,
        FusionMode::WeightedSum => {
            fusion::weighted_sum_fuse(tape, &stack.taps, bound(params, "fusion.sum_v")?)?
        }
    };

    let mut aux = BTreeMap::new();
    for task in cfg.task_order() {
        let out = match task {
            Task::Asr => tasks::asr_head(tape, params, fused, stack.frames)?,
            _ => tasks::aux_class_head(tape, params, task, fused, stack.frames)?,
        };
        aux.insert(task, out);
    }

    let ser_logits = if with_ser {
        let pooled = mean_pool_valid(tape, fused, stack.frames)?;
        let input = if cfg.effective_coattn() {
            let hidden: Vec<VarId> = cfg.task_order().iter().map(|t| aux[t].hidden).collect();
            fusion::co_attention(tape, params, pooled, &hidden)?
        } else {
            pooled
        };
        let dropout = match mode {
            Mode::Train => cfg.heads.dropout,
            Mode::Eval => 0.0,
        };
        Some(tasks::ser_head(tape, params, input, dropout, rng)?)
    } else {
        None
    };

    Ok(Forward {
        ser_logits,
        aux,
        frames: stack.frames,
    })
}

/// Stage-1 objective for one utterance: weighted auxiliary losses only.
/// `speaker_label` is the fold-local dense speaker index.
pub fn stage1_utterance_loss(
    tape: &mut Tape,
    fwd: &Forward,
    utt: &Utterance,
    speaker_label: Option<usize>,
    weights: &LossWeights,
    enabled: &BTreeSet<Task>,
) -> Result<VarId> {
    let mut losses = BTreeMap::new();
    for (&task, out) in &fwd.aux {
        let loss = match task {
            Task::Asr => tasks::ctc_from_logits(tape, out.logits, &utt.tokens)?,
            Task::Speaker => {
                let label = speaker_label.ok_or(Error::LabelOutOfRange {
                    label: utt.speaker,
                    classes: 0,
                })?;
                tasks::cross_entropy(tape, out.logits, label)?
            }
            _ => {
                let label = task.label(utt).expect("classification task");
                tasks::cross_entropy(tape, out.logits, label)?
            }
        };
        losses.insert(task, loss);
    }
    tasks::stage1_loss(tape, &losses, weights, enabled)
}

/// Stage-2 objective for one utterance: the emotion cross-entropy.
pub fn stage2_utterance_loss(tape: &mut Tape, fwd: &Forward, utt: &Utterance) -> Result<VarId> {
    let logits = fwd.ser_logits.ok_or(Error::InvalidOp {
        op: "stage2_loss",
        msg: "forward pass skipped the emotion branch".into(),
    })?;
    let ce = tasks::cross_entropy(tape, logits, utt.emotion.index())?;
    Ok(tasks::stage2_loss(ce))
}

fn bound(params: &BTreeMap<String, VarId>, name: &str) -> Result<VarId> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })
}
