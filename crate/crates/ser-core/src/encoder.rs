//! Convolutional frontend plus a stack of pre-norm transformer layers with
//! per-layer output taps and stage-dependent freeze rules.
//!
//! Each utterance is encoded as its own graph: the conv frontend runs on the
//! true sample length, and batching pads at the *frame* level afterwards.
//! Padded frames are excluded from attention by an additive mask bias and
//! from pooling by valid-prefix slicing, so an utterance produces bit-equal
//! features whether encoded alone or inside a padded batch.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{affine, init_uniform, MASK_BIAS};
use crate::optim::ParamSet;
use crate::tensor::{Tape, Tensor, VarId};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Gain on the additive position table. The frontend hands over unit-RMS
/// features (layer-normed), so an unscaled table would make up half the
/// residual stream and leak a per-frame oscillation into every tap that
/// frame-level heads cannot cancel; attention can still amplify the small
/// copy through its projections.
pub const PE_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub freeze_first_k_stage2: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 12,
            model_dim: 32,
            n_heads: 2,
            ff_dim: 64,
            conv_layers: 2,
            conv_kernel: 8,
            conv_stride: 4,
            freeze_first_k_stage2: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.n_layers < 2 {
            return bad(format!("n_layers {} < 2", self.n_layers));
        }
        if self.model_dim == 0 || self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.ff_dim == 0 {
            return bad("ff_dim must be positive".into());
        }
        if self.conv_layers == 0 || self.conv_stride == 0 || self.conv_kernel < self.conv_stride {
            return bad(format!(
                "conv frontend needs kernel >= stride > 0, got kernel {} stride {}",
                self.conv_kernel, self.conv_stride
            ));
        }
        if self.freeze_first_k_stage2 >= self.n_layers {
            return bad(format!(
                "freeze_first_k_stage2 {} must be < n_layers {}",
                self.freeze_first_k_stage2, self.n_layers
            ));
        }
        Ok(())
    }

    /// Left padding that centres each conv window on its output frame.
    pub fn conv_pad_left(&self) -> usize {
        (self.conv_kernel - self.conv_stride) / 2
    }

    /// Samples covered by one output frame: the window of the last conv layer
    /// widened by every earlier layer's stride.
    pub fn receptive_field(&self) -> usize {
        let mut rf = self.conv_kernel;
        let mut jump = self.conv_stride;
        for _ in 1..self.conv_layers {
            rf += (self.conv_kernel - 1) * jump;
            jump *= self.conv_stride;
        }
        rf
    }

    /// Output frames for a raw sample count: one ceil-division per conv layer.
    pub fn frames(&self, samples: usize) -> usize {
        let mut t = samples;
        for _ in 0..self.conv_layers {
            t = t.div_ceil(self.conv_stride);
        }
        t
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

/// Fine-tuning stage; selects which parameter groups stay fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

// ---- parameters -------------------------------------------------------------

/// Inserts all encoder parameters with a fixed draw order: frontend first,
/// then blocks in index order.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, set: &mut ParamSet, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let k = cfg.conv_kernel;
    for layer in 0..cfg.conv_layers {
        let c_in = if layer == 0 { 1 } else { d };
        let name = format!("encoder.frontend.conv{}", layer + 1);
        set.insert(
            format!("{name}.w"),
            init_uniform(&[d, k * c_in], k * c_in, rng),
        )?;
        set.insert(format!("{name}.b"), Tensor::zeros(&[d]))?;
    }
    set.insert("encoder.frontend.ln.gamma", Tensor::full(&[d], 1.0))?;
    set.insert("encoder.frontend.ln.beta", Tensor::zeros(&[d]))?;
    for i in 0..cfg.n_layers {
        let b = format!("encoder.block{i:02}");
        set.insert(format!("{b}.ln1.gamma"), Tensor::full(&[d], 1.0))?;
        set.insert(format!("{b}.ln1.beta"), Tensor::zeros(&[d]))?;
        for w in ["wq", "wk", "wv", "wo"] {
            set.insert(format!("{b}.attn.{w}"), init_uniform(&[d, d], d, rng))?;
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            set.insert(format!("{b}.attn.{bias}"), Tensor::zeros(&[d]))?;
        }
        set.insert(format!("{b}.ln2.gamma"), Tensor::full(&[d], 1.0))?;
        set.insert(format!("{b}.ln2.beta"), Tensor::zeros(&[d]))?;
        set.insert(format!("{b}.ff.w1"), init_uniform(&[d, cfg.ff_dim], d, rng))?;
        set.insert(format!("{b}.ff.b1"), Tensor::zeros(&[cfg.ff_dim]))?;
        set.insert(
            format!("{b}.ff.w2"),
            init_uniform(&[cfg.ff_dim, d], cfg.ff_dim, rng),
        )?;
        set.insert(format!("{b}.ff.b2"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Applies the stage freeze rule to every `encoder.*` parameter and leaves
/// the rest of the set untouched.
///
/// Stage 1 freezes the conv frontend only; stage 2 additionally freezes
/// transformer blocks `0..freeze_first_k_stage2`.
pub fn apply_freeze(set: &mut ParamSet, stage: Stage, cfg: &EncoderConfig) -> Result<()> {
    let names: Vec<String> = set.names().cloned().collect();
    for name in names {
        let Some(rest) = name.strip_prefix("encoder.") else {
            continue;
        };
        let trainable = if rest.starts_with("frontend.") {
            false
        } else if let Some(block) = rest.strip_prefix("block") {
            let idx: usize = block
                .get(..2)
                .and_then(|s| s.parse().ok())
                .filter(|&i| i < cfg.n_layers)
                .ok_or(Error::UnclassifiedParameter { name: name.clone() })?;
            match stage {
                Stage::One => true,
                Stage::Two => idx >= cfg.freeze_first_k_stage2,
            }
        } else {
            return Err(Error::UnclassifiedParameter { name });
        };
        set.set_trainable(&name, trainable)?;
    }
    Ok(())
}

/// Trainable transformer blocks under the given stage rule.
pub fn trainable_layers(stage: Stage, cfg: &EncoderConfig) -> usize {
    match stage {
        Stage::One => cfg.n_layers,
        Stage::Two => cfg.n_layers - cfg.freeze_first_k_stage2,
    }
}

// ---- collation --------------------------------------------------------------

/// A batch padded for joint processing: audio right-padded to the longest
/// item, plus per-item frame counts and frame validity masks.
#[derive(Debug, Clone)]
pub struct Collated {
    pub audio: Vec<Vec<f64>>,
    pub lens: Vec<usize>,
    pub frames: Vec<usize>,
    pub pad_frames: usize,
    pub masks: Vec<Vec<f64>>,
}

pub fn batch_collate(items: &[&[f64]], cfg: &EncoderConfig) -> Result<Collated> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let min = cfg.receptive_field();
    for item in items {
        if item.len() < min {
            return Err(Error::AudioTooShort {
                len: item.len(),
                min,
            });
        }
    }
    let max_len = items.iter().map(|i| i.len()).max().unwrap();
    let frames: Vec<usize> = items.iter().map(|i| cfg.frames(i.len())).collect();
    let pad_frames = *frames.iter().max().unwrap();
    let audio = items
        .iter()
        .map(|i| {
            let mut padded = i.to_vec();
            padded.resize(max_len, 0.0);
            padded
        })
        .collect();
    let masks = frames
        .iter()
        .map(|&f| {
            let mut m = vec![0.0; pad_frames];
            m[..f].fill(1.0);
            m
        })
        .collect();
    Ok(Collated {
        audio,
        lens: items.iter().map(|i| i.len()).collect(),
        frames,
        pad_frames,
        masks,
    })
}

// ---- forward ----------------------------------------------------------------

/// All tapped layer outputs for one utterance, each `[pad_frames, d]`, with
/// the first `frames` rows valid.
#[derive(Debug, Clone)]
pub struct LayerStack {
    pub taps: Vec<VarId>,
    pub frames: usize,
    pub pad_frames: usize,
}

impl LayerStack {
    /// The encoder's final output is the last tap itself, not a copy.
    pub fn output(&self) -> VarId {
        *self.taps.last().expect("stack is never empty")
    }
}

/// Sinusoidal position table: `pe[p, 2i] = sin(p / 10000^(2i/d))`,
/// `pe[p, 2i+1] = cos` of the same angle.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    let data = pe.data_mut();
    for p in 0..t {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin();
            data[p * d + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

fn bound(params: &BTreeMap<String, VarId>, name: &str) -> Result<VarId> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| Error::UnknownParameter {
            name: name.to_string(),
        })
}

/// Encodes one utterance, padding the frame axis up to `pad_frames`
/// (`frames(len)` when processed alone). Padded frames receive `MASK_BIAS`
/// as attention keys, so they contribute exactly zero to valid rows.
pub fn forward(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    cfg: &EncoderConfig,
    audio: &[f64],
    pad_frames: usize,
) -> Result<LayerStack> {
    let min = cfg.receptive_field();
    if audio.len() < min {
        return Err(Error::AudioTooShort {
            len: audio.len(),
            min,
        });
    }
    let frames = cfg.frames(audio.len());
    if pad_frames < frames {
        return Err(Error::BadConfig(format!(
            "pad target {pad_frames} below frame count {frames}"
        )));
    }
    let d = cfg.model_dim;

    let x = Tensor::new(vec![audio.len(), 1], audio.to_vec())?;
    let mut h = tape.watch(&x)?;
    for layer in 0..cfg.conv_layers {
        let name = format!("encoder.frontend.conv{}", layer + 1);
        let w = bound(params, &format!("{name}.w"))?;
        let b = bound(params, &format!("{name}.b"))?;
        h = tape.conv1d(h, w, b, cfg.conv_stride, cfg.conv_pad_left())?;
        h = tape.gelu(h)?;
    }
    let gamma = bound(params, "encoder.frontend.ln.gamma")?;
    let beta = bound(params, "encoder.frontend.ln.beta")?;
    h = tape.layer_norm(h, gamma, beta, LN_EPS)?;
    debug_assert_eq!(tape.value(h).shape(), &[frames, d]);

    if pad_frames > frames {
        let pad = tape.watch(&Tensor::zeros(&[pad_frames - frames, d]))?;
        h = tape.concat(&[h, pad], 0)?;
    }
    let mut pe_table = positional_encoding(pad_frames, d);
    for v in pe_table.data_mut() {
        *v *= PE_GAIN;
    }
    let pe = tape.watch(&pe_table)?;
    h = tape.add(h, pe)?;

    let mask_bias = if pad_frames > frames {
        let mut bias = Tensor::zeros(&[pad_frames]);
        bias.data_mut()[frames..].fill(MASK_BIAS);
        Some(tape.watch(&bias)?)
    } else {
        None
    };

    let mut taps = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let blk = format!("encoder.block{i:02}");
        h = transformer_block(tape, params, cfg, &blk, h, mask_bias)?;
        taps.push(h);
    }
    Ok(LayerStack {
        taps,
        frames,
        pad_frames,
    })
}

fn transformer_block(
    tape: &mut Tape,
    params: &BTreeMap<String, VarId>,
    cfg: &EncoderConfig,
    blk: &str,
    h: VarId,
    mask_bias: Option<VarId>,
) -> Result<VarId> {
    let p = |name: &str| bound(params, &format!("{blk}.{name}"));

    let (g1, b1) = (p("ln1.gamma")?, p("ln1.beta")?);
    let a = tape.layer_norm(h, g1, b1, LN_EPS)?;
    let q = affine(tape, a, p("attn.wq")?, p("attn.bq")?)?;
    let k = affine(tape, a, p("attn.wk")?, p("attn.bk")?)?;
    let v = affine(tape, a, p("attn.wv")?, p("attn.bv")?)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let qh = tape.slice(q, 1, head * dh, dh)?;
        let kh = tape.slice(k, 1, head * dh, dh)?;
        let vh = tape.slice(v, 1, head * dh, dh)?;
        let mut scores = tape.matmul_abt(qh, kh)?;
        scores = tape.scale(scores, scale)?;
        if let Some(bias) = mask_bias {
            scores = tape.add(scores, bias)?;
        }
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat(&heads, 1)?
    };
    let o = affine(tape, ctx, p("attn.wo")?, p("attn.bo")?)?;
    let h = tape.add(h, o)?;

    let (g2, b2) = (p("ln2.gamma")?, p("ln2.beta")?);
    let f = tape.layer_norm(h, g2, b2, LN_EPS)?;
    let f = affine(tape, f, p("ff.w1")?, p("ff.b1")?)?;
    let f = tape.gelu(f)?;
    let f = affine(tape, f, p("ff.w2")?, p("ff.b2")?)?;
    tape.add(h, f)
}
