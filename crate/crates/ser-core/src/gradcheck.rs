//! Finite-difference verification of tape gradients.
//!
//! Every backward rule in [`crate::tensor::Tape`] can be cross-checked by
//! perturbing one input coordinate at a time and re-running the forward
//! pass. The helpers here implement that probe and the comparison metric;
//! both the test suites and the `gradcheck` CLI subcommand build on them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Emotion, Gender, Style, Utterance};
use crate::error::Result;
use crate::model::{self, Mode, ModelConfig};
use crate::tasks::{self, LossWeights, Task};
use crate::fusion;
use crate::tensor::{Tape, Tensor, VarId};

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
///
/// `f` must be deterministic: any randomness inside (dropout, say) has to be
/// reseeded identically on every call or the probes measure noise.
pub fn central_difference<F>(at: &Tensor, eps: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(at.shape());
    let mut probe = at.clone();
    for i in 0..at.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst elementwise deviation between two gradients, normalized by the
/// largest magnitude either side contains. The scale is floored at 1 so
/// near-zero gradients are compared absolutely instead of amplifying probe
/// noise.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max);
    worst / scale
}

/// Compare tape gradients against central differences for every trainable
/// parameter of the graph `build` constructs.
///
/// `build` receives a fresh tape and the current parameter values, binds
/// what it needs, and returns the loss node. The result maps each trainable
/// parameter name to its worst relative error.
pub fn check_parameters<F>(
    params: &BTreeMap<String, Tensor>,
    eps: f64,
    build: F,
) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Tape, &BTreeMap<String, Tensor>) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.trainable_grads(&grads);

    let mut report = BTreeMap::new();
    for (name, value) in params {
        let Some(a) = analytic.get(name) else { continue };
        let numeric = central_difference(value, eps, |probe| {
            let mut shifted = params.clone();
            shifted.insert(name.clone(), probe.clone());
            let mut tape = Tape::new();
            let loss = build(&mut tape, &shifted)?;
            Ok(tape.value(loss).item())
        })?;
        report.insert(name.clone(), relative_error(a, &numeric));
    }
    Ok(report)
}

// ---- composite suite --------------------------------------------------------

/// Worst relative error found for one composite graph over many seeds.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
}

fn rand_map(shapes: &[(&str, Vec<usize>)], rng: &mut ChaCha8Rng) -> BTreeMap<String, Tensor> {
    shapes
        .iter()
        .map(|(n, s)| (n.to_string(), Tensor::rand_uniform(s, -0.8, 0.8, rng)))
        .collect()
}

fn bind_map(tape: &mut Tape, p: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, VarId>> {
    let mut out = BTreeMap::new();
    for (name, value) in p {
        out.insert(name.clone(), tape.bind(name, value, true)?);
    }
    Ok(out)
}

fn worst_of(report: &BTreeMap<String, f64>) -> f64 {
    report.values().fold(0.0f64, |m, v| m.max(*v))
}

fn scalarize(tape: &mut Tape, x: VarId) -> Result<VarId> {
    let rows = tape.sum_axis(x, 0)?;
    tape.sum_axis(rows, 1)
}

/// Layer-fusion composites: concat-style and plain weighted sum.
fn fusion_case(seed: u64, eps: f64, ari: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = 5usize;
    let mut shapes = vec![(
        "w",
        vec![if ari { layers - 1 } else { layers }],
    )];
    let tap_names: Vec<String> = (0..layers).map(|i| format!("tap{i}")).collect();
    for name in &tap_names {
        shapes.push((name.as_str(), vec![3, 6]));
    }
    let shapes: Vec<(&str, Vec<usize>)> = shapes
        .iter()
        .map(|(n, s)| (*n, s.clone()))
        .collect();
    let params = rand_map(&shapes, &mut rng);
    let report = check_parameters(&params, eps, |tape, p| {
        let bound = bind_map(tape, p)?;
        let taps: Vec<VarId> = tap_names.iter().map(|n| bound[n]).collect();
        let fused = if ari {
            fusion::ari_fuse(tape, &taps, bound["w"])?
        } else {
            fusion::weighted_sum_fuse(tape, &taps, bound["w"])?
        };
        scalarize(tape, fused)
    })?;
    Ok(worst_of(&report))
}

fn coattn_case(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_s, d_a) = (6, 5);
    let params = rand_map(
        &[
            ("ser", vec![1, d_s]),
            ("aux0", vec![1, d_a]),
            ("aux1", vec![1, d_a]),
            ("aux2", vec![1, d_a]),
            ("coattn.q", vec![d_s, d_a]),
            ("coattn.k", vec![d_a, d_a]),
            ("coattn.v", vec![d_a, d_a]),
            ("coattn.g", vec![d_a, d_s]),
            ("coattn.b", vec![d_s]),
        ],
        &mut rng,
    );
    let report = check_parameters(&params, eps, |tape, p| {
        let bound = bind_map(tape, p)?;
        let aux = [bound["aux0"], bound["aux1"], bound["aux2"]];
        let out = fusion::co_attention(tape, &bound, bound["ser"], &aux)?;
        scalarize(tape, out)
    })?;
    Ok(worst_of(&report))
}

fn cross_entropy_case(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, d, hidden) = (4, 8, 6);
    let params = rand_map(
        &[
            ("x", vec![frames, d]),
            ("heads.gender.w1", vec![d, hidden]),
            ("heads.gender.b1", vec![hidden]),
            ("heads.gender.w2", vec![hidden, 2]),
            ("heads.gender.b2", vec![2]),
        ],
        &mut rng,
    );
    let label = (seed % 2) as usize;
    let report = check_parameters(&params, eps, |tape, p| {
        let bound = bind_map(tape, p)?;
        let out = tasks::aux_class_head(tape, &bound, Task::Gender, bound["x"], frames)?;
        tasks::cross_entropy(tape, out.logits, label)
    })?;
    Ok(worst_of(&report))
}

fn ctc_case(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 12 frames give 3 pooled steps — enough for a repeated 2-token target.
    let (frames, d, hidden) = (12, 8, 6);
    let params = rand_map(
        &[
            ("x", vec![frames, d]),
            ("heads.asr.w1", vec![d, hidden]),
            ("heads.asr.b1", vec![hidden]),
            ("heads.asr.w2", vec![hidden, tasks::blank_id() + 1]),
            ("heads.asr.b2", vec![tasks::blank_id() + 1]),
        ],
        &mut rng,
    );
    let targets = vec![rng.gen_range(0..8), rng.gen_range(0..8)];
    let report = check_parameters(&params, eps, |tape, p| {
        let bound = bind_map(tape, p)?;
        let out = tasks::asr_head(tape, &bound, bound["x"], frames)?;
        tasks::ctc_from_logits(tape, out.logits, &targets)
    })?;
    Ok(worst_of(&report))
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.n_layers = 2;
    cfg.encoder.model_dim = 6;
    cfg.encoder.n_heads = 2;
    cfg.encoder.ff_dim = 12;
    cfg.encoder.freeze_first_k_stage2 = 1;
    cfg.heads.aux_dim = 6;
    cfg.heads.ser_hidden = 6;
    cfg.n_speakers = 3;
    cfg
}

fn full_model_case(seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_model_config();
    let set = model::init_params(&cfg, seed)?;
    // Nudge the initial draw so no pre-activation sits on a kink.
    let mut params: BTreeMap<String, Tensor> = set
        .iter()
        .map(|(n, p)| {
            let mut t = p.value.clone();
            for v in t.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
            (n.clone(), t)
        })
        .collect();
    for (name, t) in rand_map(&[("audio", vec![100])], &mut rng) {
        params.insert(name, t);
    }
    let utt = Utterance {
        id: format!("g{seed}"),
        samples: vec![],
        sample_rate: 4000,
        speaker: 1,
        gender: Gender::Female,
        style: Style::Improvised,
        emotion: Emotion::Happy,
        tokens: vec![2, 5],
    };
    let weights = LossWeights::default();
    let enabled: BTreeSet<Task> = cfg.tasks.clone();
    let frames = cfg.encoder.frames(100);
    let report = check_parameters(&params, eps, |tape, p| {
        let mut bound = BTreeMap::new();
        for (name, value) in p {
            if name != "audio" {
                bound.insert(name.clone(), tape.bind(name, value, true)?);
            }
        }
        // The audio itself is probed too: it enters through the conv stack.
        let audio = p["audio"].data().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model::forward_utterance(
            tape, &bound, &cfg, &audio, frames, Mode::Eval, true, &mut rng,
        )?;
        let aux = model::stage1_utterance_loss(tape, &fwd, &utt, Some(1), &weights, &enabled)?;
        let ser = model::stage2_utterance_loss(tape, &fwd, &utt)?;
        tape.add(aux, ser)
    })?;
    Ok(worst_of(&report))
}

/// Runs every composite case over `seeds_per_case` seeds and reports the
/// worst relative error seen per case. Deterministic: seeds are 0..n.
pub fn composite_suite(seeds_per_case: usize, eps: f64) -> Result<Vec<CaseReport>> {
    let cases: [(&'static str, fn(u64, f64) -> Result<f64>); 6] = [
        ("ari_fusion", |s, e| fusion_case(s, e, true)),
        ("weighted_sum_fusion", |s, e| fusion_case(s, e, false)),
        ("co_attention", coattn_case),
        ("cross_entropy_head", cross_entropy_case),
        ("ctc_head", ctc_case),
        ("full_model", full_model_case),
    ];
    let mut reports = Vec::new();
    for (name, case) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds_per_case as u64 {
            worst = worst.max(case(seed, eps)?);
        }
        reports.push(CaseReport {
            name,
            seeds: seeds_per_case,
            worst,
        });
    }
    Ok(reports)
}
