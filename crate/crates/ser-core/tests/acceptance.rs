//! Acceptance gates for the whole pipeline. Each test prints one PASS/FAIL
//! line (visible with --nocapture; libtest's own ok/FAILED line mirrors it).
//!
//! Heavy criteria serialize on a mutex so wall-clock budgets are measured
//! without contention; shared fixtures build once behind OnceLock.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ser_core::data::folds::make_folds;
use ser_core::data::generate::{generate, GenerationConfig};
use ser_core::data::io::write_corpus;
use ser_core::data::{Gender, Utterance};
use ser_core::encoder;
use ser_core::experiment::{ablation_grid, EvalCounts, ExperimentConfig};
use ser_core::fusion::{self, FusionMode};
use ser_core::gradcheck::composite_suite;
use ser_core::metrics::{edit_distance, Confusion};
use ser_core::model;
use ser_core::optim::ParamSet;
use ser_core::seeding::subseed;
use ser_core::tasks::Task;
use ser_core::tensor::{Tape, Tensor};
use ser_core::train::{evaluate, run_ablation, run_kfold, train_two_stage, TrainedFold};
use ser_core::Error;

// Learnability schedule, pinned after calibration on the reference corpus:
// the smallest epoch counts whose seed-averaged metrics clear every gate.
const LEARN_STAGE1_EPOCHS: usize = 5;
const LEARN_STAGE2_EPOCHS: usize = 3;
const LEARN_SEEDS: [u64; 3] = [7, 8, 9];

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---- shared fixtures --------------------------------------------------------

/// The reference corpus: the generator's defaults.
fn corpus600() -> &'static Vec<Utterance> {
    static C: OnceLock<Vec<Utterance>> = OnceLock::new();
    C.get_or_init(|| generate(&GenerationConfig::default(), 11).expect("default corpus"))
}

struct StructuralRuns {
    init: ParamSet,
    stage1_only: TrainedFold,
    full: TrainedFold,
    eval: EvalCounts,
}

/// Two real training runs with the full-size model on a small corpus: one
/// stopped after stage 1, one complete. Identical seeds make stage 1
/// reproducible across the pair, so stage-2 freeze effects are isolated.
fn structural_runs() -> &'static StructuralRuns {
    static R: OnceLock<StructuralRuns> = OnceLock::new();
    R.get_or_init(|| {
        let gen_cfg = GenerationConfig {
            n_utterances: 80,
            n_speakers: 4,
            min_duration_s: 0.5,
            max_duration_s: 1.0,
            ..GenerationConfig::default()
        };
        let corpus = generate(&gen_cfg, 21).expect("structural corpus");
        let plan = make_folds(&corpus, 2).expect("plan");
        let (train, test) = plan.split(&corpus, 0);

        let mut cfg = ExperimentConfig::default();
        cfg.stage1_epochs = 2;
        cfg.stage2_epochs = 2;
        cfg.seed = 5;

        let mut stage1_cfg = cfg.clone();
        stage1_cfg.stage2_epochs = 0;
        let stage1_only = train_two_stage(&stage1_cfg, &train, 0).expect("stage-1 run");
        let full = train_two_stage(&cfg, &train, 0).expect("full run");
        let eval = evaluate(&full, &test, true).expect("eval");

        let init = model::init_params(&full.model_cfg, subseed(cfg.seed, "init", 0))
            .expect("reference init");
        StructuralRuns {
            init,
            stage1_only,
            full,
            eval,
        }
    })
}

// ---- criterion 1: gradients -------------------------------------------------

#[test]
fn gradients_match_finite_differences_for_all_composites() {
    let _guard = heavy();
    let started = Instant::now();
    let reports = composite_suite(20, 1e-5).expect("suite runs");
    let elapsed = started.elapsed();
    let worst = reports.iter().fold(0.0f64, |m, r| m.max(r.worst));
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    let pass = reports.len() == 6 && worst < 1e-4 && elapsed.as_secs() < 120;
    verdict(
        "gradient suite",
        pass,
        &format!(
            "{} composites x 20 seeds ({}), worst rel err {worst:.2e}, {:.1}s",
            reports.len(),
            names.join(", "),
            elapsed.as_secs_f64()
        ),
    );
}

// ---- criterion 2: CTC vs enumeration ----------------------------------------

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

fn brute_force_prob(probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let t_len = probs.len();
    let classes = probs[0].len();
    let mut mass = 0.0;
    let mut path = vec![0usize; t_len];
    for idx in 0..classes.pow(t_len as u32) {
        let mut rest = idx;
        for slot in path.iter_mut() {
            *slot = rest % classes;
            rest /= classes;
        }
        if collapse(&path, blank) == target {
            mass += path.iter().zip(probs).map(|(&c, row)| row[c]).product::<f64>();
        }
    }
    mass
}

fn lattice_loss(probs: &[Vec<f64>], target: &[usize], blank: usize) -> Result<f64, Error> {
    let flat: Vec<f64> = probs.iter().flatten().map(|p| p.ln()).collect();
    let mut tape = Tape::new();
    let lp = tape.watch(&Tensor::new(vec![probs.len(), probs[0].len()], flat)?)?;
    let loss = tape.ctc_loss(lp, target, blank)?;
    Ok(tape.value(loss).item())
}

#[test]
fn ctc_loss_matches_exhaustive_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for vocab in 1..=3usize {
        let blank = vocab;
        for t_len in 1..=6usize {
            for u in 1..=3usize {
                for target_idx in 0..vocab.pow(u as u32) {
                    let mut rest = target_idx;
                    let target: Vec<usize> = (0..u)
                        .map(|_| {
                            let c = rest % vocab;
                            rest /= vocab;
                            c
                        })
                        .collect();
                    for _ in 0..2 {
                        let probs: Vec<Vec<f64>> = (0..t_len)
                            .map(|_| {
                                let raw: Vec<f64> =
                                    (0..=vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
                                let z: f64 = raw.iter().sum();
                                raw.into_iter().map(|v| v / z).collect()
                            })
                            .collect();
                        let brute = brute_force_prob(&probs, &target, blank);
                        match lattice_loss(&probs, &target, blank) {
                            Ok(loss) => {
                                worst = worst.max((loss - (-brute.ln())).abs());
                                checked += 1;
                            }
                            Err(Error::CtcInfeasible { .. }) => {
                                assert_eq!(brute, 0.0, "rejected instance has mass");
                            }
                            Err(other) => panic!("unexpected error: {other}"),
                        }
                    }
                }
            }
        }
    }
    // Two uniform frames over {token, blank}, target [a]: the paths aa, a-,
    // -a carry 3/4 of the mass, so the loss is -ln(0.75).
    let pinned = lattice_loss(&[vec![0.5, 0.5], vec![0.5, 0.5]], &[0], 1).unwrap();
    let pin_err = (pinned - 0.2876820724517809).abs();
    let pass = checked >= 500 && worst < 1e-10 && pin_err < 1e-9;
    verdict(
        "ctc oracle",
        pass,
        &format!(
            "{checked} feasible instances (T<=6, U<=3, V<=3), worst abs err {worst:.2e}, \
             uniform pin err {pin_err:.2e}"
        ),
    );
}

// ---- criterion 3: structural fidelity ---------------------------------------

#[test]
fn fusion_width_and_freeze_structure_hold() {
    let _guard = heavy();
    let runs = structural_runs();
    let cfg = &runs.full.model_cfg;
    let d = cfg.encoder.model_dim;

    // Concat fusion widens the frame features to exactly 2d with 12 layers.
    let mut tape = Tape::new();
    let bound = runs.init.bind_all(&mut tape).expect("bind");
    let audio: Vec<f64> = (0..400).map(|i| (i as f64 * 0.07).sin() * 0.4).collect();
    let frames = cfg.encoder.frames(audio.len());
    let stack = encoder::forward(&mut tape, &bound, &cfg.encoder, &audio, frames).expect("fwd");
    let fused = fusion::ari_fuse(&mut tape, &stack.taps, bound["fusion.ari_w"]).expect("fuse");
    let width_ok =
        cfg.encoder.n_layers == 12 && tape.value(fused).shape() == &[frames, 2 * d][..];

    let group = |name: &str| -> &'static str {
        if name.starts_with("encoder.frontend.") {
            "frontend"
        } else if name.starts_with("encoder.block00.")
            || name.starts_with("encoder.block01.")
            || name.starts_with("encoder.block02.")
            || name.starts_with("encoder.block03.")
        {
            "early"
        } else if name.starts_with("encoder.") {
            "late"
        } else if name.starts_with("heads.ser.") || name.starts_with("coattn.") {
            "emotion"
        } else {
            "other"
        }
    };

    let mut frontend_fixed_stage1 = true;
    let mut frozen_fixed_stage2 = true;
    let mut late_changed = false;
    let mut emotion_changed = false;
    let mut fusion_changed = false;
    for (name, p) in runs.full.params.iter() {
        let after_stage1 = runs.stage1_only.params.value(name).expect("same names");
        let at_init = runs.init.value(name).expect("same names");
        match group(name) {
            "frontend" => {
                frontend_fixed_stage1 &= bits_equal(after_stage1, at_init);
                frozen_fixed_stage2 &= bits_equal(&p.value, after_stage1);
            }
            "early" => frozen_fixed_stage2 &= bits_equal(&p.value, after_stage1),
            "late" => late_changed |= !bits_equal(&p.value, after_stage1),
            "emotion" => emotion_changed |= !bits_equal(&p.value, after_stage1),
            _ => {
                if name.starts_with("fusion.") {
                    fusion_changed |= !bits_equal(&p.value, after_stage1);
                }
            }
        }
    }

    let pass = width_ok
        && frontend_fixed_stage1
        && frozen_fixed_stage2
        && late_changed
        && emotion_changed
        && fusion_changed;
    verdict(
        "structural fidelity",
        pass,
        &format!(
            "concat width 2d={} ok={width_ok}; stage-1 frontend bit-fixed={frontend_fixed_stage1}; \
             stage-2 frontend+blocks00-03 bit-fixed={frozen_fixed_stage2}; \
             blocks04-11 moved={late_changed}, emotion head moved={emotion_changed}, \
             fusion weights moved={fusion_changed}",
            2 * d
        ),
    );
}

// ---- criterion 4: protocol fidelity -----------------------------------------

#[test]
fn folds_isolate_speaker_pairs_and_zero_their_recognition() {
    let _guard = heavy();
    let corpus = corpus600();
    let plan = make_folds(corpus, 5).expect("plan");
    let mut seen = BTreeSet::new();
    let mut pairs_ok = true;
    for held in &plan.held_out {
        pairs_ok &= held.len() == 2;
        let genders: BTreeSet<usize> =
            held.iter().map(|&s| Gender::of_speaker(s).index()).collect();
        pairs_ok &= genders.len() == 2;
        for &s in held {
            pairs_ok &= seen.insert(s);
        }
    }
    pairs_ok &= seen.len() == 10;

    let (zero_hits, total) = structural_runs().eval.speaker.expect("speaker task enabled");
    let pass = pairs_ok && zero_hits == 0 && total > 0;
    verdict(
        "protocol fidelity",
        pass,
        &format!(
            "5 folds hold disjoint male-female pairs={pairs_ok}; held-out speaker \
             recognition {zero_hits}/{total} (exactly 0 by construction)"
        ),
    );
}

// ---- criterion 5: metric oracles --------------------------------------------

fn recursive_distance(
    hyp: &[usize],
    rf: &[usize],
    memo: &mut HashMap<(usize, usize), usize>,
) -> usize {
    let key = (hyp.len(), rf.len());
    if let Some(&d) = memo.get(&key) {
        return d;
    }
    let d = match (hyp.split_last(), rf.split_last()) {
        (None, _) => rf.len(),
        (_, None) => hyp.len(),
        (Some((hl, hi)), Some((rl, ri))) => {
            let sub = recursive_distance(hi, ri, memo) + usize::from(hl != rl);
            let del = recursive_distance(hi, rf, memo) + 1;
            let ins = recursive_distance(hyp, ri, memo) + 1;
            sub.min(del).min(ins)
        }
    };
    memo.insert(key, d);
    d
}

#[test]
fn accuracy_and_error_rates_match_independent_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0acc);
    let mut ua_worst = 0.0f64;
    for _ in 0..100 {
        let classes = rng.gen_range(2..6);
        let n = rng.gen_range(1..40);
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(0..classes), rng.gen_range(0..classes)))
            .collect();
        let mut c = Confusion::new(classes);
        for &(t, p) in &pairs {
            c.record(t, p).unwrap();
        }
        let correct = pairs.iter().filter(|(t, p)| t == p).count();
        assert_eq!(c.wa(), correct as f64 / n as f64, "WA is the same ratio");
        let mut recalls = Vec::new();
        for class in 0..classes {
            let of: Vec<_> = pairs.iter().filter(|(t, _)| *t == class).collect();
            if !of.is_empty() {
                recalls.push(of.iter().filter(|(t, p)| t == p).count() as f64 / of.len() as f64);
            }
        }
        let ua = recalls.iter().sum::<f64>() / recalls.len() as f64;
        ua_worst = ua_worst.max((c.ua() - ua).abs());
    }

    let mut dp_mismatches = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(0..10);
        let m = rng.gen_range(0..10);
        let hyp: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let rf: Vec<usize> = (0..m).map(|_| rng.gen_range(0..4)).collect();
        let mut memo = HashMap::new();
        if edit_distance(&hyp, &rf) != recursive_distance(&hyp, &rf, &mut memo) {
            dp_mismatches += 1;
        }
    }

    let pass = ua_worst < 1e-12 && dp_mismatches == 0;
    verdict(
        "metric oracles",
        pass,
        &format!(
            "100 accuracy sets (WA exact, UA worst dev {ua_worst:.1e}); \
             100 edit-distance pairs, {dp_mismatches} mismatches"
        ),
    );
}

// ---- criterion 6: learnability ----------------------------------------------

#[test]
fn full_config_learns_the_synthetic_corpus() {
    let _guard = heavy();
    let started = Instant::now();
    let corpus = corpus600();
    let plan = make_folds(corpus, 5).expect("plan");
    let (train, test) = plan.split(corpus, 0);

    let mut detail = String::new();
    let mut sums = [0.0f64; 4]; // ua, gender, style, wer
    let mut halving_ok = true;
    for &seed in &LEARN_SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.stage1_epochs = LEARN_STAGE1_EPOCHS;
        cfg.stage2_epochs = LEARN_STAGE2_EPOCHS;
        cfg.seed = seed;
        let trained = train_two_stage(&cfg, &train, 0).expect("training");
        if seed == 7 {
            let first = trained.stage1_losses[0];
            let last = *trained.stage1_losses.last().unwrap();
            halving_ok = last <= 0.5 * first;
            let _ = write!(detail, "seed 7 stage-1 loss {first:.3}->{last:.3}; ");
        }
        let eval = evaluate(&trained, &test, true).expect("eval");
        let ua = eval.ua();
        let gender = EvalCounts::accuracy(eval.gender).unwrap();
        let style = EvalCounts::accuracy(eval.style).unwrap();
        let wer = EvalCounts::rate(eval.tokens).unwrap();
        let _ = write!(
            detail,
            "seed {seed}: UA {ua:.3} gender {gender:.3} style {style:.3} WER {wer:.3}; "
        );
        sums[0] += ua;
        sums[1] += gender;
        sums[2] += style;
        sums[3] += wer;
    }
    let n = LEARN_SEEDS.len() as f64;
    let (ua, gender, style, wer) = (sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
    let mins = started.elapsed().as_secs_f64() / 60.0;
    let pass = ua >= 0.90 && gender >= 0.95 && style >= 0.80 && wer <= 0.30 && mins <= 30.0 && halving_ok;
    verdict(
        "synthetic learnability",
        pass,
        &format!(
            "means over {} seeds: UA {ua:.3} (>=0.90) gender {gender:.3} (>=0.95) \
             style {style:.3} (>=0.80) WER {wer:.3} (<=0.30); stage-1 halving {halving_ok}; \
             {mins:.1} min (<=30); [{detail}]",
            LEARN_SEEDS.len()
        ),
    );
}

// ---- criterion 7: ablation grid ---------------------------------------------

#[test]
fn ablation_grid_completes_with_directional_report() {
    let _guard = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let gen_cfg = GenerationConfig {
        n_utterances: 120,
        n_speakers: 4,
        min_duration_s: 0.4,
        max_duration_s: 0.8,
        ..GenerationConfig::default()
    };
    let corpus = generate(&gen_cfg, 13).expect("ablation corpus");
    let manifest = write_corpus(&tmp.path().join("data"), &corpus, &gen_cfg, 13).unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.corpus = manifest;
    cfg.model.encoder.n_layers = 6;
    cfg.model.encoder.model_dim = 16;
    cfg.model.encoder.ff_dim = 32;
    cfg.model.encoder.freeze_first_k_stage2 = 2;
    cfg.model.heads.aux_dim = 16;
    cfg.model.heads.ser_hidden = 32;
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    cfg.folds = 2;
    cfg.seed = 3;
    cfg.tdsa = false;

    let out = tmp.path().join("ablate");
    let outcomes = run_ablation(&cfg, &out).expect("all cells run");
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let complete = outcomes.len() == 62
        && csv.lines().count() == 63
        && csv.starts_with("fusion,tasks,coattn,UA,WA,CER,WER,gender_acc,style_acc,speaker_acc\n");

    // Directional trends (reported, not gating): concat fusion vs plain
    // weighted sum on recognition error, and all-tasks vs emotion-only UA.
    let grid = ablation_grid();
    let mut cer_sums = [0.0f64; 2];
    let mut wer_sums = [0.0f64; 2];
    let mut asr_cells = [0usize; 2];
    let mut ua_all = [0.0f64; 2];
    let mut ua_only = [0.0f64; 2];
    for (cell, outcome) in grid.iter().zip(&outcomes) {
        let side = usize::from(cell.fusion == FusionMode::WeightedSum);
        if cell.tasks.contains(&Task::Asr) {
            cer_sums[side] += EvalCounts::rate(outcome.eval.chars).unwrap();
            wer_sums[side] += EvalCounts::rate(outcome.eval.tokens).unwrap();
            asr_cells[side] += 1;
        }
        if cell.tasks.len() == 4 && cell.coattn {
            ua_all[side] = outcome.eval.ua();
        }
        if cell.tasks.is_empty() {
            ua_only[side] = outcome.eval.ua();
        }
    }
    for side in 0..2 {
        cer_sums[side] /= asr_cells[side] as f64;
        wer_sums[side] /= asr_cells[side] as f64;
    }
    println!(
        "[REPORT] fusion direction: concat CER {:.3} vs weighted-sum CER {:.3} ({}); \
         concat WER {:.3} vs weighted-sum WER {:.3} ({})",
        cer_sums[0],
        cer_sums[1],
        if cer_sums[0] <= cer_sums[1] { "expected direction" } else { "reversed at this scale" },
        wer_sums[0],
        wer_sums[1],
        if wer_sums[0] <= wer_sums[1] { "expected direction" } else { "reversed at this scale" },
    );
    println!(
        "[REPORT] all-tasks vs emotion-only UA: concat {:.3} vs {:.3}; weighted-sum {:.3} vs {:.3}",
        ua_all[0], ua_only[0], ua_all[1], ua_only[1]
    );

    verdict(
        "ablation matrix",
        complete,
        &format!(
            "62/62 cells, header fixed, {} asr cells per fusion side",
            asr_cells[0]
        ),
    );
}

// ---- criterion 8: determinism -----------------------------------------------

#[test]
fn reruns_produce_byte_identical_outputs() {
    let _guard = heavy();
    let tmp = tempfile::tempdir().unwrap();
    let gen_cfg = GenerationConfig {
        n_utterances: 24,
        n_speakers: 4,
        min_duration_s: 0.25,
        max_duration_s: 0.4,
        min_transcript_len: 2,
        max_transcript_len: 3,
        ..GenerationConfig::default()
    };
    let corpus = generate(&gen_cfg, 9).unwrap();
    let manifest = write_corpus(&tmp.path().join("data"), &corpus, &gen_cfg, 9).unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.corpus = manifest;
    cfg.model.encoder.n_layers = 2;
    cfg.model.encoder.model_dim = 8;
    cfg.model.encoder.n_heads = 2;
    cfg.model.encoder.ff_dim = 16;
    cfg.model.encoder.freeze_first_k_stage2 = 1;
    cfg.model.heads.aux_dim = 8;
    cfg.model.heads.ser_hidden = 8;
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    cfg.folds = 2;

    let (ka, kb) = (tmp.path().join("ka"), tmp.path().join("kb"));
    run_kfold(&cfg, &ka).unwrap();
    run_kfold(&cfg, &kb).unwrap();
    let (aa, ab) = (tmp.path().join("aa"), tmp.path().join("ab"));
    run_ablation(&cfg, &aa).unwrap();
    run_ablation(&cfg, &ab).unwrap();

    let mut same = true;
    let mut compared = Vec::new();
    for (left, right, name) in [
        (&ka, &kb, "folds.csv"),
        (&ka, &kb, "metrics.json"),
        (&aa, &ab, "ablation.csv"),
    ] {
        let a = std::fs::read(left.join(name)).unwrap();
        let b = std::fs::read(right.join(name)).unwrap();
        same &= a == b;
        compared.push(name);
    }
    verdict(
        "determinism",
        same,
        &format!(
            "reran k-fold and ablation with identical config+seed; byte-identical: {}",
            compared.join(", ")
        ),
    );
}
