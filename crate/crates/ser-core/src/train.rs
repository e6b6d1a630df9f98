//! Two-stage training, held-out evaluation, and the k-fold / ablation drivers.
//!
//! A "batch" accumulates per-utterance graphs on one tape and steps on the
//! mean loss; there is no cross-utterance tensor padding anywhere in the
//! training path, so batch composition cannot perturb per-utterance math.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::folds::{make_folds, FoldPlan};
use crate::data::io::read_corpus;
use crate::data::{tdsa, Utterance, EMOTIONS};
use crate::encoder::Stage;
use crate::experiment::{
    ablation_grid, fold_csv, fusion_label, write_json, write_text, Cell, EvalCounts,
    ExperimentConfig, FoldOutcome, RunResult, ABLATION_CSV_HEADER,
};
use crate::fusion::FusionMode;
use crate::metrics::{edit_distance, Confusion};
use crate::model::{self, Mode, ModelConfig};
use crate::optim::{Adam, LrGroups, Optimizer, ParamSet};
use crate::seeding::subseed;
use crate::tasks::{blank_id, ctc_greedy_decode, Task};
use crate::tensor::Tape;
use crate::{Error, Result};

/// Everything produced by training on one train split.
pub struct TrainedFold {
    pub params: ParamSet,
    /// Config actually trained: `n_speakers` is the train-split speaker count.
    pub model_cfg: ModelConfig,
    /// Corpus speaker id -> dense label over the train split's speakers.
    /// Held-out speakers are absent, so their recognition accuracy is 0 by
    /// construction.
    pub speaker_index: BTreeMap<usize, usize>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

impl TrainedFold {
    pub fn fusion_weights(&self) -> Result<Vec<f64>> {
        let name = match self.model_cfg.fusion {
            FusionMode::Ari => "fusion.ari_w",
            FusionMode::WeightedSum => "fusion.sum_v",
        };
        Ok(self.params.value(name)?.data().to_vec())
    }
}

/// Dense labels for the train split's speakers, in sorted-id order.
pub fn speaker_index(train: &[&Utterance]) -> BTreeMap<usize, usize> {
    let speakers: BTreeSet<usize> = train.iter().map(|u| u.speaker).collect();
    speakers.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
}

/// Runs the freeze-scheduled two-stage loop on one train split.
///
/// Stage 1 trains the auxiliary heads with the conv frontend frozen; it is
/// skipped when no auxiliary task is enabled. Stage 2 trains the emotion
/// branch with the frontend and the first `freeze_first_k_stage2` blocks
/// frozen. Each stage gets a fresh optimizer.
pub fn train_two_stage(
    cfg: &ExperimentConfig,
    train: &[&Utterance],
    fold: usize,
) -> Result<TrainedFold> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let index = speaker_index(train);
    let mut model_cfg = cfg.model.clone();
    model_cfg.n_speakers = index.len();
    model_cfg.validate()?;
    if !model_cfg.tasks.is_empty() {
        cfg.weights.validate(&model_cfg.tasks)?;
    }
    let mut params = model::init_params(&model_cfg, subseed(cfg.seed, "init", fold as u64))?;

    let mut stage1_losses = Vec::new();
    if !model_cfg.tasks.is_empty() && cfg.stage1_epochs > 0 {
        model::apply_stage(&mut params, Stage::One, &model_cfg)?;
        let mut opt = Adam::new(LrGroups {
            encoder: cfg.lr_encoder,
            downstream: cfg.lr_downstream,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "stage1", fold as u64));
        for epoch in 0..cfg.stage1_epochs {
            let mean = run_epoch(
                cfg, &model_cfg, &mut params, &mut opt, &mut rng, train, &index, 1, epoch,
            )?;
            log::info!("fold {fold} stage 1 epoch {epoch}: loss {mean:.4}");
            stage1_losses.push(mean);
        }
    }

    let mut stage2_losses = Vec::new();
    if cfg.stage2_epochs > 0 {
        model::apply_stage(&mut params, Stage::Two, &model_cfg)?;
        let mut opt = Adam::new(LrGroups {
            encoder: cfg.lr_encoder,
            downstream: cfg.lr_downstream,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "stage2", fold as u64));
        for epoch in 0..cfg.stage2_epochs {
            let mean = run_epoch(
                cfg, &model_cfg, &mut params, &mut opt, &mut rng, train, &index, 2, epoch,
            )?;
            log::info!("fold {fold} stage 2 epoch {epoch}: loss {mean:.4}");
            stage2_losses.push(mean);
        }
    }

    Ok(TrainedFold {
        params,
        model_cfg,
        speaker_index: index,
        stage1_losses,
        stage2_losses,
    })
}

/// One shuffled pass over the train split. Returns the mean per-utterance
/// loss. Any non-finite value surfaces as [`Error::Diverged`].
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    params: &mut ParamSet,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    train: &[&Utterance],
    index: &BTreeMap<usize, usize>,
    stage: u8,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
        let escalate = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                stage,
                epoch,
                batch: batch_no,
            },
            other => other,
        };
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let utt = train[i];
            let audio: &[f64];
            let perturbed;
            if cfg.tdsa {
                let rate = tdsa::choose_rate(rng);
                if rate == 100 {
                    audio = &utt.samples;
                } else {
                    perturbed = tdsa::speed_perturb(&utt.samples, rate)?;
                    audio = &perturbed;
                }
            } else {
                audio = &utt.samples;
            }
            let frames = model_cfg.encoder.frames(audio.len());
            let fwd = model::forward_utterance(
                &mut tape,
                &bound,
                model_cfg,
                audio,
                frames,
                Mode::Train,
                stage == 2,
                rng,
            )
            .map_err(escalate)?;
            let loss = if stage == 1 {
                model::stage1_utterance_loss(
                    &mut tape,
                    &fwd,
                    utt,
                    index.get(&utt.speaker).copied(),
                    &cfg.weights,
                    &model_cfg.tasks,
                )?
            } else {
                model::stage2_utterance_loss(&mut tape, &fwd, utt)?
            };
            losses.push(loss);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l).map_err(escalate)?;
        }
        loss_sum += tape.value(total).data()[0];
        let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
        let grads = tape.backward(mean).map_err(escalate)?;
        let grad_map = tape.trainable_grads(&grads);
        opt.step(params, &grad_map).map_err(escalate)?;
    }
    Ok(loss_sum / train.len() as f64)
}

fn argmax_row(t: &crate::tensor::Tensor) -> usize {
    t.data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty logits")
}

fn bump(counter: &mut Option<(usize, usize)>, hit: bool) {
    let (correct, total) = counter.get_or_insert((0, 0));
    *correct += hit as usize;
    *total += 1;
}

/// Scores a trained model on a test split.
///
/// With `expect_unseen_speakers` the split is required to be speaker-disjoint
/// from the train split; any overlap is reported as an error rather than
/// silently inflating speaker accuracy.
pub fn evaluate(
    trained: &TrainedFold,
    test: &[&Utterance],
    expect_unseen_speakers: bool,
) -> Result<EvalCounts> {
    if test.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let cfg = &trained.model_cfg;
    let mut emotion = Confusion::new(EMOTIONS);
    let mut gender = None;
    let mut style = None;
    let mut speaker = None;
    let mut chars: Option<(usize, usize)> = None;
    let mut tokens: Option<(usize, usize)> = None;
    // Eval mode draws no randomness; the rng is only a signature requirement.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for utt in test {
        if expect_unseen_speakers && trained.speaker_index.contains_key(&utt.speaker) {
            return Err(Error::BadConfig(format!(
                "speaker {} appears in both train and test splits",
                utt.speaker
            )));
        }
        let mut tape = Tape::new();
        let bound = trained.params.bind_all(&mut tape)?;
        let frames = cfg.encoder.frames(utt.samples.len());
        let fwd = model::forward_utterance(
            &mut tape,
            &bound,
            cfg,
            &utt.samples,
            frames,
            Mode::Eval,
            true,
            &mut rng,
        )?;
        let ser = fwd.ser_logits.expect("evaluation runs the emotion branch");
        emotion.record(utt.emotion.index(), argmax_row(tape.value(ser)))?;
        for (&task, out) in &fwd.aux {
            match task {
                Task::Gender => {
                    bump(
                        &mut gender,
                        argmax_row(tape.value(out.logits)) == utt.gender.index(),
                    );
                }
                Task::Style => {
                    bump(
                        &mut style,
                        argmax_row(tape.value(out.logits)) == utt.style.index(),
                    );
                }
                Task::Speaker => {
                    let pred = argmax_row(tape.value(out.logits));
                    let hit = trained
                        .speaker_index
                        .get(&utt.speaker)
                        .is_some_and(|&dense| dense == pred);
                    bump(&mut speaker, hit);
                }
                Task::Asr => {
                    let decoded = ctc_greedy_decode(tape.value(out.logits), blank_id());
                    let hyp_chars: Vec<char> =
                        crate::data::render_transcript(&decoded).chars().collect();
                    let ref_chars: Vec<char> = utt.transcript().chars().collect();
                    let add = |acc: &mut Option<(usize, usize)>, d: usize, n: usize| {
                        let (dist, len) = acc.get_or_insert((0, 0));
                        *dist += d;
                        *len += n;
                    };
                    add(
                        &mut chars,
                        edit_distance(&hyp_chars, &ref_chars),
                        ref_chars.len(),
                    );
                    add(
                        &mut tokens,
                        edit_distance(&decoded, &utt.tokens),
                        utt.tokens.len(),
                    );
                }
            }
        }
    }
    for acc in [&mut chars, &mut tokens] {
        if matches!(acc, Some((_, 0))) {
            return Err(Error::EmptyReferences);
        }
    }
    let mut counts = vec![0usize; EMOTIONS * EMOTIONS];
    for t in 0..EMOTIONS {
        for p in 0..EMOTIONS {
            counts[t * EMOTIONS + p] = emotion.count(t, p);
        }
    }
    Ok(EvalCounts {
        emotion_counts: counts,
        emotion_classes: EMOTIONS,
        gender,
        style,
        speaker,
        chars,
        tokens,
    })
}

// ---- k-fold driver ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FusionReport {
    mode: String,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct LossLine {
    stage: u8,
    epoch: usize,
    loss: f64,
}

fn write_losses(path: &Path, stage1: &[f64], stage2: &[f64]) -> Result<()> {
    let mut out = String::new();
    for (stage, losses) in [(1u8, stage1), (2u8, stage2)] {
        for (epoch, &loss) in losses.iter().enumerate() {
            let line = serde_json::to_string(&LossLine { stage, epoch, loss }).expect("serializes");
            out.push_str(&line);
            out.push('\n');
        }
    }
    write_text(path, &out)
}

fn run_fold(
    cfg: &ExperimentConfig,
    corpus: &[Utterance],
    plan: &FoldPlan,
    fold: usize,
    out_dir: &Path,
) -> Result<(FoldOutcome, f64)> {
    let started = Instant::now();
    let (train, test) = plan.split(corpus, fold);
    let trained = train_two_stage(cfg, &train, fold)?;
    let eval = evaluate(&trained, &test, true)?;

    let fold_dir = out_dir.join(format!("fold{fold}"));
    fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
    checkpoint::save(&trained.params, &fold_dir.join("params.ckpt"))?;
    write_json(
        &fold_dir.join("fusion.json"),
        &FusionReport {
            mode: fusion_label(trained.model_cfg.fusion).to_string(),
            weights: trained.fusion_weights()?,
        },
    )?;
    write_losses(
        &fold_dir.join("losses.jsonl"),
        &trained.stage1_losses,
        &trained.stage2_losses,
    )?;

    let fusion_weights = trained.fusion_weights()?;
    let outcome = FoldOutcome {
        fold,
        per_class_recall: eval.confusion().recalls(),
        eval,
        stage1_losses: trained.stage1_losses,
        stage2_losses: trained.stage2_losses,
        fusion_weights,
    };
    Ok((outcome, started.elapsed().as_secs_f64()))
}

/// Trains and evaluates every fold (in parallel), then pools the counters.
///
/// Deterministic outputs (`config.toml`, `folds.csv`, `metrics.json`,
/// per-fold checkpoints and loss logs) never contain wall-clock values;
/// timings go to `timing.txt` and the log. Folds that finished before a
/// failure keep their on-disk results.
pub fn run_kfold(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let corpus = read_corpus(&cfg.corpus)?;
    let plan = make_folds(&corpus, cfg.folds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;

    let started = Instant::now();
    let results: Vec<(usize, Result<(FoldOutcome, f64)>)> = (0..cfg.folds)
        .into_par_iter()
        .map(|fold| (fold, run_fold(cfg, &corpus, &plan, fold, out_dir)))
        .collect();

    let mut timing = String::new();
    let mut outcomes = Vec::new();
    let mut first_failure = None;
    for (fold, res) in results {
        match res {
            Ok((outcome, secs)) => {
                let _ = writeln!(timing, "fold {fold}: {secs:.1} s");
                outcomes.push(outcome);
            }
            Err(e) => {
                let _ = writeln!(timing, "fold {fold}: failed");
                if first_failure.is_none() {
                    first_failure = Some((fold, e));
                }
            }
        }
    }
    let _ = writeln!(timing, "total: {:.1} s", started.elapsed().as_secs_f64());
    write_text(&out_dir.join("timing.txt"), &timing)?;
    if let Some((fold, e)) = first_failure {
        return Err(Error::FoldFailed {
            fold,
            source: Box::new(e),
        });
    }

    let mut pooled = outcomes[0].eval.clone();
    for o in &outcomes[1..] {
        pooled.merge(&o.eval)?;
    }
    let result = RunResult {
        config: cfg.clone(),
        folds: outcomes,
        pooled,
    };
    write_text(&out_dir.join("folds.csv"), &fold_csv(&result))?;
    write_json(&out_dir.join("metrics.json"), &result)?;
    log::info!(
        "k-fold run finished in {:.1} s: pooled UA {:.4}, WA {:.4}",
        started.elapsed().as_secs_f64(),
        result.pooled_ua(),
        result.pooled_wa()
    );
    Ok(result)
}

// ---- ablation driver --------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub eval: EvalCounts,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    train: &[&Utterance],
    test: &[&Utterance],
    out_dir: &Path,
) -> Result<(CellOutcome, f64)> {
    let started = Instant::now();
    let mut cell_cfg = cfg.clone();
    cell_cfg.model.fusion = cell.fusion;
    cell_cfg.model.tasks = cell.tasks.clone();
    cell_cfg.model.coattn = cell.coattn;
    let trained = train_two_stage(&cell_cfg, train, 0)?;
    let eval = evaluate(&trained, test, true)?;
    let outcome = CellOutcome {
        cell: cell.clone(),
        eval,
        stage1_losses: trained.stage1_losses,
        stage2_losses: trained.stage2_losses,
    };
    write_json(&out_dir.join(cell.label()).join("metrics.json"), &outcome)?;
    Ok((outcome, started.elapsed().as_secs_f64()))
}

/// Trains every grid cell on fold 0's split and writes `ablation.csv` in
/// grid order. On failure the rows for completed cells are still written
/// before the first error is returned.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let corpus = read_corpus(&cfg.corpus)?;
    let plan = make_folds(&corpus, cfg.folds)?;
    let (train, test) = plan.split(&corpus, 0);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;

    let started = Instant::now();
    let cells = ablation_grid();
    let results: Vec<Result<(CellOutcome, f64)>> = cells
        .par_iter()
        .map(|cell| run_cell(cfg, cell, &train, &test, out_dir))
        .collect();

    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    let mut timing = String::new();
    let mut outcomes = Vec::new();
    let mut first_failure = None;
    for (cell, res) in cells.iter().zip(results) {
        match res {
            Ok((outcome, secs)) => {
                let _ = writeln!(csv, "{}", cell.csv_row(&outcome.eval));
                let _ = writeln!(timing, "{}: {secs:.1} s", cell.label());
                outcomes.push(outcome);
            }
            Err(e) => {
                let _ = writeln!(timing, "{}: failed", cell.label());
                if first_failure.is_none() {
                    first_failure = Some(e);
                }
            }
        }
    }
    let _ = writeln!(timing, "total: {:.1} s", started.elapsed().as_secs_f64());
    write_text(&out_dir.join("ablation.csv"), &csv)?;
    write_text(&out_dir.join("timing.txt"), &timing)?;
    if let Some(e) = first_failure {
        return Err(e);
    }
    log::info!(
        "ablation finished: {} cells in {:.1} s",
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(outcomes)
}

/// Reads a task-subset cell back from an ablation CSV row, for reporting.
pub fn parse_cell_row(row: &str) -> Option<(String, String, String, Vec<Option<f64>>)> {
    let mut parts = row.split(',');
    let fusion = parts.next()?.to_string();
    let tasks = parts.next()?.to_string();
    let coattn = parts.next()?.to_string();
    let metrics = parts
        .map(|s| {
            if s.is_empty() {
                None
            } else {
                s.parse::<f64>().ok()
            }
        })
        .collect();
    Some((fusion, tasks, coattn, metrics))
}
