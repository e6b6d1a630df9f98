//! Experiment configuration, run-directory outputs, and the ablation grid.
//!
//! Every number written to CSV or JSON is a pure function of (config, seed);
//! wall-clock time is logged but never written into result files, so reruns
//! are byte-identical.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::fusion::FusionMode;
use crate::metrics::Confusion;
use crate::model::ModelConfig;
use crate::tasks::{LossWeights, Task, ALL_TASKS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest path of the corpus to train on.
    pub corpus: PathBuf,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Learning rate for `encoder.*` parameters.
    pub lr_encoder: f64,
    /// Learning rate for fusion, gate, and head parameters.
    pub lr_downstream: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    /// Train-time speed perturbation; never applied at evaluation.
    pub tdsa: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: PathBuf::from("data/manifest.jsonl"),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            stage1_epochs: 30,
            stage2_epochs: 30,
            lr_encoder: 1e-4,
            lr_downstream: 1e-3,
            batch_size: 4,
            folds: 5,
            seed: 7,
            tdsa: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::BadConfig("batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::BadConfig(format!(
                "need at least 2 folds for held-out evaluation, got {}",
                self.folds
            )));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_downstream", self.lr_downstream)]
        {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::BadConfig(format!("{name} must be positive, got {lr}")));
            }
        }
        if !self.model.tasks.is_empty() {
            self.weights.validate(&self.model.tasks)?;
        }
        Ok(())
    }

    pub fn from_toml(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.to_path_buf(),
            offset: 0,
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Canonical string for a task subset: `+`-joined names, `none` when empty.
pub fn task_set_label(tasks: &BTreeSet<Task>) -> String {
    if tasks.is_empty() {
        return "none".into();
    }
    ALL_TASKS
        .iter()
        .filter(|t| tasks.contains(t))
        .map(|t| t.name())
        .collect::<Vec<_>>()
        .join("+")
}

pub fn fusion_label(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::Ari => "ari",
        FusionMode::WeightedSum => "weighted_sum",
    }
}

// ---- per-fold results -------------------------------------------------------

/// Counters for one evaluation pass. Rates are derived, so fold results pool
/// exactly by summing counters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub emotion_counts: Vec<usize>,
    pub emotion_classes: usize,
    pub gender: Option<(usize, usize)>,
    pub style: Option<(usize, usize)>,
    pub speaker: Option<(usize, usize)>,
    /// (edit distance, reference length) over rendered characters.
    pub chars: Option<(usize, usize)>,
    /// Same over tokens.
    pub tokens: Option<(usize, usize)>,
}

impl EvalCounts {
    pub fn confusion(&self) -> Confusion {
        let mut c = Confusion::new(self.emotion_classes);
        for truth in 0..self.emotion_classes {
            for pred in 0..self.emotion_classes {
                let n = self.emotion_counts[truth * self.emotion_classes + pred];
                for _ in 0..n {
                    c.record(truth, pred).expect("counts are in range");
                }
            }
        }
        c
    }

    pub fn wa(&self) -> f64 {
        self.confusion().wa()
    }

    pub fn ua(&self) -> f64 {
        self.confusion().ua()
    }

    pub fn accuracy(pair: Option<(usize, usize)>) -> Option<f64> {
        pair.map(|(correct, total)| correct as f64 / total as f64)
    }

    pub fn rate(pair: Option<(usize, usize)>) -> Option<f64> {
        pair.map(|(dist, len)| dist as f64 / len as f64)
    }

    /// Pools another evaluation into this one.
    pub fn merge(&mut self, other: &EvalCounts) -> Result<()> {
        if self.emotion_classes != other.emotion_classes {
            return Err(Error::ShapeMismatch {
                op: "eval_merge",
                lhs: vec![self.emotion_classes],
                rhs: vec![other.emotion_classes],
            });
        }
        for (a, b) in self.emotion_counts.iter_mut().zip(&other.emotion_counts) {
            *a += b;
        }
        let add = |a: &mut Option<(usize, usize)>, b: &Option<(usize, usize)>| {
            *a = match (*a, *b) {
                (Some((x, y)), Some((u, v))) => Some((x + u, y + v)),
                (None, Some(p)) => Some(p),
                (p, None) => p,
            };
        };
        add(&mut self.gender, &other.gender);
        add(&mut self.style, &other.style);
        add(&mut self.speaker, &other.speaker);
        add(&mut self.chars, &other.chars);
        add(&mut self.tokens, &other.tokens);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub eval: EvalCounts,
    pub per_class_recall: Vec<Option<f64>>,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Learned layer weights: `ari_w` or `sum_v` values after training.
    pub fusion_weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldOutcome>,
    pub pooled: EvalCounts,
}

impl RunResult {
    pub fn pooled_wa(&self) -> f64 {
        self.pooled.wa()
    }

    pub fn pooled_ua(&self) -> f64 {
        self.pooled.ua()
    }
}

// ---- CSV --------------------------------------------------------------------

fn metric_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Metric columns shared by the fold and ablation CSVs.
fn metric_columns(eval: &EvalCounts) -> String {
    format!(
        "{:.6},{:.6},{},{},{},{},{}",
        eval.ua(),
        eval.wa(),
        metric_cell(EvalCounts::rate(eval.chars)),
        metric_cell(EvalCounts::rate(eval.tokens)),
        metric_cell(EvalCounts::accuracy(eval.gender)),
        metric_cell(EvalCounts::accuracy(eval.style)),
        metric_cell(EvalCounts::accuracy(eval.speaker)),
    )
}

pub const FOLD_CSV_HEADER: &str = "fold,UA,WA,CER,WER,gender_acc,style_acc,speaker_acc";

pub fn fold_csv(result: &RunResult) -> String {
    let mut out = String::from(FOLD_CSV_HEADER);
    out.push('\n');
    for fold in &result.folds {
        let _ = writeln!(out, "{},{}", fold.fold, metric_columns(&fold.eval));
    }
    let _ = writeln!(out, "pooled,{}", metric_columns(&result.pooled));
    out
}

pub const ABLATION_CSV_HEADER: &str =
    "fusion,tasks,coattn,UA,WA,CER,WER,gender_acc,style_acc,speaker_acc";

/// One ablation grid cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub fusion: FusionMode,
    pub tasks: BTreeSet<Task>,
    pub coattn: bool,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}",
            fusion_label(self.fusion),
            task_set_label(&self.tasks),
            if self.coattn { "on" } else { "off" }
        )
    }

    pub fn csv_row(&self, eval: &EvalCounts) -> String {
        format!(
            "{},{},{},{}",
            fusion_label(self.fusion),
            task_set_label(&self.tasks),
            if self.coattn { "on" } else { "off" },
            metric_columns(eval)
        )
    }
}

/// The full grid: both fusion modes × all 16 task subsets × gate on/off,
/// with the gate fixed off for the empty subset (nothing to attend over).
pub fn ablation_grid() -> Vec<Cell> {
    let mut cells = Vec::new();
    for fusion in [FusionMode::Ari, FusionMode::WeightedSum] {
        for mask in 0u32..16 {
            let tasks: BTreeSet<Task> = ALL_TASKS
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &t)| t)
                .collect();
            let coattn_options: &[bool] = if tasks.is_empty() {
                &[false]
            } else {
                &[false, true]
            };
            for &coattn in coattn_options {
                cells.push(Cell {
                    fusion,
                    tasks: tasks.clone(),
                    coattn,
                });
            }
        }
    }
    cells
}

// ---- run directory ----------------------------------------------------------

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        offset: 0,
        msg: format!("serialization failed: {e}"),
    })?;
    write_text(path, &(text + "\n"))
}
