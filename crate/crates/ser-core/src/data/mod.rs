//! The synthetic corpus: label types, utterances, and everything needed to
//! produce, store and split them.

pub mod folds;
pub mod generate;
pub mod io;
pub mod tdsa;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory for transcripts. Each token maps to a distinct dual-tone
/// signature in the generated audio.
pub const VOCAB: [&str; 6] = ["ba", "de", "gi", "ko", "lu", "me"];

/// Number of emotion classes.
pub const EMOTIONS: usize = 4;

pub fn token_id(token: &str) -> Option<usize> {
    VOCAB.iter().position(|t| *t == token)
}

pub fn render_transcript(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB[t])
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_transcript(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| {
            token_id(tok).ok_or_else(|| Error::InvalidOp {
                op: "transcript",
                msg: format!("unknown token '{tok}'"),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    /// Gender is a pure function of the speaker id: even ids are male.
    pub fn of_speaker(speaker: usize) -> Gender {
        if speaker % 2 == 0 {
            Gender::Male
        } else {
            Gender::Female
        }
    }

    pub fn index(self) -> usize {
        match self {
            Gender::Male => 0,
            Gender::Female => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Scripted,
    Improvised,
}

impl Style {
    pub fn index(self) -> usize {
        match self {
            Style::Scripted => 0,
            Style::Improvised => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Happy,
    Angry,
    Sad,
}

impl Emotion {
    pub const ALL: [Emotion; EMOTIONS] = [
        Emotion::Neutral,
        Emotion::Happy,
        Emotion::Angry,
        Emotion::Sad,
    ];

    pub fn index(self) -> usize {
        match self {
            Emotion::Neutral => 0,
            Emotion::Happy => 1,
            Emotion::Angry => 2,
            Emotion::Sad => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Neutral => "neutral",
            Emotion::Happy => "happy",
            Emotion::Angry => "angry",
            Emotion::Sad => "sad",
        }
    }
}

/// One labeled audio clip, fully in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub speaker: usize,
    pub gender: Gender,
    pub style: Style,
    pub emotion: Emotion,
    /// Vocabulary ids, in spoken order.
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn transcript(&self) -> String {
        render_transcript(&self.tokens)
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One manifest line. Field names and order are part of the on-disk format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Audio path relative to the manifest's directory.
    pub path: String,
    pub num_samples: usize,
    pub sample_rate: u32,
    pub speaker: usize,
    pub gender: Gender,
    pub style: Style,
    pub emotion: Emotion,
    /// Space-separated vocabulary tokens.
    pub transcript: String,
}
