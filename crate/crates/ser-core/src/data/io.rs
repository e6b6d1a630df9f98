//! Corpus persistence: JSONL manifest plus one WAV file per utterance.
//!
//! Loading validates eagerly: every referenced audio file is opened, length-
//! checked against the manifest, and label fields are cross-checked before
//! the corpus is handed out, so corruption surfaces at load time with the
//! offending path instead of mid-training.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::GenerationConfig;
use super::wav;
use super::{parse_transcript, Gender, ManifestEntry, Utterance};
use crate::error::{Error, Result};

/// Sidecar recording exactly how a stored corpus was produced.
#[derive(Serialize, Deserialize)]
pub struct GenerationRecord {
    pub seed: u64,
    pub config: GenerationConfig,
}

/// Write the corpus under `dir`: `wav/<id>.wav` per utterance,
/// `manifest.jsonl`, and a `generation.toml` snapshot of `(config, seed)`.
/// Returns the manifest path.
pub fn write_corpus(
    dir: &Path,
    corpus: &[Utterance],
    config: &GenerationConfig,
    seed: u64,
) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut manifest = String::new();
    for utt in corpus {
        let rel = format!("wav/{}.wav", utt.id);
        wav::write_wav(&dir.join(&rel), &utt.samples, utt.sample_rate)?;
        let entry = ManifestEntry {
            id: utt.id.clone(),
            path: rel,
            num_samples: utt.samples.len(),
            sample_rate: utt.sample_rate,
            speaker: utt.speaker,
            gender: utt.gender,
            style: utt.style,
            emotion: utt.emotion,
            transcript: utt.transcript(),
        };
        manifest.push_str(&serde_json::to_string(&entry).map_err(|e| Error::InvalidOp {
            op: "manifest",
            msg: e.to_string(),
        })?);
        manifest.push('\n');
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    let record = GenerationRecord {
        seed,
        config: config.clone(),
    };
    let toml_text = toml::to_string_pretty(&record).map_err(|e| Error::InvalidOp {
        op: "generation-record",
        msg: e.to_string(),
    })?;
    let record_path = dir.join("generation.toml");
    fs::write(&record_path, toml_text).map_err(|e| Error::io(&record_path, e))?;
    Ok(manifest_path)
}

/// Load a corpus from its manifest, validating every entry and its audio.
pub fn read_corpus(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let malformed = |offset: usize, msg: String| Error::MalformedFile {
        path: manifest_path.to_path_buf(),
        offset: offset as u64,
        msg,
    };

    let mut corpus = Vec::new();
    let mut seen = BTreeSet::new();
    let mut offset = 0usize;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| malformed(line_offset, format!("bad manifest record: {e}")))?;
        if !seen.insert(entry.id.clone()) {
            return Err(malformed(
                line_offset,
                format!("duplicate utterance id '{}'", entry.id),
            ));
        }
        if entry.gender != Gender::of_speaker(entry.speaker) {
            return Err(malformed(
                line_offset,
                format!(
                    "speaker {} cannot have gender {:?}",
                    entry.speaker, entry.gender
                ),
            ));
        }
        let tokens = parse_transcript(&entry.transcript)
            .map_err(|e| malformed(line_offset, format!("bad transcript: {e}")))?;
        if tokens.is_empty() {
            return Err(malformed(line_offset, "empty transcript".into()));
        }

        let audio_path = base.join(&entry.path);
        if !audio_path.is_file() {
            return Err(Error::MissingFile { path: audio_path });
        }
        let (samples, sample_rate) = wav::read_wav(&audio_path)?;
        if samples.len() != entry.num_samples {
            return Err(malformed(
                line_offset,
                format!(
                    "{}: manifest says {} samples, file holds {}",
                    entry.path,
                    entry.num_samples,
                    samples.len()
                ),
            ));
        }
        if sample_rate != entry.sample_rate {
            return Err(malformed(
                line_offset,
                format!(
                    "{}: manifest says {} Hz, file says {} Hz",
                    entry.path, entry.sample_rate, sample_rate
                ),
            ));
        }
        corpus.push(Utterance {
            id: entry.id,
            samples,
            sample_rate,
            speaker: entry.speaker,
            gender: entry.gender,
            style: entry.style,
            emotion: entry.emotion,
            tokens,
        });
    }
    if corpus.is_empty() {
        return Err(malformed(0, "manifest holds no records".into()));
    }
    Ok(corpus)
}
