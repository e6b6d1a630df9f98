//! Speaker-independent cross-validation folds.
//!
//! Folds are keyed by speaker, never by utterance: a held-out speaker's
//! clips all land in the same test split. Speakers are chunked in sorted-id
//! order, so with consecutive male/female ids and k = n_speakers/2 each
//! fold holds out exactly one male–female pair.

use std::collections::BTreeSet;

use super::Utterance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index -> sorted held-out speaker ids.
    pub held_out: Vec<Vec<usize>>,
}

/// Build a k-fold plan over the speakers present in `corpus`.
pub fn make_folds(corpus: &[Utterance], k: usize) -> Result<FoldPlan> {
    if corpus.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if k == 0 {
        return Err(Error::BadConfig("fold count must be positive".into()));
    }
    let speakers: Vec<usize> = corpus
        .iter()
        .map(|u| u.speaker)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if speakers.len() % k != 0 {
        return Err(Error::BadConfig(format!(
            "{} speakers cannot be split into {k} equal folds",
            speakers.len()
        )));
    }
    let per_fold = speakers.len() / k;
    let held_out = speakers
        .chunks(per_fold)
        .map(|chunk| chunk.to_vec())
        .collect();
    Ok(FoldPlan { k, held_out })
}

impl FoldPlan {
    /// Train/test split of `corpus` for one fold. Membership is decided
    /// purely by speaker.
    pub fn split<'c>(
        &self,
        corpus: &'c [Utterance],
        fold: usize,
    ) -> (Vec<&'c Utterance>, Vec<&'c Utterance>) {
        let held: BTreeSet<usize> = self.held_out[fold].iter().copied().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for utt in corpus {
            if held.contains(&utt.speaker) {
                test.push(utt);
            } else {
                train.push(utt);
            }
        }
        (train, test)
    }
}
