//! Time-domain speed augmentation by linear resampling.
//!
//! A clip resampled at rate r keeps its content but plays at r% of the
//! original tempo, so the output holds `round(len * 100 / r)` samples.
//! Endpoints map to endpoints, which makes rate 100 the exact identity.
//! The augmentation is for training only; callers in evaluation paths must
//! not invoke it.

use rand::Rng;

use crate::error::{Error, Result};

/// The supported perturbation rates, in percent.
pub const RATES: [u32; 3] = [80, 100, 120];

/// Output length for `len` input samples at `rate`.
pub fn output_len(len: usize, rate: u32) -> usize {
    (len as f64 * 100.0 / f64::from(rate)).round() as usize
}

/// Pick one rate uniformly; the per-utterance draw used each training epoch.
pub fn choose_rate<R: Rng>(rng: &mut R) -> u32 {
    RATES[rng.gen_range(0..RATES.len())]
}

/// Linearly resample `audio` to the tempo given by `rate`.
pub fn speed_perturb(audio: &[f64], rate: u32) -> Result<Vec<f64>> {
    if !RATES.contains(&rate) {
        return Err(Error::InvalidOp {
            op: "tdsa",
            msg: format!("unsupported rate {rate}; expected one of {RATES:?}"),
        });
    }
    if audio.is_empty() {
        return Err(Error::InvalidOp {
            op: "tdsa",
            msg: "empty audio".into(),
        });
    }
    if rate == 100 {
        return Ok(audio.to_vec());
    }
    let out_len = output_len(audio.len(), rate);
    if out_len <= 1 || audio.len() == 1 {
        return Ok(vec![audio[0]; out_len.max(1)]);
    }
    let scale = (audio.len() - 1) as f64 / (out_len - 1) as f64;
    Ok((0..out_len)
        .map(|j| {
            let src = j as f64 * scale;
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(audio.len() - 1);
            let frac = src - lo as f64;
            audio[lo] * (1.0 - frac) + audio[hi] * frac
        })
        .collect())
}
