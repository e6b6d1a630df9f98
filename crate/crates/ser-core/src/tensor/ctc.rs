//! Log-space forward/backward recursions for the CTC loss.
//!
//! Works on the blank-augmented label sequence l' of length S = 2U+1. The
//! forward pass sums path probabilities with the standard alpha recursion;
//! the backward pass combines alphas and betas into the exact gradient with
//! respect to the per-frame log-probabilities.

use crate::error::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Blank-augmented sequence: blank, t0, blank, t1, ..., blank.
pub fn extend_with_blanks(targets: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &t in targets {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Minimum number of frames that admits any valid alignment:
/// one frame per label plus one separating blank per adjacent repeat.
pub fn min_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

fn validate(t_len: usize, n_classes: usize, targets: &[usize], blank: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidOp {
            op: "ctc_loss",
            msg: "empty target sequence".into(),
        });
    }
    if blank >= n_classes {
        return Err(Error::InvalidOp {
            op: "ctc_loss",
            msg: format!("blank index {blank} out of range for {n_classes} classes"),
        });
    }
    for &t in targets {
        if t >= n_classes || t == blank {
            return Err(Error::InvalidOp {
                op: "ctc_loss",
                msg: format!("target id {t} invalid for {n_classes} classes with blank {blank}"),
            });
        }
    }
    let needed = min_frames(targets);
    if t_len < needed {
        return Err(Error::CtcInfeasible { needed, got: t_len });
    }
    Ok(())
}

/// Whether the skip transition into extended position `s` is allowed.
fn skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn alphas(lp: &[f64], t_len: usize, n_classes: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut a = vec![NEG_INF; t_len * s_len];
    a[0] = lp[ext[0]];
    if s_len > 1 {
        a[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        let lp_row = &lp[t * n_classes..(t + 1) * n_classes];
        for s in 0..s_len {
            let stay = a[(t - 1) * s_len + s];
            let step = if s >= 1 { a[(t - 1) * s_len + s - 1] } else { NEG_INF };
            let skip = if skip_allowed(ext, s, blank) {
                a[(t - 1) * s_len + s - 2]
            } else {
                NEG_INF
            };
            let total = lse3(stay, step, skip);
            a[t * s_len + s] = if total == NEG_INF {
                NEG_INF
            } else {
                total + lp_row[ext[s]]
            };
        }
    }
    a
}

fn betas(lp: &[f64], t_len: usize, n_classes: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let s_len = ext.len();
    let mut b = vec![NEG_INF; t_len * s_len];
    let last = t_len - 1;
    b[last * s_len + s_len - 1] = lp[last * n_classes + ext[s_len - 1]];
    if s_len > 1 {
        b[last * s_len + s_len - 2] = lp[last * n_classes + ext[s_len - 2]];
    }
    for t in (0..last).rev() {
        let lp_row = &lp[t * n_classes..(t + 1) * n_classes];
        for s in 0..s_len {
            let stay = b[(t + 1) * s_len + s];
            let step = if s + 1 < s_len { b[(t + 1) * s_len + s + 1] } else { NEG_INF };
            let skip = if s + 2 < s_len && skip_allowed(ext, s + 2, blank) {
                b[(t + 1) * s_len + s + 2]
            } else {
                NEG_INF
            };
            let total = lse3(stay, step, skip);
            b[t * s_len + s] = if total == NEG_INF {
                NEG_INF
            } else {
                total + lp_row[ext[s]]
            };
        }
    }
    b
}

/// Negative log-likelihood of `targets` given per-frame log-probabilities
/// (`lp` is `t_len * n_classes`, row-major, already log-softmaxed).
pub fn loss(lp: &[f64], t_len: usize, n_classes: usize, targets: &[usize], blank: usize) -> Result<f64> {
    validate(t_len, n_classes, targets, blank)?;
    let ext = extend_with_blanks(targets, blank);
    let s_len = ext.len();
    let a = alphas(lp, t_len, n_classes, &ext, blank);
    let tail = lse2(
        a[(t_len - 1) * s_len + s_len - 1],
        a[(t_len - 1) * s_len + s_len - 2],
    );
    Ok(-tail)
}

/// Accumulate `upstream * dL/d lp` into `dlp` (same layout as `lp`).
pub fn grad(
    lp: &[f64],
    t_len: usize,
    n_classes: usize,
    targets: &[usize],
    blank: usize,
    upstream: f64,
    dlp: &mut [f64],
) -> Result<()> {
    validate(t_len, n_classes, targets, blank)?;
    let ext = extend_with_blanks(targets, blank);
    let s_len = ext.len();
    let a = alphas(lp, t_len, n_classes, &ext, blank);
    let b = betas(lp, t_len, n_classes, &ext, blank);
    let log_p = lse2(
        a[(t_len - 1) * s_len + s_len - 1],
        a[(t_len - 1) * s_len + s_len - 2],
    );
    for t in 0..t_len {
        // Per class, log-sum over the lattice states carrying that label.
        let mut acc = vec![NEG_INF; n_classes];
        for s in 0..s_len {
            let occ = a[t * s_len + s] + b[t * s_len + s] - lp[t * n_classes + ext[s]];
            if occ != NEG_INF {
                acc[ext[s]] = lse2(acc[ext[s]], occ);
            }
        }
        for (k, &v) in acc.iter().enumerate() {
            if v != NEG_INF {
                dlp[t * n_classes + k] += upstream * -(v - log_p).exp();
            }
        }
    }
    Ok(())
}
