//! Exhaustive cross-check of the CTC lattice against brute-force path
//! enumeration.
//!
//! For short inputs every alignment path can be enumerated directly:
//! collapse repeats, drop blanks, and sum the probabilities of the paths
//! that spell the target. The dynamic program must agree with that sum to
//! near machine precision on every feasible instance, and must refuse the
//! infeasible ones that brute force shows have zero probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ser_core::tensor::{Tape, Tensor};
use ser_core::Error;

/// Remove consecutive duplicates, then blanks.
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

/// Probability mass of all paths that collapse to `target`, by full
/// enumeration of the `classes^t_len` alignment paths.
fn brute_force_prob(probs: &[Vec<f64>], target: &[usize], blank: usize) -> f64 {
    let t_len = probs.len();
    let classes = probs[0].len();
    let total_paths = classes.pow(t_len as u32);
    let mut mass = 0.0;
    let mut path = vec![0usize; t_len];
    for idx in 0..total_paths {
        let mut rest = idx;
        for slot in path.iter_mut() {
            *slot = rest % classes;
            rest /= classes;
        }
        if collapse(&path, blank) == target {
            let p: f64 = path.iter().zip(probs).map(|(&c, row)| row[c]).product();
            mass += p;
        }
    }
    mass
}

fn random_rows(t_len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..t_len)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

fn lattice_loss(probs: &[Vec<f64>], target: &[usize], blank: usize) -> Result<f64, Error> {
    let t_len = probs.len();
    let classes = probs[0].len();
    let flat: Vec<f64> = probs.iter().flatten().map(|p| p.ln()).collect();
    let mut tape = Tape::new();
    let lp = tape.watch(&Tensor::new(vec![t_len, classes], flat)?)?;
    let loss = tape.ctc_loss(lp, target, blank)?;
    Ok(tape.value(loss).item())
}

/// All target sequences of length `u` over `vocab` tokens.
fn all_targets(u: usize, vocab: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for idx in 0..vocab.pow(u as u32) {
        let mut rest = idx;
        let mut t = Vec::with_capacity(u);
        for _ in 0..u {
            t.push(rest % vocab);
            rest /= vocab;
        }
        out.push(t);
    }
    out
}

#[test]
fn dynamic_program_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c7c);
    let mut feasible_checked = 0usize;
    let mut infeasible_checked = 0usize;
    for vocab in 1..=3usize {
        let classes = vocab + 1;
        let blank = vocab;
        for t_len in 1..=6usize {
            for u in 1..=3usize {
                for target in all_targets(u, vocab) {
                    for _ in 0..3 {
                        let probs = random_rows(t_len, classes, &mut rng);
                        let brute = brute_force_prob(&probs, &target, blank);
                        match lattice_loss(&probs, &target, blank) {
                            Ok(loss) => {
                                assert!(
                                    (loss - (-brute.ln())).abs() < 1e-10,
                                    "T={t_len} target={target:?}: {loss} vs {}",
                                    -brute.ln()
                                );
                                feasible_checked += 1;
                            }
                            Err(Error::CtcInfeasible { .. }) => {
                                assert_eq!(
                                    brute, 0.0,
                                    "T={t_len} target={target:?} rejected but has mass"
                                );
                                infeasible_checked += 1;
                            }
                            Err(other) => panic!("unexpected error: {other}"),
                        }
                    }
                }
            }
        }
    }
    assert!(
        feasible_checked >= 500,
        "only {feasible_checked} feasible instances covered"
    );
    assert!(infeasible_checked > 0, "no infeasible instance exercised");
}

#[test]
fn uniform_single_frame_pins_ln_half() {
    // One frame, one token, uniform over {token, blank}: only the path
    // (token) works, so the loss is -ln(1/2).
    let probs = vec![vec![0.5, 0.5]];
    let loss = lattice_loss(&probs, &[0], 1).unwrap();
    assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
}

#[test]
fn uniform_two_frames_pin_ln_three_quarters() {
    let probs = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
    let loss = lattice_loss(&probs, &[0], 1).unwrap();
    assert!((loss - 0.2876820724517809).abs() < 1e-12);
}

#[test]
fn repeated_tokens_need_separating_frames() {
    // [a, a] needs three frames (a, blank, a); two must be rejected.
    let probs = random_rows(2, 3, &mut ChaCha8Rng::seed_from_u64(5));
    match lattice_loss(&probs, &[0, 0], 2) {
        Err(Error::CtcInfeasible { needed, got }) => {
            assert_eq!((needed, got), (3, 2));
        }
        other => panic!("expected infeasibility, got {other:?}"),
    }
    let probs3 = random_rows(3, 3, &mut ChaCha8Rng::seed_from_u64(6));
    assert!(lattice_loss(&probs3, &[0, 0], 2).is_ok());
}
