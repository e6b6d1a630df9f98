//! Small graph-building helpers shared by the encoder, fusion, and head
//! modules.

use rand::Rng;

use crate::tensor::{Tape, Tensor, VarId};
use crate::Result;

/// Additive bias that drives masked attention logits to a softmax weight of
/// exactly zero: `exp(-1e30 - max)` underflows to `0.0`.
pub const MASK_BIAS: f64 = -1e30;

/// `x @ w + b` with `b` broadcast across rows.
pub fn affine(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Uniform init on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Mean over the first `valid` rows of a `[t, d]` matrix; trailing rows are
/// padding and must not influence the result.
pub fn mean_pool_valid(tape: &mut Tape, x: VarId, valid: usize) -> Result<VarId> {
    let head = tape.slice(x, 0, 0, valid)?;
    tape.mean_axis(head, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = init_uniform(&[64, 3], 64, &mut rng);
        let bound = 1.0 / 8.0;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > bound / 4.0));
    }

    #[test]
    fn pool_ignores_trailing_rows() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 99.0, -99.0]).unwrap();
        let x = tape.watch(&x).unwrap();
        let pooled = mean_pool_valid(&mut tape, x, 2).unwrap();
        assert_eq!(tape.value(pooled).data(), &[2.0, 3.0]);
    }
}
