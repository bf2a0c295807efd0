//! Composite layers built from tape primitives.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// `x @ w + b` over the last dim; `w` is `[in, out]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_broadcast(y, b),
        None => Ok(y),
    }
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// `q`, `k`, `v` are `[B, n, d]`; heads split `d` evenly and each head uses
/// scale `1/sqrt(d / n_heads)`. Returns `[B, n, d]` with heads re-merged.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    let [b, n, d] = shape[..] else {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("expected [B, n, d], got {:?}", shape),
        });
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(TensorError::Config(format!(
            "model dim {d} not divisible by {n_heads} heads"
        )));
    }
    if tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("q {:?}, k {:?}, v {:?}", shape, tape.shape(k), tape.shape(v)),
        });
    }
    let hd = d / n_heads;
    let split = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[b, n, n_heads, hd])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;
    let qh = tape.scale(qh, 1.0 / (hd as f64).sqrt())?;
    let scores = tape.matmul_t(qh, kh, false, true)?;
    let probs = tape.softmax(scores)?;
    let ctx = tape.matmul(probs, vh)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    tape.reshape(ctx, &[b, n, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn single_token_attends_to_itself() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_f64(vec![1, 1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap());
        let k = tape.constant(Tensor::from_f64(vec![1, 1, 4], &[1.0, 1.0, -1.0, 0.0]).unwrap());
        let v = tape.constant(Tensor::from_f64(vec![1, 1, 4], &[7.0, 8.0, 9.0, 10.0]).unwrap());
        let out = attention(&mut tape, q, k, v, 2).unwrap();
        assert_eq!(tape.value(out).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 6]));
        assert!(matches!(attention(&mut tape, x, x, x, 4), Err(TensorError::Config(_))));
    }
}
