use semrec_tape::{softmax_in_place, Scalar, Tape, Tensor};

use super::codebook::sq_dist;
use super::QuantizerModel;
use crate::error::{Error, Result};

/// Trust gate `g = sigmoid(gate_mlp(e_collab))` per row, in `(0, 1)`.
/// With the gate disabled every component is 1.
pub fn compute_trust_gate<T: Scalar>(model: &QuantizerModel<T>, e_collab: &Tensor<T>) -> Result<Tensor<T>> {
    if e_collab.cols() != model.d_collab {
        return Err(Error::dim("collaborative vector", model.d_collab, e_collab.cols()));
    }
    if !model.config.use_acd {
        return Ok(Tensor::full(e_collab.rows(), e_collab.cols(), T::one()));
    }
    let mut tape = Tape::new(&model.params);
    let x = tape.constant(e_collab.clone());
    let logits = model.gate.forward(&mut tape, x);
    let g = tape.sigmoid(logits);
    Ok(tape.value(g).clone())
}

/// `(mean(g) - p)^2 + max(0, delta - Var(g))` with population variance.
pub fn acd_loss<T: Scalar>(g: &[T], p: T, delta: T) -> T {
    if g.is_empty() {
        return T::zero();
    }
    let n = T::of(g.len() as f64);
    let mean = g.iter().copied().sum::<T>() / n;
    let var = g.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean - p) * (mean - p) + (delta - var).max(T::zero())
}

/// Elementwise `g * e_collab`.
pub fn purify<T: Scalar>(g: &Tensor<T>, e_collab: &Tensor<T>) -> Result<Tensor<T>> {
    if g.shape() != e_collab.shape() {
        return Err(Error::dim("gate vs collaborative width", e_collab.cols(), g.cols()));
    }
    Ok(g.zip_map(e_collab, |a, b| a * b))
}

/// `z = Enc(e_cont || purified_collab)` per row.
pub fn encode<T: Scalar>(
    model: &QuantizerModel<T>,
    e_cont: &Tensor<T>,
    purified_collab: &Tensor<T>,
) -> Result<Tensor<T>> {
    if e_cont.cols() != model.d_cont {
        return Err(Error::dim("content vector", model.d_cont, e_cont.cols()));
    }
    if purified_collab.cols() != model.d_collab {
        return Err(Error::dim("collaborative vector", model.d_collab, purified_collab.cols()));
    }
    if e_cont.rows() != purified_collab.rows() {
        return Err(Error::dim("feature rows", e_cont.rows(), purified_collab.rows()));
    }
    let mut tape = Tape::new(&model.params);
    let c = tape.constant(e_cont.clone());
    let e = tape.constant(purified_collab.clone());
    let x = tape.concat_cols(&[c, e]);
    let z = model.encoder.forward(&mut tape, x);
    Ok(tape.value(z).clone())
}

/// Softmax-weighted codebook average around `anchor`:
/// `alpha_k ~ exp(-||anchor - e_k||^2 / tau)`, returns `(alpha, sum_k alpha_k e_k)`.
pub fn soft_prototype<T: Scalar>(codes: &Tensor<T>, anchor: &[T], tau: T) -> Result<(Vec<T>, Vec<T>)> {
    if tau <= T::zero() {
        return Err(Error::InvalidArgument("tau_hsa must be positive".into()));
    }
    if anchor.len() != codes.cols() {
        return Err(Error::dim("anchor", codes.cols(), anchor.len()));
    }
    let mut alpha: Vec<T> = (0..codes.rows()).map(|k| -sq_dist(anchor, codes.row(k)) / tau).collect();
    softmax_in_place(&mut alpha);
    let mut proto = vec![T::zero(); codes.cols()];
    for (k, &a) in alpha.iter().enumerate() {
        for (p, &c) in proto.iter_mut().zip(codes.row(k)) {
            *p = *p + a * c;
        }
    }
    Ok((alpha, proto))
}
