//! Central finite differences for checking tape gradients.

use crate::{ParamId, ParamStore, Scalar, Tensor};

/// Numerical gradient of `f` with respect to parameter `id`.
pub fn numeric_param_grad<T: Scalar>(
    store: &mut ParamStore<T>,
    id: ParamId,
    eps: f64,
    mut f: impl FnMut(&ParamStore<T>) -> f64,
) -> Tensor<T> {
    let (rows, cols) = store.get(id).shape();
    let mut out = Tensor::zeros(rows, cols);
    for k in 0..rows * cols {
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + T::of(eps);
        let plus = f(store);
        store.get_mut(id).data_mut()[k] = orig - T::of(eps);
        let minus = f(store);
        store.get_mut(id).data_mut()[k] = orig;
        out.data_mut()[k] = T::of((plus - minus) / (2.0 * eps));
    }
    out
}

/// Numerical gradient of `f` at the point `x`.
pub fn numeric_grad<T: Scalar>(x: &Tensor<T>, eps: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + T::of(eps);
        let plus = f(&probe);
        probe.data_mut()[k] = orig - T::of(eps);
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = T::of((plus - minus) / (2.0 * eps));
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`; zero when both vanish below `floor`.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().f64().sqrt().max(b.sum_sq().f64().sqrt());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
