//! Numerical gradient checking by central finite differences.
//!
//! The check never touches the reverse pass: it perturbs one parameter entry
//! at a time and reruns the caller's forward closure, so it is an independent
//! oracle for [`Tape::backward`].

use crate::array::Array;
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

/// Central-difference gradient of `forward` w.r.t. one parameter.
///
/// `forward` must build a fresh tape from the given store and return the
/// scalar loss node; it is invoked twice per parameter entry with the entry
/// shifted by ±h.
pub fn numeric_grad(
    store: &mut ParamStore,
    param: ParamId,
    h: f64,
    mut forward: impl FnMut(&ParamStore) -> (Tape, NodeId),
) -> Array {
    let shape = store.value(param).shape();
    let mut grad = Array::zeros(shape[0], shape[1]);
    for i in 0..shape[0] * shape[1] {
        let orig = store.value(param).data()[i];
        store.value_mut(param).data_mut()[i] = orig + h;
        let (tape_p, loss_p) = forward(store);
        let fp = tape_p.value(loss_p).scalar_value();
        store.value_mut(param).data_mut()[i] = orig - h;
        let (tape_m, loss_m) = forward(store);
        let fm = tape_m.value(loss_m).scalar_value();
        store.value_mut(param).data_mut()[i] = orig;
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so entries near zero do not blow up the ratio.
pub fn max_relative_error(analytic: &Array, numeric: &Array) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-6);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

/// Run backward for the loss built by `forward` and compare every parameter
/// gradient against central finite differences. Returns the worst relative
/// error over all parameters.
pub fn grad_check(
    store: &mut ParamStore,
    h: f64,
    mut forward: impl FnMut(&ParamStore) -> (Tape, NodeId),
) -> f64 {
    store.zero_grad();
    let (mut tape, loss) = forward(store);
    tape.backward(loss, store).expect("backward failed");
    let analytic: Vec<Array> = store.ids().map(|id| store.grad(id).clone()).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (id, a) in ids.into_iter().zip(analytic) {
        let n = numeric_grad(store, id, h, &mut forward);
        worst = worst.max(max_relative_error(&a, &n));
    }
    store.zero_grad();
    worst
}
