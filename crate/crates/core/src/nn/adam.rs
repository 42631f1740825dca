use super::{ParamKind, ParamStore, Tensor};

/// Adam moments for every parameter of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update of every trainable parameter using the
/// gradients accumulated in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) {
    assert_eq!(state.m.len(), store.len(), "optimizer state does not match the parameter store");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        assert_eq!(m.len(), p.value.numel(), "moment shape mismatch for {}", p.name);
        let grad = p.grad.data();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
