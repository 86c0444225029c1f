use crate::error::{NnError, Result};
use crate::params::ParamStore;

/// Bias-corrected Adam moments for every tensor of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn new(store: &ParamStore) -> Self {
        Self::with_hyper(store, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one Adam update to every trainable parameter holding a gradient.
///
/// The whole step is rejected, leaving parameters and state untouched, if any
/// gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(NnError::InvalidLayer(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    for (id, name, t) in store.iter() {
        if state.first[id.index()].len() != t.len() {
            return Err(NnError::InvalidLayer(format!("optimizer state for `{name}` has the wrong size")));
        }
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGrad(name.to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let tensor = store.get_mut(id);
        if !tensor.trainable() {
            continue;
        }
        let Some(g) = tensor.grad().map(<[f64]>::to_vec) else { continue };
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with_grad(g: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_vec(vec![1.0; g.len()])).unwrap();
        s.get_mut(id).accumulate_grad(g).unwrap();
        s
    }

    #[test]
    fn defaults_match_training_table() {
        let st = AdamState::new(&ParamStore::new());
        assert_eq!((st.lr, st.beta1, st.beta2), (1e-3, 0.9, 0.999));
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = store_with_grad(&[0.0, 0.0]);
        let before = s.get(crate::ParamId(0)).data().to_vec();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).data(), &before[..]);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        for g in [1e-2, 0.3, 5.0, -40.0] {
            let mut s = store_with_grad(&[g; 3]);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &mut st).unwrap();
            for &p in s.get(crate::ParamId(0)).data() {
                let step = (1.0 - p).abs();
                assert!((step - 1e-3).abs() < 1e-3 * 1e-5, "g={g} step={step}");
                assert_eq!((1.0 - p).signum(), g.signum());
            }
        }
    }

    #[test]
    fn nan_rejected_with_name() {
        let mut s = store_with_grad(&[1.0, f64::NAN]);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(s.get(crate::ParamId(0)).data(), before.get(crate::ParamId(0)).data());
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn frozen_untouched() {
        let mut s = store_with_grad(&[1.0, 2.0]);
        s.get_mut(crate::ParamId(0)).set_trainable(false);
        let before = s.clone();
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s, before);
    }
}
