use super::params::{Gradients, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Bias-corrected Adam accumulators, one pair of moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Self::with_hyper(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(store: &ParamStore<F>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![F::zero(); t.len()]).collect();
        AdamState {
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One Adam update. Gradients missing for a parameter count as zero.
///
/// Rejects non-finite gradients before touching anything, so a failed call
/// leaves both `store` and `state` unchanged. `lr = 0` is accepted and leaves
/// parameters bit-identical.
pub fn adam_step<F: Real>(
    store: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("adam_step gradients"));
    }
    if state.first_moment.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match parameter set"));
    }
    for (id, g) in grads.iter() {
        if let Some(g) = g {
            if g.len() != store.get(id).len() || state.first_moment[id.index()].len() != g.len() {
                return Err(Error::invalid(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    store.name(id),
                    g.len(),
                    store.get(id).len()
                )));
            }
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let f = F::from_f64_lossy;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let zeros;
        let g: &[F] = match grads.get(id) {
            Some(g) => g,
            None => {
                zeros = vec![F::zero(); store.get(id).len()];
                &zeros
            }
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let data = store.get_mut(id).data_mut();
        for k in 0..data.len() {
            m[k] = f(b1) * m[k] + f(1.0 - b1) * g[k];
            v[k] = f(b2) * v[k] + f(1.0 - b2) * g[k] * g[k];
            let m_hat = m[k] / f(bc1);
            let v_hat = v[k] / f(bc2);
            data[k] = data[k] - f(lr) * m_hat / (v_hat.sqrt() + f(state.epsilon));
        }
    }
    Ok(())
}
