use super::params::ParamStore;
use crate::error::{Error, Result};

/// Moment estimates for the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: ParamStore,
    second: ParamStore,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(params: &ParamStore) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: params.zeros_like(), second: params.zeros_like() }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    params.check_compatible(grads)?;
    params
        .check_compatible(&state.first)
        .map_err(|e| Error::invalid(format!("optimizer state does not match parameters: {e}")))?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked compatible");
        let m = state.first.get_mut(name).expect("checked compatible");
        let v = state.second.get_mut(name).expect("checked compatible");
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine decay from `lr` at step 0 to `lr / 100` at the last of `steps`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    let t = step as f64 / steps.max(2).saturating_sub(1) as f64;
    lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("x", 1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &single("x", 0.0), 0.1).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // At t=1 the corrected moments are g and g², so the step is lr·g/(|g|+ε).
        for g in [0.3, -4.0, 1e-3] {
            let mut p = single("x", 0.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut s, &mut p, &single("x", g), 0.01).unwrap();
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((p.get("x").unwrap().item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_identity_and_steps_are_deterministic() {
        let mut p = single("x", 2.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &single("x", 5.0), 0.0).unwrap();
        assert_eq!(p.get("x").unwrap().item(), 2.0);

        let (mut p1, mut p2) = (single("x", 1.0), single("x", 1.0));
        let (mut s1, mut s2) = (AdamState::new(&p1), AdamState::new(&p2));
        for _ in 0..3 {
            adam_step(&mut s1, &mut p1, &single("x", 0.7), 0.05).unwrap();
            adam_step(&mut s2, &mut p2, &single("x", 0.7), 0.05).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = single("x", 1.0);
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut s, &mut p, &single("y", 1.0), 0.1).is_err());
    }
}
