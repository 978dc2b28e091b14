//! Optimization: Adam with optional L2 weight decay, the two learning-rate
//! schedules, adaptive gradient clipping driven by moving log-norm
//! statistics, label smoothing, and the synchronous replica simulator.

mod clip;
mod replica;
mod schedule;
mod smoothing;

pub use clip::{ClipConfig, ClipDecision, GradNormStats};
pub use replica::{sync_replica_step, ReplicaGrads, StepOutcome};
pub use schedule::{lr_rnmt, lr_transformer, RnmtScheduleConfig, TransformerScheduleConfig};
pub use smoothing::{label_smoothed_ce, smoothed_targets};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam moments and step counter. Frozen parameters never receive moment
/// buffers; entries are created lazily at a parameter's first update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed (accepted) update count; bias correction uses t+1.
    pub step: u64,
    moments: Vec<Option<Moments>>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            step: 0,
            moments: (0..store.len()).map(|_| None).collect(),
        }
    }

    /// Moment buffer L2 norm, for state inspection in tests.
    pub fn moment_norm(&self) -> f64 {
        self.moments
            .iter()
            .flatten()
            .flat_map(|mo| mo.m.iter().chain(&mo.v))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn snapshot(&self) -> AdamState {
        self.clone()
    }

    pub fn bitwise_eq(&self, other: &AdamState) -> bool {
        if self.step != other.step || self.moments.len() != other.moments.len() {
            return false;
        }
        self.moments.iter().zip(&other.moments).all(|(a, b)| match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => {
                x.m.iter().zip(&y.m).all(|(p, q)| p.to_bits() == q.to_bits())
                    && x.v.iter().zip(&y.v).all(|(p, q)| p.to_bits() == q.to_bits())
            }
            _ => false,
        })
    }
}

/// One bias-corrected Adam update over a gradient set. With `weight_decay`
/// positive, `λ·w` joins the gradient before the moment updates. Frozen
/// parameters and absent gradients are skipped.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.moments.len() != store.len() {
        return Err(Error::shape("adam_step", "gradient set does not match parameter store"));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let entry = store.entry(id);
        if entry.frozen {
            continue;
        }
        let Some(grad) = grads[id.index()].as_ref() else { continue };
        if grad.shape != entry.shape {
            return Err(Error::shape(
                "adam_step",
                format!("{}: grad {:?} vs param {:?}", entry.name, grad.shape, entry.shape),
            ));
        }
        let numel = grad.numel();
        let slot = &mut state.moments[id.index()];
        let moments = slot.get_or_insert_with(|| Moments { m: vec![0.0; numel], v: vec![0.0; numel] });
        let mut value = store.value(id).clone();
        for i in 0..numel {
            let g = grad.data[i] + weight_decay * value.data[i];
            moments.m[i] = state.beta1 * moments.m[i] + (1.0 - state.beta1) * g;
            moments.v[i] = state.beta2 * moments.v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            value.data[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
        store.set_value(id, value)?;
    }
    state.step = t;
    Ok(())
}

/// Global L2 norm over a gradient set, in fixed parameter order.
pub fn global_grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Init, ParamBuilder, StoreMode};

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 0);
        let id = b.param("w", &[values.len()], Init::Const(0.0));
        store.set_value(id, Tensor::vector(values)).unwrap();
        (store, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut store, id) = store_with(&[1.0, -2.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(Tensor::vector(&[0.5, -0.25]))];
        adam_step(&mut store, &grads, &mut state, 0.01, 0.0).unwrap();
        let w = store.value(id);
        // m̂ = g, v̂ = g² → Δ = −lr·g/(|g| + ε) ≈ −lr·sign(g)
        assert!((w.data[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-6))).abs() < 1e-12);
        assert!((w.data[1] - (-2.0 + 0.01 * 0.25 / (0.25 + 1e-6))).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_and_zero_decay_is_a_noop_on_values() {
        let (mut store, id) = store_with(&[3.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(Tensor::vector(&[0.0]))];
        adam_step(&mut store, &grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(store.value(id).data, vec![3.0]);
    }

    #[test]
    fn weight_decay_alone_acts_as_gradient() {
        let (mut store, id) = store_with(&[1.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(Tensor::vector(&[0.0]))];
        let lr = 0.01;
        adam_step(&mut store, &grads, &mut state, lr, 1e-5).unwrap();
        // effective gradient 1e-5 → Δ = −lr·1e-5/(1e-5 + ε)
        let want = 1.0 - lr * 1e-5 / (1e-5 + 1e-6);
        assert!((store.value(id).data[0] - want).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut store, id) = store_with(&[1.0]);
        store.set_frozen(id, true);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(Tensor::vector(&[5.0]))];
        adam_step(&mut store, &grads, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(store.value(id).data, vec![1.0]);
        assert_eq!(state.moment_norm(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut store, _) = store_with(&[1.0, 2.0]);
        let mut state = AdamState::new(&store);
        let grads = vec![Some(Tensor::vector(&[1.0]))];
        assert!(adam_step(&mut store, &grads, &mut state, 0.1, 0.0).is_err());
    }

    #[test]
    fn converges_on_one_dimensional_quadratic() {
        // loss = (w − 3)²/2, gradient w − 3
        let (mut store, id) = store_with(&[-4.0]);
        let mut state = AdamState::new(&store);
        for _ in 0..10_000 {
            let w = store.value(id).data[0];
            let grads = vec![Some(Tensor::vector(&[w - 3.0]))];
            adam_step(&mut store, &grads, &mut state, 0.01, 0.0).unwrap();
        }
        assert!((store.value(id).data[0] - 3.0).abs() < 1e-6);
    }
}
