//! Deterministic synchronous replica simulator.
//!
//! Each replica computes gradients on its micro-batch against identical
//! parameters; gradients are combined as a weighted mean (weights = the
//! replica loss normalizer counts, so the aggregate equals one pass over the
//! concatenated batch), summed in replica-index order; one optimizer update
//! is applied after the adaptive-clip check on the aggregated norm.

use crate::error::{Error, Result};
use crate::optim::{adam_step, global_grad_norm, AdamState, ClipDecision, GradNormStats};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// One replica's contribution: its (already normalized) loss value, the
/// normalizer weight (token or sentence count), and per-parameter gradients.
pub struct ReplicaGrads {
    pub loss: f64,
    pub weight: f64,
    pub grads: Vec<Option<Tensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    /// Weighted-mean loss across replicas.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Weighted mean of replica gradient sets, in index order.
pub fn aggregate(replicas: &[ReplicaGrads]) -> Result<(f64, Vec<Option<Tensor>>)> {
    if replicas.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total_weight: f64 = replicas.iter().map(|r| r.weight).sum();
    if total_weight <= 0.0 {
        return Err(Error::EmptyBatch);
    }
    let n_params = replicas[0].grads.len();
    let mut combined: Vec<Option<Tensor>> = vec![None; n_params];
    let mut loss = 0.0;
    for r in replicas {
        if r.grads.len() != n_params {
            return Err(Error::shape("aggregate", "replica gradient sets differ in length"));
        }
        let w = r.weight / total_weight;
        loss += w * r.loss;
        for (slot, g) in combined.iter_mut().zip(&r.grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => {
                    for (a, &x) in acc.data.iter_mut().zip(&g.data) {
                        *a += w * x;
                    }
                }
                None => {
                    let mut scaled = g.clone();
                    for x in scaled.data.iter_mut() {
                        *x *= w;
                    }
                    *slot = Some(scaled);
                }
            }
        }
    }
    Ok((loss, combined))
}

/// One synchronous training step over `n ≥ 1` replica gradient sets, each
/// computed against the identical pre-step parameters. The aggregated
/// gradient passes the adaptive-clip check before a single optimizer update;
/// an aborted step touches nothing: not the parameters, not the optimizer
/// moments, not the moving statistics.
pub fn sync_replica_step(
    store: &mut ParamStore,
    opt: &mut AdamState,
    clip: &mut GradNormStats,
    lr: f64,
    weight_decay: f64,
    replicas: &[ReplicaGrads],
) -> Result<StepOutcome> {
    let (loss, grads) = aggregate(replicas)?;
    let grad_norm = global_grad_norm(&grads);
    match clip.check(grad_norm) {
        ClipDecision::Abort => Ok(StepOutcome { applied: false, loss, grad_norm }),
        ClipDecision::Accept => {
            clip.update(grad_norm);
            adam_step(store, &grads, opt, lr, weight_decay)?;
            Ok(StepOutcome { applied: true, loss, grad_norm })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ClipConfig;
    use crate::param::{Init, ParamBuilder, StoreMode};

    fn replica(weight: f64, g: &[f64]) -> ReplicaGrads {
        ReplicaGrads { loss: 1.0, weight, grads: vec![Some(Tensor::vector(g))] }
    }

    #[test]
    fn equal_weights_aggregate_to_mean() {
        let (loss, agg) =
            aggregate(&[replica(1.0, &[1.0, 2.0]), replica(1.0, &[3.0, 4.0])]).unwrap();
        assert_eq!(agg[0].as_ref().unwrap().data, vec![2.0, 3.0]);
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_replica_is_identity() {
        let (_, agg) = aggregate(&[replica(7.0, &[1.5, -2.5])]).unwrap();
        assert_eq!(agg[0].as_ref().unwrap().data, vec![1.5, -2.5]);
    }

    #[test]
    fn token_weighting() {
        // 3 tokens of grad 1.0, 1 token of grad 5.0 → (3·1 + 1·5)/4 = 2
        let (_, agg) = aggregate(&[replica(3.0, &[1.0]), replica(1.0, &[5.0])]).unwrap();
        assert!((agg[0].as_ref().unwrap().data[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn empty_replica_set_rejected() {
        assert!(matches!(aggregate(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn aborted_step_is_side_effect_free() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 0);
        let id = b.param("w", &[2], Init::Const(1.0));
        let mut opt = AdamState::new(&store);
        let mut clip = GradNormStats::warmed(ClipConfig::default(), 0.0, 0.01);

        let before_w = store.value(id).clone();
        let before_opt = opt.snapshot();
        let before_clip = clip.clone();

        let spike = [replica(1.0, &[1e9, 1e9])];
        let out = sync_replica_step(&mut store, &mut opt, &mut clip, 0.1, 0.0, &spike).unwrap();
        assert!(!out.applied);
        assert_eq!(store.value(id).data, before_w.data);
        assert!(opt.bitwise_eq(&before_opt));
        assert!(clip.bitwise_eq(&before_clip));
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new(StoreMode::Alloc);
        let mut b = ParamBuilder::new(&mut store, 0);
        b.param("w", &[1], Init::Const(1.0));
        let mut opt = AdamState::new(&store);
        let mut clip = GradNormStats::new(ClipConfig::default());
        let bad = [replica(1.0, &[f64::NAN])];
        let out = sync_replica_step(&mut store, &mut opt, &mut clip, 0.1, 0.0, &bad).unwrap();
        assert!(!out.applied);
    }

    #[test]
    fn aggregation_is_permutation_invariant_within_tolerance() {
        let rs = [replica(2.0, &[0.1, 0.7]), replica(3.0, &[0.4, -0.2]), replica(5.0, &[-0.3, 0.9])];
        let (_, a) = aggregate(&rs).unwrap();
        let rs_perm = [replica(5.0, &[-0.3, 0.9]), replica(2.0, &[0.1, 0.7]), replica(3.0, &[0.4, -0.2])];
        let (_, b) = aggregate(&rs_perm).unwrap();
        for (x, y) in a[0].as_ref().unwrap().data.iter().zip(&b[0].as_ref().unwrap().data) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
