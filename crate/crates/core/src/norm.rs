//! Batch normalization and its conditionally-modulated variant.
//!
//! Both share one kernel: the conditional path adds per-sample offsets to the
//! learned affine parameters unless a sample's bypass flag is set, in which
//! case that sample is normalized exactly like the plain layer.

use crate::error::{Error, Result};
use crate::tape::{BatchStats, NormMode, Tape, TensorId};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learned state of one normalization layer.
#[derive(Debug, Clone)]
pub struct NormLayerState {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NormLayerState {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::filled(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Put gamma/beta on a tape as grad-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundNorm {
        BoundNorm {
            gamma: tape.param(self.gamma.clone()),
            beta: tape.param(self.beta.clone()),
        }
    }
}

/// Tape handles for one layer's affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Per-sample affine offsets for one conditioned layer, plus the flags that
/// suppress their addition.
#[derive(Debug, Clone)]
pub struct CondDeltas {
    /// `[N, C]` offset added to gamma for non-bypassed samples.
    pub delta_gamma: TensorId,
    /// `[N, C]` offset added to beta for non-bypassed samples.
    pub delta_beta: TensorId,
    /// One flag per sample; `true` means use plain gamma/beta.
    pub bypass: Vec<bool>,
}

/// Plain batch normalization. Train mode normalizes with minibatch statistics
/// and folds them into the running estimates; eval mode uses the running
/// estimates and leaves the state untouched.
pub fn bn_forward(
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundNorm,
    state: &mut NormLayerState,
    mode: NormMode,
) -> Result<TensorId> {
    let (out, stats) = tape.batch_norm(
        x,
        bound.gamma,
        bound.beta,
        None,
        &state.running_mean,
        &state.running_var,
        state.epsilon,
        mode,
    )?;
    if let Some(stats) = stats {
        update_running_stats(state, &stats.mean, &stats.var)?;
    }
    Ok(out)
}

/// Conditional batch normalization: per-sample effective affine parameters
/// `gamma + delta_gamma`, `beta + delta_beta`, except for bypassed samples.
pub fn cbn_forward(
    tape: &mut Tape,
    x: TensorId,
    bound: &BoundNorm,
    state: &mut NormLayerState,
    deltas: &CondDeltas,
    mode: NormMode,
) -> Result<TensorId> {
    let (out, stats) = tape.batch_norm(
        x,
        bound.gamma,
        bound.beta,
        Some((deltas.delta_gamma, deltas.delta_beta, &deltas.bypass)),
        &state.running_mean,
        &state.running_var,
        state.epsilon,
        mode,
    )?;
    if let Some(stats) = stats {
        update_running_stats(state, &stats.mean, &stats.var)?;
    }
    Ok(out)
}

/// Exponential moving average of the minibatch statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats(state: &mut NormLayerState, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
    if let Some(&bad) = batch_var.iter().find(|v| **v < 0.0) {
        return Err(Error::NegativeVariance { value: bad });
    }
    let m = state.momentum;
    for (r, b) in state.running_mean.iter_mut().zip(batch_mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, b) in state.running_var.iter_mut().zip(batch_var) {
        *r = (1.0 - m) * *r + m * b;
    }
    Ok(())
}

/// Convenience wrapper used by tests and the gradient suite: run one BN or
/// CBN layer on raw tensors without a surrounding model.
#[allow(clippy::too_many_arguments)]
pub fn norm_once(
    x: Tensor,
    state: &mut NormLayerState,
    deltas: Option<(Tensor, Tensor, Vec<bool>)>,
    mode: NormMode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let mut tape = Tape::new();
    let xi = tape.leaf(x);
    let bound = state.bind(&mut tape);
    let d = match deltas {
        Some((dg, db, bypass)) => Some((tape.leaf(dg), tape.leaf(db), bypass)),
        None => None,
    };
    let (out, stats) = tape.batch_norm(
        xi,
        bound.gamma,
        bound.beta,
        d.as_ref().map(|(a, b, c)| (*a, *b, c.as_slice())),
        &state.running_mean,
        &state.running_var,
        state.epsilon,
        mode,
    )?;
    if let Some(ref s) = stats {
        update_running_stats(state, &s.mean, &s.var)?;
    }
    Ok((tape.value(out).clone(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_beta() {
        let mut state = NormLayerState::new(1);
        state.beta.data_mut()[0] = 0.75;
        let x = Tensor::filled(&[3, 1, 2, 2], 42.0);
        let (out, _) = norm_once(x, &mut state, None, NormMode::Train).unwrap();
        for &v in out.data() {
            assert!((v - 0.75).abs() < 1e-9, "expected beta, got {}", v);
        }
    }

    #[test]
    fn train_mode_matches_hand_computed_statistics() {
        // 8 values in one channel; mean/var computed by hand in the test.
        let x = rand_tensor(&[2, 1, 2, 2], 3);
        let vals = x.data().to_vec();
        let mean: f64 = vals.iter().sum::<f64>() / 8.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;

        let mut state = NormLayerState::new(1);
        let (out, stats) = norm_once(x, &mut state, None, NormMode::Train).unwrap();
        let stats = stats.unwrap();
        assert!((stats.mean[0] - mean).abs() < 1e-12);
        assert!((stats.var[0] - var).abs() < 1e-12);

        let out_mean: f64 = out.data().iter().sum::<f64>() / 8.0;
        assert!(out_mean.abs() < 1e-9);
        let out_var: f64 = out.data().iter().map(|v| (v - out_mean) * (v - out_mean)).sum::<f64>() / 8.0;
        let expected_var = var / (var + state.epsilon);
        assert!((out_var - expected_var).abs() < 1e-6);
    }

    #[test]
    fn eval_mode_with_identity_statistics_scales_by_inv_sqrt_one_plus_eps() {
        let mut state = NormLayerState::new(2);
        let x = rand_tensor(&[3, 2, 2, 2], 4);
        let expect: Vec<f64> = x.data().iter().map(|v| v / (1.0 + state.epsilon).sqrt()).collect();
        let (out, stats) = norm_once(x, &mut state, None, NormMode::Eval).unwrap();
        assert!(stats.is_none());
        for (o, e) in out.data().iter().zip(&expect) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_mode_mutates_no_state() {
        let mut state = NormLayerState::new(2);
        state.running_mean = vec![0.3, -0.1];
        state.running_var = vec![1.7, 0.4];
        let before = state.clone();
        let x = rand_tensor(&[4, 2, 3, 3], 5);
        norm_once(x, &mut state, None, NormMode::Eval).unwrap();
        assert_eq!(state.running_mean, before.running_mean);
        assert_eq!(state.running_var, before.running_var);
        assert_eq!(state.gamma.data(), before.gamma.data());
        assert_eq!(state.beta.data(), before.beta.data());
    }

    #[test]
    fn train_mode_requires_at_least_two_elements_per_channel() {
        let mut state = NormLayerState::new(3);
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(
            norm_once(x, &mut state, None, NormMode::Train),
            Err(Error::BatchTooSmall { elements: 1 })
        ));
    }

    #[test]
    fn all_bypassed_cbn_is_bit_equal_to_bn() {
        for seed in 0..50 {
            let x = rand_tensor(&[4, 3, 2, 2], 100 + seed);
            let mut state_a = NormLayerState::new(3);
            let mut state_b = state_a.clone();
            state_a.gamma = rand_tensor(&[3], 200 + seed).with_grad();
            state_a.beta = rand_tensor(&[3], 300 + seed).with_grad();
            state_b.gamma = state_a.gamma.clone();
            state_b.beta = state_a.beta.clone();

            let deltas = (
                rand_tensor(&[4, 3], 400 + seed),
                rand_tensor(&[4, 3], 500 + seed),
                vec![true; 4],
            );
            let (bn, _) = norm_once(x.clone(), &mut state_a, None, NormMode::Train).unwrap();
            let (cbn, _) = norm_once(x, &mut state_b, Some(deltas), NormMode::Train).unwrap();
            let bn_bits: Vec<u64> = bn.data().iter().map(|v| v.to_bits()).collect();
            let cbn_bits: Vec<u64> = cbn.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bn_bits, cbn_bits);
            assert_eq!(state_a.running_mean, state_b.running_mean);
            assert_eq!(state_a.running_var, state_b.running_var);
        }
    }

    #[test]
    fn zero_deltas_match_bn_within_tolerance() {
        let x = rand_tensor(&[2, 2, 3, 3], 7);
        let mut state_a = NormLayerState::new(2);
        let mut state_b = NormLayerState::new(2);
        let deltas = (Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), vec![false; 2]);
        let (bn, _) = norm_once(x.clone(), &mut state_a, None, NormMode::Train).unwrap();
        let (cbn, _) = norm_once(x, &mut state_b, Some(deltas), NormMode::Train).unwrap();
        for (a, b) in bn.data().iter().zip(cbn.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_delta_beta_shifts_one_channel_exactly() {
        let x = rand_tensor(&[2, 3, 2, 2], 8);
        let mut state_a = NormLayerState::new(3);
        let mut state_b = NormLayerState::new(3);
        let mut db = Tensor::zeros(&[2, 3]);
        for n in 0..2 {
            db.data_mut()[n * 3 + 1] = 1.0; // channel 1 shifted for every sample
        }
        let deltas = (Tensor::zeros(&[2, 3]), db, vec![false; 2]);
        let (bn, _) = norm_once(x.clone(), &mut state_a, None, NormMode::Train).unwrap();
        let (cbn, _) = norm_once(x, &mut state_b, Some(deltas), NormMode::Train).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for s in 0..4 {
                    let i = (n * 3 + c) * 4 + s;
                    let expect = if c == 1 { bn.data()[i] + 1.0 } else { bn.data()[i] };
                    assert_eq!(cbn.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn per_feature_normalization_handles_dense_activations() {
        let x = rand_tensor(&[6, 4], 9);
        let mut state = NormLayerState::new(4);
        let (out, _) = norm_once(x, &mut state, None, NormMode::Train).unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..6).map(|n| out.data()[n * 4 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn momentum_one_replaces_running_stats() {
        let mut state = NormLayerState::new(2);
        state.momentum = 1.0;
        update_running_stats(&mut state, &[3.0, -1.0], &[2.0, 0.5]).unwrap();
        assert_eq!(state.running_mean, vec![3.0, -1.0]);
        assert_eq!(state.running_var, vec![2.0, 0.5]);
    }

    #[test]
    fn momentum_zero_keeps_running_stats() {
        let mut state = NormLayerState::new(1);
        state.momentum = 0.0;
        update_running_stats(&mut state, &[9.0], &[9.0]).unwrap();
        assert_eq!(state.running_mean, vec![0.0]);
        assert_eq!(state.running_var, vec![1.0]);
    }

    #[test]
    fn two_updates_match_hand_unrolled_ema() {
        let mut state = NormLayerState::new(1);
        state.momentum = 0.1;
        update_running_stats(&mut state, &[2.0], &[4.0]).unwrap();
        update_running_stats(&mut state, &[-1.0], &[0.5]).unwrap();
        // mean: 0 -> 0.9*0 + 0.1*2 = 0.2 -> 0.9*0.2 + 0.1*(-1) = 0.08
        // var:  1 -> 0.9*1 + 0.1*4 = 1.3 -> 0.9*1.3 + 0.1*0.5 = 1.22
        assert!((state.running_mean[0] - 0.08).abs() < 1e-15);
        assert!((state.running_var[0] - 1.22).abs() < 1e-15);
    }

    #[test]
    fn negative_batch_variance_is_rejected() {
        let mut state = NormLayerState::new(1);
        assert!(matches!(
            update_running_stats(&mut state, &[0.0], &[-0.1]),
            Err(Error::NegativeVariance { .. })
        ));
    }
}
