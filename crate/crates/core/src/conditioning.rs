//! The auxiliary network mapping attribute vectors to per-layer affine
//! offsets, and the attribute-masking protocols used at train and test time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Binary,
    Continuous,
}

/// Per-example auxiliary metadata: a value per attribute dimension plus an
/// observation mask (false = masked out, value already zeroed).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVector {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl AttributeVector {
    pub fn new(values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Stack a batch of attribute vectors into an `[N, D]` tensor.
pub fn attribute_matrix(batch: &[AttributeVector], expected_dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch.len() * expected_dim);
    for a in batch {
        if a.dim() != expected_dim {
            return Err(Error::AttributeDimMismatch {
                got: a.dim(),
                expected: expected_dim,
            });
        }
        data.extend_from_slice(&a.values);
    }
    Tensor::new(&[batch.len(), expected_dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Zero a random subset of attribute dimensions, identically across the
    /// whole evaluation set.
    DimensionZero,
    /// Set the bypass flag on a random subset of samples so no deltas are
    /// added for them.
    DeltaBypass,
}

/// Two-layer perceptron predicting `(delta_gamma, delta_beta)` for every
/// conditioned layer. The final layer starts at zero so a freshly built
/// conditional model is indistinguishable from its plain twin.
#[derive(Debug, Clone)]
pub struct AuxiliaryNet {
    pub attr_dim: usize,
    pub hidden: usize,
    pub layer_channels: Vec<usize>,
    pub shared_trunk: bool,
    /// One `(weight, bias)` trunk when shared, else one per conditioned layer.
    trunks: Vec<(Tensor, Tensor)>,
    /// One `(weight, bias)` head per conditioned layer, width `2 * C_l`.
    heads: Vec<(Tensor, Tensor)>,
}

impl AuxiliaryNet {
    pub fn new(
        attr_dim: usize,
        hidden: usize,
        layer_channels: Vec<usize>,
        shared_trunk: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let he = |fan_in: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Tensor::new(&[rows, cols], data).unwrap().with_grad()
        };
        let n_trunks = if shared_trunk { 1 } else { layer_channels.len() };
        let trunks: Vec<(Tensor, Tensor)> = (0..n_trunks)
            .map(|_| (he(attr_dim, attr_dim, hidden, rng), Tensor::zeros(&[hidden]).with_grad()))
            .collect();
        let heads: Vec<(Tensor, Tensor)> = layer_channels
            .iter()
            .map(|&c| {
                (
                    Tensor::zeros(&[hidden, 2 * c]).with_grad(),
                    Tensor::zeros(&[2 * c]).with_grad(),
                )
            })
            .collect();
        Self {
            attr_dim,
            hidden,
            layer_channels,
            shared_trunk,
            trunks,
            heads,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunks
            .iter()
            .chain(self.heads.iter())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, (w, b)) in self.trunks.iter().enumerate() {
            f(format!("aux.trunk{}.weight", i), w);
            f(format!("aux.trunk{}.bias", i), b);
        }
        for (i, (w, b)) in self.heads.iter().enumerate() {
            f(format!("aux.head{}.weight", i), w);
            f(format!("aux.head{}.bias", i), b);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, (w, b)) in self.trunks.iter_mut().enumerate() {
            f(format!("aux.trunk{}.weight", i), w);
            f(format!("aux.trunk{}.bias", i), b);
        }
        for (i, (w, b)) in self.heads.iter_mut().enumerate() {
            f(format!("aux.head{}.weight", i), w);
            f(format!("aux.head{}.bias", i), b);
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAux {
        BoundAux {
            trunks: self
                .trunks
                .iter()
                .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(w, b)| (tape.param(w.clone()), tape.param(b.clone())))
                .collect(),
        }
    }

    /// Consume `(weight, bias)` id pairs for each trunk from a cursor.
    pub fn trunk_count_ids(&self, next: &mut dyn FnMut() -> TensorId) -> Vec<(TensorId, TensorId)> {
        (0..self.trunks.len()).map(|_| (next(), next())).collect()
    }

    /// Consume `(weight, bias)` id pairs for each head from a cursor.
    pub fn head_count_ids(&self, next: &mut dyn FnMut() -> TensorId) -> Vec<(TensorId, TensorId)> {
        (0..self.heads.len()).map(|_| (next(), next())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundAux {
    pub trunks: Vec<(TensorId, TensorId)>,
    pub heads: Vec<(TensorId, TensorId)>,
}

/// Per-layer delta tensors for one batch.
#[derive(Debug, Clone)]
pub struct LayerDeltas {
    pub delta_gamma: TensorId,
    pub delta_beta: TensorId,
}

/// Run the auxiliary network on a batch of attribute vectors. Returns one
/// `(delta_gamma, delta_beta)` pair of `[N, C_l]` tensors per conditioned
/// layer, differentiable end to end.
pub fn predict_deltas(
    tape: &mut Tape,
    net: &AuxiliaryNet,
    bound: &BoundAux,
    attrs: &[AttributeVector],
) -> Result<Vec<LayerDeltas>> {
    let a = attribute_matrix(attrs, net.attr_dim)?;
    let ai = tape.leaf(a);
    let shared_hidden = if net.shared_trunk {
        let (w, b) = bound.trunks[0];
        let lin = tape.dense(ai, w, b)?;
        Some(tape.relu(lin)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(net.layer_channels.len());
    for (l, &c) in net.layer_channels.iter().enumerate() {
        let hidden = match shared_hidden {
            Some(h) => h,
            None => {
                let (w, b) = bound.trunks[l];
                let lin = tape.dense(ai, w, b)?;
                tape.relu(lin)?
            }
        };
        let (hw, hb) = bound.heads[l];
        let raw = tape.dense(hidden, hw, hb)?;
        out.push(LayerDeltas {
            delta_gamma: tape.slice_cols(raw, 0, c)?,
            delta_beta: tape.slice_cols(raw, c, c)?,
        });
    }
    Ok(out)
}

/// Number of items selected by a mask fraction: floor(fraction * total),
/// computed with a nudge so exact products like 0.6 * 5 do not round down.
fn mask_count(fraction: f64, total: usize) -> usize {
    (((fraction * total as f64) + 1e-9).floor() as usize).min(total)
}

/// Apply one of the masking protocols to an attribute batch.
///
/// Returns the (possibly rewritten) batch and one bypass flag per sample.
/// `dimension_zero` zeroes the same random dimension subset in every sample;
/// `delta_bypass` leaves values alone and flags a random sample subset.
pub fn mask_attributes(
    batch: &[AttributeVector],
    fraction: f64,
    mode: MaskMode,
    rng_seed: u64,
) -> Result<(Vec<AttributeVector>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::InvalidFraction(fraction));
    }
    let n = batch.len();
    let mut out = batch.to_vec();
    let mut bypass = vec![false; n];
    if n == 0 {
        return Ok((out, bypass));
    }
    let mut r = rng::stream(rng_seed, rng::salt::EVAL_MASK);
    match mode {
        MaskMode::DimensionZero => {
            let d = batch[0].dim();
            let count = mask_count(fraction, d);
            let dims = rand::seq::index::sample(&mut r, d, count);
            for a in &mut out {
                for di in dims.iter() {
                    a.values[di] = 0.0;
                    a.mask[di] = false;
                }
            }
        }
        MaskMode::DeltaBypass => {
            let count = mask_count(fraction, n);
            for i in rand::seq::index::sample(&mut r, n, count) {
                bypass[i] = true;
            }
        }
    }
    Ok((out, bypass))
}

/// Per-sample Bernoulli masking used during training: each sample is
/// independently bypassed with probability `fraction`.
pub fn bernoulli_bypass(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::InvalidFraction(fraction));
    }
    Ok((0..n).map(|_| rng.gen::<f64>() < fraction).collect())
}

/// Threshold continuous attribute values into {0, 1}; strictly-greater wins.
pub fn binarize_attributes(
    a: &AttributeVector,
    kind: AttributeKind,
    threshold: f64,
) -> Result<AttributeVector> {
    if kind != AttributeKind::Continuous {
        return Err(Error::NotContinuous);
    }
    Ok(AttributeVector {
        values: a.values.iter().map(|&v| if v > threshold { 1.0 } else { 0.0 }).collect(),
        mask: a.mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_net() -> AuxiliaryNet {
        let mut r = rng::stream(1, rng::salt::AUX_INIT);
        AuxiliaryNet::new(4, 8, vec![2, 3], true, &mut r)
    }

    fn run_deltas(net: &AuxiliaryNet, attrs: &[AttributeVector]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        let deltas = predict_deltas(&mut tape, net, &bound, attrs).unwrap();
        deltas
            .iter()
            .map(|d| {
                (
                    tape.value(d.delta_gamma).data().to_vec(),
                    tape.value(d.delta_beta).data().to_vec(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_initialized_head_produces_zero_deltas() {
        let net = tiny_net();
        let attrs = vec![
            AttributeVector::new(vec![1.0, 0.0, 1.0, 1.0]),
            AttributeVector::new(vec![0.3, 0.9, 0.1, 0.7]),
        ];
        for (dg, db) in run_deltas(&net, &attrs) {
            assert!(dg.iter().all(|&v| v == 0.0));
            assert!(db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_attributes_with_zero_biases_give_zero_deltas() {
        let net = tiny_net();
        let attrs = vec![AttributeVector::new(vec![0.0; 4])];
        for (dg, db) in run_deltas(&net, &attrs) {
            assert!(dg.iter().all(|&v| v == 0.0));
            assert!(db.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn hand_set_weights_match_hand_computed_forward() {
        // D=2, hidden=2, one conditioned layer with C=1.
        let mut net = AuxiliaryNet::new(2, 2, vec![1], true, &mut rng::stream(0, 0));
        net.trunks[0].0 = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 1.5]).unwrap().with_grad();
        net.trunks[0].1 = Tensor::new(&[2], vec![0.1, -0.2]).unwrap().with_grad();
        net.heads[0].0 = Tensor::new(&[2, 2], vec![2.0, -1.0, 1.0, 3.0]).unwrap().with_grad();
        net.heads[0].1 = Tensor::new(&[2], vec![0.5, 0.25]).unwrap().with_grad();

        let a = [0.6, 0.4];
        // hidden = relu(a . W + b):
        //   h0 = relu(0.6*1.0 + 0.4*0.5 + 0.1)  = 0.9
        //   h1 = relu(0.6*-2.0 + 0.4*1.5 - 0.2) = relu(-0.8) = 0
        // head = h . V + c:
        //   out0 = 0.9*2.0 + 0*1.0 + 0.5  = 2.3   (delta_gamma)
        //   out1 = 0.9*-1.0 + 0*3.0 + 0.25 = -0.65 (delta_beta)
        let attrs = vec![AttributeVector::new(a.to_vec())];
        let out = run_deltas(&net, &attrs);
        assert!((out[0].0[0] - 2.3).abs() < 1e-12);
        assert!((out[0].1[0] - -0.65).abs() < 1e-12);
    }

    #[test]
    fn attribute_dim_mismatch_is_rejected() {
        let net = tiny_net();
        let attrs = vec![AttributeVector::new(vec![0.0; 3])];
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape);
        assert!(matches!(
            predict_deltas(&mut tape, &net, &bound, &attrs),
            Err(Error::AttributeDimMismatch { got: 3, expected: 4 })
        ));
    }

    #[test]
    fn fraction_zero_changes_nothing() {
        let batch = vec![AttributeVector::new(vec![0.5; 6]); 4];
        for mode in [MaskMode::DimensionZero, MaskMode::DeltaBypass] {
            let (out, bypass) = mask_attributes(&batch, 0.0, mode, 1).unwrap();
            assert_eq!(out, batch);
            assert!(bypass.iter().all(|b| !b));
        }
    }

    #[test]
    fn full_delta_bypass_flags_every_sample() {
        let batch = vec![AttributeVector::new(vec![1.0; 3]); 5];
        let (out, bypass) = mask_attributes(&batch, 1.0, MaskMode::DeltaBypass, 2).unwrap();
        assert_eq!(out, batch);
        assert!(bypass.iter().all(|b| *b));
    }

    #[test]
    fn half_fraction_zeroes_exactly_half_the_dimensions_repeatably() {
        let batch = vec![AttributeVector::new(vec![1.0; 10]); 3];
        let (a, _) = mask_attributes(&batch, 0.5, MaskMode::DimensionZero, 7).unwrap();
        let zeroed: Vec<usize> = (0..10).filter(|&d| !a[0].mask[d]).collect();
        assert_eq!(zeroed.len(), 5);
        for s in &a {
            for &d in &zeroed {
                assert_eq!(s.values[d], 0.0);
                assert!(!s.mask[d]);
            }
        }
        let (b, _) = mask_attributes(&batch, 0.5, MaskMode::DimensionZero, 7).unwrap();
        assert_eq!(a, b);
        // a different seed picks a different subset (with overwhelming odds)
        let (c, _) = mask_attributes(&batch, 0.5, MaskMode::DimensionZero, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let batch = vec![AttributeVector::new(vec![1.0; 2])];
        assert!(matches!(
            mask_attributes(&batch, 1.5, MaskMode::DeltaBypass, 0),
            Err(Error::InvalidFraction(_))
        ));
        assert!(matches!(
            mask_attributes(&batch, -0.1, MaskMode::DimensionZero, 0),
            Err(Error::InvalidFraction(_))
        ));
    }

    #[test]
    fn binarize_uses_strict_inequality_at_the_threshold() {
        let a = AttributeVector::new(vec![0.5, 0.5, 0.5]);
        let b = binarize_attributes(&a, AttributeKind::Continuous, 0.5).unwrap();
        assert_eq!(b.values, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn binarize_thresholds_mixed_values() {
        let a = AttributeVector::new(vec![0.2, 0.7, 0.5001]);
        let b = binarize_attributes(&a, AttributeKind::Continuous, 0.5).unwrap();
        assert_eq!(b.values, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn binarize_rejects_binary_input() {
        let a = AttributeVector::new(vec![0.0, 1.0]);
        assert!(matches!(
            binarize_attributes(&a, AttributeKind::Binary, 0.5),
            Err(Error::NotContinuous)
        ));
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(values in proptest::collection::vec(0.0f64..=1.0, 1..32)) {
            let a = AttributeVector::new(values);
            let once = binarize_attributes(&a, AttributeKind::Continuous, 0.5).unwrap();
            let twice = binarize_attributes(&once, AttributeKind::Continuous, 0.5).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn bernoulli_bypass_rate_tracks_fraction(fraction in 0.0f64..=1.0, seed in 0u64..1000) {
            let mut r = rng::stream(seed, rng::salt::TRAIN_MASK);
            let flags = bernoulli_bypass(2000, fraction, &mut r).unwrap();
            let rate = flags.iter().filter(|b| **b).count() as f64 / 2000.0;
            prop_assert!((rate - fraction).abs() < 0.05);
        }
    }
}
