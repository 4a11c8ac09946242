//! Micro residual CNN with plain or conditional normalization, plus Grad-CAM
//! saliency over its last convolutional feature map.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{predict_deltas, AttributeVector, AuxiliaryNet, BoundAux};
use crate::error::{Error, Result};
use crate::norm::{bn_forward, cbn_forward, BoundNorm, CondDeltas, NormLayerState};
use crate::rng::{self, salt};
use crate::tape::{NormMode, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Bn,
    Cbn,
}

/// Backbone sizing. The defaults are the desk-scale model used throughout:
/// a 3x3 stem into two residual stages, global average pooling, and a linear
/// classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_channels: usize,
    pub num_classes: usize,
    pub attr_dim: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub aux_hidden: usize,
    pub aux_shared_trunk: bool,
    /// One flag per norm layer; `None` conditions every layer.
    pub conditioned_layers: Option<Vec<bool>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            // zero means: take the class and attribute counts from the dataset
            num_classes: 0,
            attr_dim: 0,
            stem_channels: 16,
            stage_channels: vec![16, 32],
            aux_hidden: 64,
            aux_shared_trunk: true,
            conditioned_layers: None,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Tensor, // [F, C, kh, kw]
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvLayer,
    norm1: NormLayerState,
    conv2: ConvLayer,
    norm2: NormLayerState,
    /// 1x1 strided projection when the skip path changes shape.
    proj: Option<(ConvLayer, NormLayerState)>,
}

#[derive(Debug, Clone)]
pub struct MicroResNet {
    pub cfg: BackboneConfig,
    pub norm_kind: NormKind,
    stem: ConvLayer,
    stem_norm: NormLayerState,
    blocks: Vec<ResidualBlock>,
    head_weight: Tensor,
    head_bias: Tensor,
    pub aux: Option<AuxiliaryNet>,
    /// Per-norm-layer conditioning flags (all false for the plain variant).
    conditioned: Vec<bool>,
}

/// Attribute input to a forward pass.
pub enum AttrInput<'a> {
    /// Plain variant, or explicit absence.
    None,
    /// Conditional variant with per-sample bypass flags (empty = none set).
    Attrs {
        batch: &'a [AttributeVector],
        bypass: Vec<bool>,
    },
    /// Conditional variant evaluated with every delta suppressed; no
    /// attributes needed. Arithmetically identical to the plain layer.
    FullBypass,
}

pub struct ForwardOutput {
    pub logits: TensorId,
    /// Post-activation feature map feeding global average pooling; the
    /// Grad-CAM tap point.
    pub last_feature: TensorId,
}

/// Tape handles for every parameter, in canonical walk order.
pub struct ModelBinding {
    stem: TensorId,
    stem_norm: BoundNorm,
    blocks: Vec<BlockBinding>,
    head_weight: TensorId,
    head_bias: TensorId,
    aux: Option<BoundAux>,
}

struct BlockBinding {
    conv1: TensorId,
    norm1: BoundNorm,
    conv2: TensorId,
    norm2: BoundNorm,
    proj: Option<(TensorId, BoundNorm)>,
}

impl ModelBinding {
    /// Parameter ids in canonical walk order; index-aligned with
    /// `for_each_param`.
    pub fn flat_ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.stem, self.stem_norm.gamma, self.stem_norm.beta];
        for b in &self.blocks {
            out.extend([b.conv1, b.norm1.gamma, b.norm1.beta, b.conv2, b.norm2.gamma, b.norm2.beta]);
            if let Some((conv, norm)) = &b.proj {
                out.extend([*conv, norm.gamma, norm.beta]);
            }
        }
        out.extend([self.head_weight, self.head_bias]);
        if let Some(aux) = &self.aux {
            for (w, b) in &aux.trunks {
                out.extend([*w, *b]);
            }
            for (w, b) in &aux.heads {
                out.extend([*w, *b]);
            }
        }
        out
    }
}

fn he_conv(f: usize, c: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = c * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let data: Vec<f64> = (0..f * c * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::new(&[f, c, k, k], data).unwrap().with_grad()
}

fn he_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).unwrap();
    let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(&[rows, cols], data).unwrap().with_grad()
}

/// Deterministically construct a model from a seed. The plain and conditional
/// variants draw backbone weights from the same stream, so they are twins:
/// identical everywhere except the conditioning wiring.
pub fn build_model(cfg: &BackboneConfig, norm_kind: NormKind, seed: u64) -> Result<MicroResNet> {
    if cfg.num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.stem_channels == 0 || cfg.image_channels == 0 {
        return Err(Error::InvalidConfig("zero channel count".into()));
    }
    if norm_kind == NormKind::Cbn && cfg.attr_dim == 0 {
        return Err(Error::InvalidConfig("conditional variant needs attr_dim > 0".into()));
    }

    let mut backbone_rng = rng::stream(seed, salt::BACKBONE_INIT);
    let stem = ConvLayer {
        weight: he_conv(cfg.stem_channels, cfg.image_channels, 3, &mut backbone_rng),
        stride: 1,
        padding: 1,
    };
    let stem_norm = NormLayerState::new(cfg.stem_channels);

    let mut blocks = Vec::new();
    let mut in_ch = cfg.stem_channels;
    for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let conv1 = ConvLayer {
            weight: he_conv(out_ch, in_ch, 3, &mut backbone_rng),
            stride,
            padding: 1,
        };
        let conv2 = ConvLayer {
            weight: he_conv(out_ch, out_ch, 3, &mut backbone_rng),
            stride: 1,
            padding: 1,
        };
        let proj = if stride != 1 || in_ch != out_ch {
            Some((
                ConvLayer {
                    weight: he_conv(out_ch, in_ch, 1, &mut backbone_rng),
                    stride,
                    padding: 0,
                },
                NormLayerState::new(out_ch),
            ))
        } else {
            None
        };
        blocks.push(ResidualBlock {
            conv1,
            norm1: NormLayerState::new(out_ch),
            conv2,
            norm2: NormLayerState::new(out_ch),
            proj,
        });
        in_ch = out_ch;
    }

    let head_weight = he_dense(in_ch, cfg.num_classes, &mut backbone_rng);
    let head_bias = Tensor::zeros(&[cfg.num_classes]).with_grad();

    let norm_channels = norm_channel_walk(cfg);
    let conditioned = match (norm_kind, &cfg.conditioned_layers) {
        (NormKind::Bn, _) => vec![false; norm_channels.len()],
        (NormKind::Cbn, None) => vec![true; norm_channels.len()],
        (NormKind::Cbn, Some(flags)) => {
            if flags.len() != norm_channels.len() {
                return Err(Error::InvalidConfig(format!(
                    "{} conditioning flags for {} norm layers",
                    flags.len(),
                    norm_channels.len()
                )));
            }
            flags.clone()
        }
    };

    let aux = if norm_kind == NormKind::Cbn {
        let cond_channels: Vec<usize> = norm_channels
            .iter()
            .zip(&conditioned)
            .filter(|(_, on)| **on)
            .map(|(c, _)| *c)
            .collect();
        if cond_channels.is_empty() {
            return Err(Error::InvalidConfig("conditional variant with no conditioned layers".into()));
        }
        let mut aux_rng = rng::stream(seed, salt::AUX_INIT);
        Some(AuxiliaryNet::new(
            cfg.attr_dim,
            cfg.aux_hidden,
            cond_channels,
            cfg.aux_shared_trunk,
            &mut aux_rng,
        ))
    } else {
        None
    };

    Ok(MicroResNet {
        cfg: cfg.clone(),
        norm_kind,
        stem,
        stem_norm,
        blocks,
        head_weight,
        head_bias,
        aux,
        conditioned,
    })
}

/// Channel count of each norm layer in canonical walk order.
fn norm_channel_walk(cfg: &BackboneConfig) -> Vec<usize> {
    let mut out = vec![cfg.stem_channels];
    let mut in_ch = cfg.stem_channels;
    for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        out.push(out_ch); // norm1
        out.push(out_ch); // norm2
        if stride != 1 || in_ch != out_ch {
            out.push(out_ch); // projection norm
        }
        in_ch = out_ch;
    }
    out
}

impl MicroResNet {
    /// Channel counts of the conditioned layers, in forward order.
    pub fn conditioned_channels(&self) -> Vec<usize> {
        norm_channel_walk(&self.cfg)
            .iter()
            .zip(&self.conditioned)
            .filter(|(_, on)| **on)
            .map(|(c, _)| *c)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.len());
        n
    }

    /// Visit every parameter in canonical walk order. `bind` and the
    /// optimizer both rely on this order; keep the three walks in sync.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("stem.conv.weight".into(), &self.stem.weight);
        f("stem.norm.gamma".into(), &self.stem_norm.gamma);
        f("stem.norm.beta".into(), &self.stem_norm.beta);
        for (i, b) in self.blocks.iter().enumerate() {
            f(format!("block{}.conv1.weight", i), &b.conv1.weight);
            f(format!("block{}.norm1.gamma", i), &b.norm1.gamma);
            f(format!("block{}.norm1.beta", i), &b.norm1.beta);
            f(format!("block{}.conv2.weight", i), &b.conv2.weight);
            f(format!("block{}.norm2.gamma", i), &b.norm2.gamma);
            f(format!("block{}.norm2.beta", i), &b.norm2.beta);
            if let Some((conv, norm)) = &b.proj {
                f(format!("block{}.proj.weight", i), &conv.weight);
                f(format!("block{}.proj_norm.gamma", i), &norm.gamma);
                f(format!("block{}.proj_norm.beta", i), &norm.beta);
            }
        }
        f("head.weight".into(), &self.head_weight);
        f("head.bias".into(), &self.head_bias);
        if let Some(aux) = &self.aux {
            aux.for_each_param(f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("stem.conv.weight".into(), &mut self.stem.weight);
        f("stem.norm.gamma".into(), &mut self.stem_norm.gamma);
        f("stem.norm.beta".into(), &mut self.stem_norm.beta);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("block{}.conv1.weight", i), &mut b.conv1.weight);
            f(format!("block{}.norm1.gamma", i), &mut b.norm1.gamma);
            f(format!("block{}.norm1.beta", i), &mut b.norm1.beta);
            f(format!("block{}.conv2.weight", i), &mut b.conv2.weight);
            f(format!("block{}.norm2.gamma", i), &mut b.norm2.gamma);
            f(format!("block{}.norm2.beta", i), &mut b.norm2.beta);
            if let Some((conv, norm)) = &mut b.proj {
                f(format!("block{}.proj.weight", i), &mut conv.weight);
                f(format!("block{}.proj_norm.gamma", i), &mut norm.gamma);
                f(format!("block{}.proj_norm.beta", i), &mut norm.beta);
            }
        }
        f("head.weight".into(), &mut self.head_weight);
        f("head.bias".into(), &mut self.head_bias);
        if let Some(aux) = &mut self.aux {
            aux.for_each_param_mut(f);
        }
    }

    /// Rebuild a binding from parameter ids leafed elsewhere, in canonical
    /// walk order. The gradient checker leafs perturbed copies itself.
    pub fn binding_from_flat(&self, ids: &[TensorId]) -> ModelBinding {
        let mut cursor = ids.iter().copied();
        let mut next = || cursor.next().expect("flat id list shorter than parameter walk");
        let stem = next();
        let stem_norm = BoundNorm {
            gamma: next(),
            beta: next(),
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockBinding {
                conv1: next(),
                norm1: BoundNorm {
                    gamma: next(),
                    beta: next(),
                },
                conv2: next(),
                norm2: BoundNorm {
                    gamma: next(),
                    beta: next(),
                },
                proj: b.proj.as_ref().map(|_| {
                    (
                        next(),
                        BoundNorm {
                            gamma: next(),
                            beta: next(),
                        },
                    )
                }),
            })
            .collect();
        let head_weight = next();
        let head_bias = next();
        let aux = self.aux.as_ref().map(|a| BoundAux {
            trunks: a.trunk_count_ids(&mut next),
            heads: a.head_count_ids(&mut next),
        });
        assert!(cursor.next().is_none(), "flat id list longer than parameter walk");
        ModelBinding {
            stem,
            stem_norm,
            blocks,
            head_weight,
            head_bias,
            aux,
        }
    }

    /// Leaf every parameter onto a tape, in canonical walk order.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        let stem = tape.param(self.stem.weight.clone());
        let stem_norm = self.stem_norm.bind(tape);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockBinding {
                conv1: tape.param(b.conv1.weight.clone()),
                norm1: b.norm1.bind(tape),
                conv2: tape.param(b.conv2.weight.clone()),
                norm2: b.norm2.bind(tape),
                proj: b.proj.as_ref().map(|(conv, norm)| (tape.param(conv.weight.clone()), norm.bind(tape))),
            })
            .collect();
        let head_weight = tape.param(self.head_weight.clone());
        let head_bias = tape.param(self.head_bias.clone());
        let aux = self.aux.as_ref().map(|a| a.bind(tape));
        ModelBinding {
            stem,
            stem_norm,
            blocks,
            head_weight,
            head_bias,
            aux,
        }
    }

    /// Full forward pass. Train mode updates every norm layer's running
    /// statistics; eval mode leaves the model untouched.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &ModelBinding,
        images: TensorId,
        attrs: AttrInput<'_>,
        mode: NormMode,
    ) -> Result<ForwardOutput> {
        let n = tape.value(images).shape()[0];

        // Resolve deltas once for the whole pass.
        let (layer_deltas, bypass) = match (&self.norm_kind, attrs) {
            (NormKind::Bn, _) => (None, Vec::new()),
            (NormKind::Cbn, AttrInput::Attrs { batch, bypass }) => {
                let aux = self.aux.as_ref().expect("conditional model always has an auxiliary net");
                let bound = binding.aux.as_ref().expect("binding built from this model");
                let deltas = predict_deltas(tape, aux, bound, batch)?;
                let bypass = if bypass.is_empty() { vec![false; n] } else { bypass };
                if bypass.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "forward",
                        detail: format!("{} bypass flags for batch of {}", bypass.len(), n),
                    });
                }
                (Some(deltas), bypass)
            }
            // Every delta suppressed: the kernel would ignore the delta
            // values entirely, so skip the auxiliary net and use the plain
            // path, which is arithmetically identical.
            (NormKind::Cbn, AttrInput::FullBypass) => (None, Vec::new()),
            (NormKind::Cbn, AttrInput::None) => return Err(Error::MissingDeltas),
        };

        let conditioned = self.conditioned.clone();
        let mut norm_idx = 0usize;
        let mut cond_idx = 0usize;
        let mut norm_site = |tape: &mut Tape,
                             x: TensorId,
                             bound: &BoundNorm,
                             state: &mut NormLayerState|
         -> Result<TensorId> {
            let is_cond = conditioned[norm_idx] && layer_deltas.is_some();
            norm_idx += 1;
            if is_cond {
                let d = &layer_deltas.as_ref().unwrap()[cond_idx];
                cond_idx += 1;
                let deltas = CondDeltas {
                    delta_gamma: d.delta_gamma,
                    delta_beta: d.delta_beta,
                    bypass: bypass.clone(),
                };
                cbn_forward(tape, x, bound, state, &deltas, mode)
            } else {
                bn_forward(tape, x, bound, state, mode)
            }
        };

        let mut x = tape.conv2d(images, binding.stem, self.stem.stride, self.stem.padding)?;
        x = norm_site(tape, x, &binding.stem_norm, &mut self.stem_norm)?;
        x = tape.relu(x)?;

        for (b, bb) in self.blocks.iter_mut().zip(&binding.blocks) {
            let identity = x;
            let mut y = tape.conv2d(x, bb.conv1, b.conv1.stride, b.conv1.padding)?;
            y = norm_site(tape, y, &bb.norm1, &mut b.norm1)?;
            y = tape.relu(y)?;
            y = tape.conv2d(y, bb.conv2, b.conv2.stride, b.conv2.padding)?;
            y = norm_site(tape, y, &bb.norm2, &mut b.norm2)?;
            let skip = match (&mut b.proj, &bb.proj) {
                (Some((conv, norm)), Some((conv_id, norm_bound))) => {
                    let p = tape.conv2d(identity, *conv_id, conv.stride, conv.padding)?;
                    norm_site(tape, p, norm_bound, norm)?
                }
                _ => identity,
            };
            x = tape.add(y, skip)?;
            x = tape.relu(x)?;
        }

        let last_feature = x;
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.dense(pooled, binding.head_weight, binding.head_bias)?;
        Ok(ForwardOutput { logits, last_feature })
    }
}

/// Saliency heatmap over the last conv feature map's spatial grid.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub heatmap: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub target_class: usize,
    /// Set when the pre-normalization heatmap was identically zero.
    pub all_zero: bool,
}

/// Gradient-weighted class activation map: channel weights are the spatial
/// means of d(logit_target)/d(feature map); the heatmap is the ReLU of the
/// weighted channel sum, normalized to peak at 1 when nonzero.
pub fn gradcam(
    model: &mut MicroResNet,
    image: &Tensor,
    attrs: AttrInput<'_>,
    target_class: usize,
) -> Result<SaliencyMap> {
    if image.shape().len() != 4 || image.shape()[0] != 1 {
        return Err(Error::ShapeMismatch {
            op: "gradcam",
            detail: format!("expected [1,C,H,W] image, got {:?}", image.shape()),
        });
    }
    if target_class >= model.cfg.num_classes {
        return Err(Error::LabelOutOfRange {
            label: target_class,
            classes: model.cfg.num_classes,
        });
    }
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let img = tape.constant(image.clone());
    let out = model.forward(&mut tape, &binding, img, attrs, NormMode::Eval)?;
    let target = tape.pick(out.logits, 0, target_class)?;
    tape.backward(target)?;

    let feat = tape.value(out.last_feature);
    let (c, h, w) = (feat.shape()[1], feat.shape()[2], feat.shape()[3]);
    let spatial = h * w;
    let grads = tape
        .grad(out.last_feature)
        .expect("feature map is an ancestor of the picked logit");

    let mut heat = vec![0.0; spatial];
    for k in 0..c {
        let base = k * spatial;
        let alpha = grads[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        let plane = &feat.data()[base..base + spatial];
        for (hv, av) in heat.iter_mut().zip(plane) {
            *hv += alpha * av;
        }
    }
    for v in heat.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let max = heat.iter().cloned().fold(0.0, f64::max);
    let all_zero = max == 0.0;
    if !all_zero {
        for v in heat.iter_mut() {
            *v /= max;
        }
    }
    Ok(SaliencyMap {
        heatmap: heat,
        height: h,
        width: w,
        target_class,
        all_zero,
    })
}

/// Compute a heatmap from an explicit feature map and its gradients; the
/// taped `gradcam` above reduces to this once the backward pass has run.
pub fn gradcam_from_parts(features: &[f64], grads: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, bool) {
    let spatial = h * w;
    let mut heat = vec![0.0; spatial];
    for k in 0..c {
        let base = k * spatial;
        let alpha = grads[base..base + spatial].iter().sum::<f64>() / spatial as f64;
        for (hv, fv) in heat.iter_mut().zip(&features[base..base + spatial]) {
            *hv += alpha * fv;
        }
    }
    for v in heat.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let max = heat.iter().cloned().fold(0.0, f64::max);
    let all_zero = max == 0.0;
    if !all_zero {
        for v in heat.iter_mut() {
            *v /= max;
        }
    }
    (heat, all_zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            image_channels: 3,
            num_classes: 4,
            attr_dim: 6,
            stem_channels: 4,
            stage_channels: vec![4, 8],
            aux_hidden: 8,
            aux_shared_trunk: true,
            conditioned_layers: None,
        }
    }

    fn rand_images(n: usize, c: usize, s: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[n, c, s, s], (0..n * c * s * s).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn rand_attrs(n: usize, d: usize, seed: u64) -> Vec<AttributeVector> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| AttributeVector::new((0..d).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect()))
            .collect()
    }

    fn logits_of(model: &mut MicroResNet, images: &Tensor, attrs: AttrInput<'_>, mode: NormMode) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.constant(images.clone());
        let out = model.forward(&mut tape, &binding, img, attrs, mode).unwrap();
        tape.value(out.logits).data().to_vec()
    }

    #[test]
    fn twin_variants_share_backbone_weights() {
        let cfg = small_cfg();
        let bn = build_model(&cfg, NormKind::Bn, 42).unwrap();
        let cbn = build_model(&cfg, NormKind::Cbn, 42).unwrap();
        let mut bn_params = Vec::new();
        bn.for_each_param(&mut |name, t| bn_params.push((name, t.data().to_vec())));
        let mut cbn_params = Vec::new();
        cbn.for_each_param(&mut |name, t| cbn_params.push((name, t.data().to_vec())));
        for (name, data) in &bn_params {
            let twin = cbn_params.iter().find(|(n, _)| n == name).unwrap();
            let a: Vec<u64> = data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = twin.1.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "backbone weight {} differs between twins", name);
        }
    }

    #[test]
    fn conditional_variant_adds_exactly_the_auxiliary_parameters() {
        let cfg = small_cfg();
        let bn = build_model(&cfg, NormKind::Bn, 1).unwrap();
        let cbn = build_model(&cfg, NormKind::Cbn, 1).unwrap();
        let aux_count = cbn.aux.as_ref().unwrap().param_count();
        // Closed form: shared trunk D*H + H, plus per conditioned layer H*2C + 2C.
        let expected_aux: usize = cfg.attr_dim * cfg.aux_hidden
            + cfg.aux_hidden
            + cbn
                .conditioned_channels()
                .iter()
                .map(|c| cfg.aux_hidden * 2 * c + 2 * c)
                .sum::<usize>();
        assert_eq!(aux_count, expected_aux);
        assert_eq!(cbn.param_count() - bn.param_count(), aux_count);
    }

    #[test]
    fn forward_produces_batch_by_class_logits() {
        let cfg = BackboneConfig {
            num_classes: 7,
            attr_dim: 5,
            ..small_cfg()
        };
        let mut model = build_model(&cfg, NormKind::Bn, 3).unwrap();
        let images = rand_images(64, 3, 33, 9);
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.constant(images);
        let out = model
            .forward(&mut tape, &binding, img, AttrInput::None, NormMode::Train)
            .unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[64, 7]);
    }

    #[test]
    fn fully_bypassed_conditional_model_matches_plain_twin_exactly() {
        let cfg = small_cfg();
        let mut bn = build_model(&cfg, NormKind::Bn, 17).unwrap();
        let mut cbn = build_model(&cfg, NormKind::Cbn, 17).unwrap();
        let images = rand_images(6, 3, 9, 10);

        let a = logits_of(&mut bn, &images, AttrInput::None, NormMode::Train);
        let b = logits_of(&mut cbn, &images, AttrInput::FullBypass, NormMode::Train);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Explicit per-sample bypass flags take the same path.
        let attrs = rand_attrs(6, cfg.attr_dim, 11);
        let c = logits_of(
            &mut cbn,
            &images,
            AttrInput::Attrs {
                batch: &attrs,
                bypass: vec![true; 6],
            },
            NormMode::Eval,
        );
        let d = logits_of(&mut bn, &images, AttrInput::None, NormMode::Eval);
        assert_eq!(
            c.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            d.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn freshly_built_conditional_model_matches_twin_on_any_attributes() {
        // Zero-initialized delta head: logits equal the plain twin's exactly.
        let cfg = small_cfg();
        let mut bn = build_model(&cfg, NormKind::Bn, 23).unwrap();
        let mut cbn = build_model(&cfg, NormKind::Cbn, 23).unwrap();
        let images = rand_images(4, 3, 9, 12);
        let attrs = rand_attrs(4, cfg.attr_dim, 13);
        let a = logits_of(&mut bn, &images, AttrInput::None, NormMode::Train);
        let b = logits_of(
            &mut cbn,
            &images,
            AttrInput::Attrs {
                batch: &attrs,
                bypass: vec![],
            },
            NormMode::Train,
        );
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            a.iter().cloned().enumerate().max_by(|x, y| x.1.total_cmp(&y.1)).map(|(i, _)| i),
            b.iter().cloned().enumerate().max_by(|x, y| x.1.total_cmp(&y.1)).map(|(i, _)| i)
        );
    }

    #[test]
    fn conditional_model_requires_attributes_or_bypass() {
        let mut cbn = build_model(&small_cfg(), NormKind::Cbn, 5).unwrap();
        let images = rand_images(2, 3, 9, 14);
        let mut tape = Tape::new();
        let binding = cbn.bind(&mut tape);
        let img = tape.constant(images);
        assert!(matches!(
            cbn.forward(&mut tape, &binding, img, AttrInput::None, NormMode::Eval),
            Err(Error::MissingDeltas)
        ));
    }

    #[test]
    fn zero_images_give_repeatable_constant_logits_in_eval() {
        let mut model = build_model(&small_cfg(), NormKind::Bn, 6).unwrap();
        let images = Tensor::zeros(&[3, 3, 9, 9]);
        let a = logits_of(&mut model, &images, AttrInput::None, NormMode::Eval);
        let b = logits_of(&mut model, &images, AttrInput::None, NormMode::Eval);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // every row identical: the network sees identical all-zero inputs
        for row in a.chunks(4).skip(1) {
            assert_eq!(row, &a[..4]);
        }
    }

    #[test]
    fn stemonly_model_matches_hand_traced_forward() {
        // conv -> norm (eval, identity stats) -> relu -> pool -> dense,
        // traced with independent loops.
        let cfg = BackboneConfig {
            image_channels: 3,
            num_classes: 3,
            attr_dim: 2,
            stem_channels: 2,
            stage_channels: vec![],
            aux_hidden: 4,
            aux_shared_trunk: true,
            conditioned_layers: None,
        };
        let mut model = build_model(&cfg, NormKind::Bn, 77).unwrap();
        let image = rand_images(1, 3, 8, 15);
        let got = logits_of(&mut model, &image, AttrInput::None, NormMode::Eval);

        // Oracle.
        let w = model.stem.weight.data();
        let (f, cin, k) = (2usize, 3usize, 3usize);
        let mut conv = vec![0.0; f * 8 * 8];
        for fi in 0..f {
            for oh in 0..8i64 {
                for owi in 0..8i64 {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for kh in 0..k as i64 {
                            for kw in 0..k as i64 {
                                let (ih, iw) = (oh + kh - 1, owi + kw - 1);
                                if (0..8).contains(&ih) && (0..8).contains(&iw) {
                                    acc += image.data()[(ci as i64 * 64 + ih * 8 + iw) as usize]
                                        * w[((fi * cin + ci) * k + kh as usize) * k + kw as usize];
                                }
                            }
                        }
                    }
                    conv[(fi * 8 + oh as usize) * 8 + owi as usize] = acc;
                }
            }
        }
        let eps = model.stem_norm.epsilon;
        let mut pooled = vec![0.0; f];
        for fi in 0..f {
            let plane = &conv[fi * 64..(fi + 1) * 64];
            let normed: Vec<f64> = plane.iter().map(|v| (v / (1.0 + eps).sqrt()).max(0.0)).collect();
            pooled[fi] = normed.iter().sum::<f64>() / 64.0;
        }
        let hw = model.head_weight.data();
        let hb = model.head_bias.data();
        for j in 0..3 {
            let expect = hb[j] + pooled[0] * hw[j] + pooled[1] * hw[3 + j];
            assert!((got[j] - expect).abs() < 1e-12, "logit {}: {} vs {}", j, got[j], expect);
        }
    }

    #[test]
    fn gradcam_zero_feature_map_is_flagged() {
        let mut model = build_model(&small_cfg(), NormKind::Bn, 8).unwrap();
        // Zero every parameter feeding the feature map; beta = 0 keeps the
        // post-norm activations at exactly zero.
        model.for_each_param_mut(&mut |name, t| {
            if !name.contains("head") {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        });
        let image = rand_images(1, 3, 9, 16);
        let map = gradcam(&mut model, &image, AttrInput::None, 0).unwrap();
        assert!(map.all_zero);
        assert!(map.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcam_argmax_is_invariant_to_positive_head_scaling() {
        let mut model = build_model(&small_cfg(), NormKind::Bn, 9).unwrap();
        let image = rand_images(1, 3, 9, 17);
        let before = gradcam(&mut model, &image, AttrInput::None, 2).unwrap();
        model.for_each_param_mut(&mut |name, t| {
            if name.starts_with("head") {
                for v in t.data_mut() {
                    *v *= 2.0;
                }
            }
        });
        let after = gradcam(&mut model, &image, AttrInput::None, 2).unwrap();
        let argmax = |m: &SaliencyMap| {
            m.heatmap
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
        };
        assert_eq!(argmax(&before), argmax(&after));
    }

    #[test]
    fn gradcam_heatmaps_are_nonnegative_and_peak_at_one() {
        let mut model = build_model(&small_cfg(), NormKind::Bn, 10).unwrap();
        let image = rand_images(1, 3, 9, 18);
        let map = gradcam(&mut model, &image, AttrInput::None, 1).unwrap();
        assert!(map.heatmap.iter().all(|&v| v >= 0.0));
        if !map.all_zero {
            let max = map.heatmap.iter().cloned().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gradcam_parts_match_hand_computation() {
        // 2 channels over a 2x2 grid with hand-set gradients.
        let features = vec![
            1.0, 2.0, //
            3.0, 4.0, // channel 0
            -1.0, 0.5, //
            2.0, -3.0, // channel 1
        ];
        let grads = vec![
            0.4, 0.4, //
            0.4, 0.4, // alpha_0 = 0.4
            -2.0, -2.0, //
            -2.0, -2.0, // alpha_1 = -2.0
        ];
        let (heat, all_zero) = gradcam_from_parts(&features, &grads, 2, 2, 2);
        // raw = 0.4*A0 - 2*A1 = [2.4, -0.2, -2.8, 7.6] -> relu -> /7.6
        assert!(!all_zero);
        let expect = [2.4 / 7.6, 0.0, 0.0, 1.0];
        for (h, e) in heat.iter().zip(&expect) {
            assert!((h - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcam_rejects_out_of_range_class() {
        let mut model = build_model(&small_cfg(), NormKind::Bn, 11).unwrap();
        let image = rand_images(1, 3, 9, 19);
        assert!(matches!(
            gradcam(&mut model, &image, AttrInput::None, 99),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn binding_order_matches_parameter_walk() {
        let model = build_model(&small_cfg(), NormKind::Cbn, 12).unwrap();
        let mut tape = Tape::new();
        let _ = model.bind(&mut tape);
        let mut walk_shapes = Vec::new();
        model.for_each_param(&mut |_, t| walk_shapes.push(t.shape().to_vec()));
        assert_eq!(tape.len(), walk_shapes.len());
        for (i, shape) in walk_shapes.iter().enumerate() {
            assert_eq!(tape.value(TensorId(i)).shape(), shape.as_slice());
        }
    }
}
