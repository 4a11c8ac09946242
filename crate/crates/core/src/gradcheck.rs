//! Finite-difference verification of backward rules.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Central-difference step.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Gradients below this scale are compared against an absolute floor rather
/// than relatively; plain relative error blows up on near-zero entries where
/// the finite difference itself is all rounding noise.
const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<28} max_rel_error {:>12.3e}  {}",
                b.name,
                b.max_rel_error,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(SCALE_FLOOR)
}

/// Largest elementwise relative error between two gradient buffers.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Check the backward pass of `model_fn` against central finite differences.
///
/// `model_fn` receives a fresh tape plus one grad-tracked leaf per named
/// parameter block (in order) and returns the scalar loss node. It must be
/// deterministic: the check runs it twice up front and refuses to continue
/// if the two loss values differ.
pub fn grad_check<F>(params: &[(String, Tensor)], tol: f64, mut model_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Tensor], f: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let l1 = eval(&values, &mut model_fn)?;
    let l2 = eval(&values, &mut model_fn)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    // Analytic gradients from one taped backward pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = values.iter().map(|t| tape.param(t.clone())).collect();
    let loss = model_fn(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|id| tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(*id).len()]))
        .collect();

    let mut blocks = Vec::with_capacity(params.len());
    let mut perturbed = values.clone();
    for (bi, (name, _)) in params.iter().enumerate() {
        let mut max_err: f64 = 0.0;
        for ei in 0..perturbed[bi].len() {
            let orig = perturbed[bi].data()[ei];
            perturbed[bi].data_mut()[ei] = orig + DEFAULT_EPSILON;
            let plus = eval(&perturbed, &mut model_fn)?;
            perturbed[bi].data_mut()[ei] = orig - DEFAULT_EPSILON;
            let minus = eval(&perturbed, &mut model_fn)?;
            perturbed[bi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_EPSILON);
            max_err = max_err.max(relative_error(analytic[bi][ei], numeric));
        }
        blocks.push(BlockReport {
            name: name.clone(),
            max_rel_error: max_err,
            passed: max_err < tol,
        });
    }
    Ok(GradCheckReport { tol, blocks })
}

/// Canned finite-difference batteries over every op and the full models,
/// with fixed seeds. The command-line `grad-check` and the acceptance suite
/// both run these.
pub mod suite {
    use super::*;
    use crate::conditioning::AttributeVector;
    use crate::model::{build_model, AttrInput, BackboneConfig, NormKind};
    use crate::tape::NormMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_tensor_off_kink(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(0.1..1.0);
                if r.gen::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn worst(reports: Vec<GradCheckReport>) -> f64 {
        reports.iter().map(|r| r.max_error()).fold(0.0, f64::max)
    }

    fn probe_loss(
        tape: &mut Tape,
        value: TensorId,
        probe: &Tensor,
    ) -> Result<TensorId> {
        let pw = tape.constant(probe.clone());
        let prod = tape.mul(value, pw)?;
        tape.sum(prod)
    }

    pub fn conv2d(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(101);
        let mut reports = Vec::new();
        for trial in 0..trials {
            let (stride, padding, h) = match trial % 3 {
                0 => (1, 0, 4),
                1 => (1, 1, 4),
                _ => (2, 1, 5),
            };
            let x = rand_tensor(&[2, 2, h, h], &mut r);
            let k = rand_tensor(&[2, 2, 3, 3], &mut r);
            let probe = {
                let mut t = Tape::new();
                let xi = t.leaf(x.clone());
                let ki = t.leaf(k.clone());
                let y = t.conv2d(xi, ki, stride, padding)?;
                rand_tensor(t.value(y).shape(), &mut r)
            };
            reports.push(grad_check(
                &[("input".into(), x), ("kernel".into(), k)],
                tol,
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], stride, padding)?;
                    probe_loss(tape, y, &probe)
                },
            )?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "conv2d".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn dense(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(102);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[2, 3], &mut r);
            let w = rand_tensor(&[3, 4], &mut r);
            let b = rand_tensor(&[4], &mut r);
            let probe = rand_tensor(&[2, 4], &mut r);
            reports.push(grad_check(
                &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
                tol,
                |tape, ids| {
                    let y = tape.dense(ids[0], ids[1], ids[2])?;
                    probe_loss(tape, y, &probe)
                },
            )?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "dense".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn relu(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(103);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor_off_kink(&[3, 5], &mut r);
            let probe = rand_tensor(&[3, 5], &mut r);
            reports.push(grad_check(&[("x".into(), x)], tol, |tape, ids| {
                let y = tape.relu(ids[0])?;
                probe_loss(tape, y, &probe)
            })?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "relu".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn softmax_ops(trials: usize, tol: f64, log: bool) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(104);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[2, 4], &mut r);
            let probe = rand_tensor(&[2, 4], &mut r);
            reports.push(grad_check(&[("logits".into(), x)], tol, |tape, ids| {
                let y = if log {
                    tape.log_softmax(ids[0])?
                } else {
                    tape.softmax(ids[0])?
                };
                probe_loss(tape, y, &probe)
            })?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: if log { "log_softmax".into() } else { "softmax".into() },
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn cross_entropy(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(105);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[3, 5], &mut r);
            let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..5)).collect();
            reports.push(grad_check(&[("logits".into(), x)], tol, |tape, ids| {
                tape.cross_entropy(ids[0], &labels)
            })?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "cross_entropy".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn kl_divergence(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(106);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let p = rand_tensor(&[2, 4], &mut r);
            let q = rand_tensor(&[2, 4], &mut r);
            reports.push(grad_check(
                &[("p".into(), p), ("q".into(), q)],
                tol,
                |tape, ids| tape.kl_divergence(ids[0], ids[1]),
            )?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "kl_divergence".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn batch_norm(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(107);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[3, 2, 2, 2], &mut r);
            let gamma = rand_tensor(&[2], &mut r);
            let beta = rand_tensor(&[2], &mut r);
            let probe = rand_tensor(&[3, 2, 2, 2], &mut r);
            for mode in [NormMode::Train, NormMode::Eval] {
                reports.push(grad_check(
                    &[
                        ("x".into(), x.clone()),
                        ("gamma".into(), gamma.clone()),
                        ("beta".into(), beta.clone()),
                    ],
                    tol,
                    |tape, ids| {
                        let (y, _) = tape.batch_norm(
                            ids[0],
                            ids[1],
                            ids[2],
                            None,
                            &[0.1, -0.2],
                            &[0.9, 1.3],
                            1e-5,
                            mode,
                        )?;
                        probe_loss(tape, y, &probe)
                    },
                )?);
            }
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "batch_norm".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn conditional_batch_norm(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(108);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[3, 2, 2, 2], &mut r);
            let gamma = rand_tensor(&[2], &mut r);
            let beta = rand_tensor(&[2], &mut r);
            let dg = rand_tensor(&[3, 2], &mut r);
            let db = rand_tensor(&[3, 2], &mut r);
            let probe = rand_tensor(&[3, 2, 2, 2], &mut r);
            let bypass = vec![false, true, false];
            reports.push(grad_check(
                &[
                    ("x".into(), x),
                    ("gamma".into(), gamma),
                    ("beta".into(), beta),
                    ("delta_gamma".into(), dg),
                    ("delta_beta".into(), db),
                ],
                tol,
                |tape, ids| {
                    let (y, _) = tape.batch_norm(
                        ids[0],
                        ids[1],
                        ids[2],
                        Some((ids[3], ids[4], &bypass)),
                        &[0.0, 0.0],
                        &[1.0, 1.0],
                        1e-5,
                        NormMode::Train,
                    )?;
                    probe_loss(tape, y, &probe)
                },
            )?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "conditional_batch_norm".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    pub fn pooling_and_slicing(trials: usize, tol: f64) -> Result<BlockReport> {
        let mut r = ChaCha8Rng::seed_from_u64(109);
        let mut reports = Vec::new();
        for _ in 0..trials {
            let x = rand_tensor(&[2, 3, 2, 2], &mut r);
            let probe = rand_tensor(&[2, 2], &mut r);
            reports.push(grad_check(&[("x".into(), x)], tol, |tape, ids| {
                let pooled = tape.global_avg_pool(ids[0])?;
                let cols = tape.slice_cols(pooled, 1, 2)?;
                let s = probe_loss(tape, cols, &probe)?;
                let picked = tape.pick(pooled, 0, 0)?;
                tape.add(s, picked)
            })?);
        }
        let max = worst(reports);
        Ok(BlockReport {
            name: "global_avg_pool+slice".into(),
            max_rel_error: max,
            passed: max < tol,
        })
    }

    fn suite_model_cfg() -> BackboneConfig {
        BackboneConfig {
            image_channels: 2,
            num_classes: 3,
            attr_dim: 4,
            stem_channels: 2,
            stage_channels: vec![2, 3],
            aux_hidden: 4,
            aux_shared_trunk: true,
            conditioned_layers: None,
        }
    }

    /// Full conditional model on the composite objective: every parameter
    /// block against central differences.
    pub fn full_conditional_model(tol: f64) -> Result<GradCheckReport> {
        let mut model = build_model(&suite_model_cfg(), NormKind::Cbn, 2024)?;
        let mut seed_rng = ChaCha8Rng::seed_from_u64(2025);
        model.for_each_param_mut(&mut |name, t| {
            if name.starts_with("aux.head") {
                for v in t.data_mut() {
                    *v = seed_rng.gen_range(-0.3..0.3);
                }
            }
        });
        let mut r = ChaCha8Rng::seed_from_u64(2026);
        let images = rand_tensor(&[2, 2, 5, 5], &mut r);
        let attrs: Vec<AttributeVector> = (0..2)
            .map(|_| AttributeVector::new((0..4).map(|_| r.gen_range(0.0..1.0)).collect()))
            .collect();
        let labels = vec![1usize, 2];
        let bypass = vec![false, true];
        let q_logits = rand_tensor(&[2, 3], &mut r);

        let mut params = Vec::new();
        model.for_each_param(&mut |name, t| params.push((name, t.clone())));
        grad_check(&params, tol, |tape, ids| {
            let mut m = model.clone();
            let binding = m.binding_from_flat(ids);
            let img = tape.constant(images.clone());
            let out = m.forward(
                tape,
                &binding,
                img,
                AttrInput::Attrs {
                    batch: &attrs,
                    bypass: bypass.clone(),
                },
                NormMode::Train,
            )?;
            let ce = tape.cross_entropy(out.logits, &labels)?;
            let qc = tape.constant(q_logits.clone());
            let kl = tape.kl_divergence(out.logits, qc)?;
            let ce_w = tape.scale(ce, 0.9)?;
            let kl_w = tape.scale(kl, 0.1)?;
            tape.add(ce_w, kl_w)
        })
    }

    pub fn full_plain_model(tol: f64) -> Result<GradCheckReport> {
        let model = build_model(&suite_model_cfg(), NormKind::Bn, 3030)?;
        let mut r = ChaCha8Rng::seed_from_u64(3031);
        let images = rand_tensor(&[2, 2, 5, 5], &mut r);
        let labels = vec![0usize, 2];
        let mut params = Vec::new();
        model.for_each_param(&mut |name, t| params.push((name, t.clone())));
        grad_check(&params, tol, |tape, ids| {
            let mut m = model.clone();
            let binding = m.binding_from_flat(ids);
            let img = tape.constant(images.clone());
            let out = m.forward(tape, &binding, img, AttrInput::None, NormMode::Train)?;
            tape.cross_entropy(out.logits, &labels)
        })
    }

    /// Every per-op battery plus both full-model checks, one summary line
    /// each.
    pub fn run_all(trials: usize, tol: f64) -> Result<Vec<BlockReport>> {
        let mut out = vec![
            conv2d(trials, tol)?,
            dense(trials, tol)?,
            relu(trials, tol)?,
            softmax_ops(trials, tol, false)?,
            softmax_ops(trials, tol, true)?,
            cross_entropy(trials, tol)?,
            kl_divergence(trials, tol)?,
            batch_norm(trials, tol)?,
            conditional_batch_norm(trials, tol)?,
            pooling_and_slicing(trials, tol)?,
        ];
        let cbn = full_conditional_model(tol)?;
        out.push(BlockReport {
            name: "full_conditional_model".into(),
            max_rel_error: cbn.max_error(),
            passed: cbn.passed(),
        });
        let bn = full_plain_model(tol)?;
        out.push(BlockReport {
            name: "full_plain_model".into(),
            max_rel_error: bn.max_error(),
            passed: bn.passed(),
        });
        Ok(out)
    }
}
