//! Optimization loops: plain and conditional baselines, train-time attribute
//! masking, and the two-network composite objective.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::conditioning::{bernoulli_bypass, mask_attributes, AttributeVector, MaskMode};
use crate::datagen::{generate, load_dataset, Dataset, LabeledExample, ShortcutDatasetConfig, Split};
use crate::error::{Error, Result};
use crate::model::{build_model, AttrInput, BackboneConfig, MicroResNet, NormKind};
use crate::rng::{self, salt};
use crate::tape::{NormMode, Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent.
    Sgd,
    /// SGD with momentum 0.9.
    SgdMomentum,
}

impl OptimizerKind {
    pub fn momentum(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.0,
            OptimizerKind::SgdMomentum => 0.9,
        }
    }
}

fn default_batch_size() -> usize {
    64
}
fn default_m() -> f64 {
    0.9
}
fn default_num_runs() -> usize {
    10
}

/// One run's worth of configuration; reads from JSON with these exact field
/// names. Exactly one of `dataset_config` / `dataset_path` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset_config: Option<ShortcutDatasetConfig>,
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    pub model: BackboneConfig,
    pub norm_kind: NormKind,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub train_mask_fraction: f64,
    pub train_mask_mode: MaskMode,
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default)]
    pub supplementary_enabled: bool,
    pub seed: u64,
    #[serde(default = "default_num_runs")]
    pub num_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_config: None,
            dataset_path: None,
            model: BackboneConfig::default(),
            norm_kind: NormKind::Cbn,
            epochs: 30,
            batch_size: default_batch_size(),
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            train_mask_fraction: 0.0,
            train_mask_mode: MaskMode::DeltaBypass,
            m: default_m(),
            supplementary_enabled: false,
            seed: 0,
            num_runs: default_num_runs(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::InvalidConfig(format!("m {} outside [0, 1]", self.m)));
        }
        if !(0.0..=1.0).contains(&self.train_mask_fraction) {
            return Err(Error::InvalidFraction(self.train_mask_fraction));
        }
        match (&self.dataset_config, &self.dataset_path) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::InvalidConfig(
                "exactly one of dataset_config / dataset_path must be set".into(),
            )),
        }
    }

    /// Load or generate the dataset this config names.
    pub fn dataset(&self) -> Result<Dataset> {
        self.validate()?;
        match (&self.dataset_config, &self.dataset_path) {
            (Some(cfg), None) => generate(cfg),
            (None, Some(path)) => load_dataset(path),
            _ => unreachable!("validate checked the source"),
        }
    }

    /// Model config with class/attribute dimensions filled in from the data.
    pub fn resolved_model(&self, dataset: &Dataset) -> Result<BackboneConfig> {
        let mut model = self.model.clone();
        if model.num_classes == 0 {
            model.num_classes = dataset.num_classes;
        }
        if model.attr_dim == 0 {
            model.attr_dim = dataset.attribute_dim;
        }
        if model.num_classes != dataset.num_classes {
            return Err(Error::InvalidConfig(format!(
                "model expects {} classes, dataset has {}",
                model.num_classes, dataset.num_classes
            )));
        }
        if model.attr_dim != dataset.attribute_dim {
            return Err(Error::InvalidConfig(format!(
                "model expects {} attributes, dataset has {}",
                model.attr_dim, dataset.attribute_dim
            )));
        }
        Ok(model)
    }
}

/// One evaluation or training measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub test_mask_fraction: f64,
    pub train_mask_fraction: f64,
    pub accuracy: f64,
    pub ce_loss: f64,
    pub kl_loss: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "run_id,seed,epoch,split,test_mask_fraction,train_mask_fraction,accuracy,ce_loss,kl_loss";

pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.epoch,
            r.split,
            r.test_mask_fraction,
            r.train_mask_fraction,
            r.accuracy,
            r.ce_loss,
            r.kl_loss
        ));
    }
    out
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_to_csv(records))?;
    Ok(())
}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Momentum-SGD update on one parameter block:
/// `velocity <- momentum * velocity + grad; param <- param - lr * velocity`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
        let _ = bad;
        return Err(Error::NonFinite { op: "sgd_step" });
    }
    for i in 0..params.len() {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
    Ok(())
}

struct Optimizer {
    velocities: Vec<Vec<f64>>,
    momentum: f64,
}

impl Optimizer {
    fn new(model: &MicroResNet, kind: OptimizerKind) -> Self {
        let mut velocities = Vec::new();
        model.for_each_param(&mut |_, t| velocities.push(vec![0.0; t.len()]));
        Self {
            velocities,
            momentum: kind.momentum(),
        }
    }

    fn step(&mut self, model: &mut MicroResNet, tape: &Tape, ids: &[TensorId], lr: f64) -> Result<()> {
        let mut idx = 0usize;
        let mut err = None;
        model.for_each_param_mut(&mut |_, t| {
            if err.is_some() {
                return;
            }
            let id = ids[idx];
            if let Some(grads) = tape.grad(id) {
                if let Err(e) = sgd_step(t.data_mut(), grads, &mut self.velocities[idx], lr, self.momentum) {
                    err = Some(e);
                }
            } else {
                // Unreached parameter: zero gradient, velocity still decays.
                for v in self.velocities[idx].iter_mut() {
                    *v *= self.momentum;
                }
                let vel = &self.velocities[idx];
                for (p, v) in t.data_mut().iter_mut().zip(vel) {
                    *p -= lr * v;
                }
            }
            idx += 1;
        });
        err.map_or(Ok(()), Err)
    }
}

/// Cosine learning-rate schedule over the epoch budget.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

// ----------------------------------------------------------------------
// Batching and evaluation
// ----------------------------------------------------------------------

fn stack_images(examples: &[&LabeledExample]) -> Tensor {
    let shape = examples[0].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(examples.len() * c * h * w);
    for e in examples {
        data.extend_from_slice(e.image.data());
    }
    Tensor::new(&[examples.len(), c, h, w], data).expect("stacked image buffer")
}

/// Attribute handling for an evaluation pass.
pub enum EvalAttrs<'a> {
    /// Plain model: no attributes.
    Plain,
    /// Conditional model with the examples' own attributes, nothing masked.
    Full,
    /// Conditional model with a pre-masked attribute set and per-example
    /// bypass flags (index-aligned with `examples`).
    Masked {
        attrs: &'a [AttributeVector],
        bypass: &'a [bool],
    },
    /// Conditional model with every delta suppressed.
    Bypassed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub ce_loss: f64,
}

/// Eval-mode accuracy and cross-entropy over a split.
pub fn evaluate(
    model: &mut MicroResNet,
    examples: &[LabeledExample],
    attrs: EvalAttrs<'_>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if examples.is_empty() {
        return Ok(EvalMetrics {
            accuracy: 0.0,
            ce_loss: 0.0,
        });
    }
    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let mut start = 0usize;
    while start < examples.len() {
        let end = (start + batch_size).min(examples.len());
        let batch: Vec<&LabeledExample> = examples[start..end].iter().collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let images = stack_images(&batch);

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let img = tape.constant(images);
        let own_attrs: Vec<AttributeVector>;
        let attr_input = match &attrs {
            EvalAttrs::Plain => AttrInput::None,
            EvalAttrs::Full => {
                own_attrs = batch.iter().map(|e| e.attributes.clone()).collect();
                AttrInput::Attrs {
                    batch: &own_attrs,
                    bypass: vec![],
                }
            }
            EvalAttrs::Masked { attrs, bypass } => AttrInput::Attrs {
                batch: &attrs[start..end],
                bypass: bypass[start..end].to_vec(),
            },
            EvalAttrs::Bypassed => AttrInput::FullBypass,
        };
        let out = model.forward(&mut tape, &binding, img, attr_input, NormMode::Eval)?;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("non-empty logit row");
            if pred == label {
                correct += 1;
            }
        }
        let ce = tape.cross_entropy(out.logits, &labels)?;
        ce_sum += tape.value(ce).item() * labels.len() as f64;
        start = end;
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / examples.len() as f64,
        ce_loss: ce_sum / examples.len() as f64,
    })
}

// ----------------------------------------------------------------------
// Composite objective
// ----------------------------------------------------------------------

/// The two-network objective: `m * CE(F, labels) + (1 - m) * KL(F || G)`.
///
/// G's logits enter as a constant leaf, so no gradient reaches the
/// supplementary network through this loss. Returns `(loss, ce, kl)` nodes;
/// at `m == 1` the loss IS the cross-entropy node and the KL value is
/// computed on a side branch the backward sweep never visits.
pub fn composite_loss(
    tape: &mut Tape,
    logits_f: TensorId,
    logits_g: &Tensor,
    labels: &[usize],
    m: f64,
) -> Result<(TensorId, TensorId, TensorId)> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("m {} outside [0, 1]", m)));
    }
    let ce = tape.cross_entropy(logits_f, labels)?;
    let g_const = tape.constant(logits_g.clone());
    let kl = tape.kl_divergence(logits_f, g_const)?;
    let loss = if m == 1.0 {
        ce
    } else {
        let ce_w = tape.scale(ce, m)?;
        let kl_w = tape.scale(kl, 1.0 - m)?;
        tape.add(ce_w, kl_w)?
    };
    Ok((loss, ce, kl))
}

// ----------------------------------------------------------------------
// Training loops
// ----------------------------------------------------------------------

pub struct TrainOutcome {
    pub model: MicroResNet,
    pub records: Vec<MetricsRecord>,
    pub checkpoint: Option<PathBuf>,
}

pub struct SupplementaryOutcome {
    pub conditional: MicroResNet,
    pub supplementary: MicroResNet,
    pub records: Vec<MetricsRecord>,
}

struct RunState {
    shuffle_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl RunState {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            shuffle_rng: rng::stream(seed, salt::SHUFFLE),
            mask_rng: rng::stream(seed, salt::TRAIN_MASK),
            order: (0..n).collect(),
        }
    }

    fn shuffle(&mut self) {
        self.order.shuffle(&mut self.shuffle_rng);
    }
}

/// Pre-apply dimension-zero masking to a whole training split; the chosen
/// dimension subset is a function of the run seed.
fn pre_mask_train_attrs(
    train: &[LabeledExample],
    cfg: &ExperimentConfig,
) -> Result<Option<Vec<AttributeVector>>> {
    if cfg.norm_kind != NormKind::Cbn
        || cfg.train_mask_mode != MaskMode::DimensionZero
        || cfg.train_mask_fraction == 0.0
    {
        return Ok(None);
    }
    let attrs: Vec<AttributeVector> = train.iter().map(|e| e.attributes.clone()).collect();
    let (masked, _) = mask_attributes(&attrs, cfg.train_mask_fraction, MaskMode::DimensionZero, cfg.seed)?;
    Ok(Some(masked))
}

/// Train one model on its plain cross-entropy objective.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset, run_id: &str, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.resolved_model(dataset)?;
    let mut model = build_model(&model_cfg, cfg.norm_kind, cfg.seed)?;
    let mut optimizer = Optimizer::new(&model, cfg.optimizer);
    let mut records = Vec::new();
    let mut state = RunState::new(cfg.seed, dataset.train.len());
    let premasked = pre_mask_train_attrs(&dataset.train, cfg)?;

    let eval_attrs = |model: &MicroResNet| match model.norm_kind {
        NormKind::Bn => EvalAttrs::Plain,
        NormKind::Cbn => EvalAttrs::Full,
    };

    let push_eval = |records: &mut Vec<MetricsRecord>,
                     model: &mut MicroResNet,
                     split: Split,
                     name: &str,
                     epoch: usize|
     -> Result<()> {
        let metrics = evaluate(model, dataset.split(split), eval_attrs(model), cfg.batch_size)?;
        records.push(MetricsRecord {
            run_id: run_id.to_string(),
            seed: cfg.seed,
            epoch,
            split: name.to_string(),
            test_mask_fraction: 0.0,
            train_mask_fraction: cfg.train_mask_fraction,
            accuracy: metrics.accuracy,
            ce_loss: metrics.ce_loss,
            kl_loss: 0.0,
        });
        Ok(())
    };

    push_eval(&mut records, &mut model, Split::Val, "val", 0)?;

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch - 1, cfg.epochs);
        state.shuffle();
        let mut train_correct = 0usize;
        let mut train_seen = 0usize;
        let mut ce_sum = 0.0;
        for chunk in state.order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // train-mode normalization needs two elements
            }
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let images = stack_images(&batch);

            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let ids = binding.flat_ids();
            let img = tape.constant(images);
            let own_attrs: Vec<AttributeVector>;
            let attr_input = match cfg.norm_kind {
                NormKind::Bn => AttrInput::None,
                NormKind::Cbn => {
                    own_attrs = match &premasked {
                        Some(masked) => chunk.iter().map(|&i| masked[i].clone()).collect(),
                        None => batch.iter().map(|e| e.attributes.clone()).collect(),
                    };
                    let bypass = if cfg.train_mask_mode == MaskMode::DeltaBypass {
                        bernoulli_bypass(chunk.len(), cfg.train_mask_fraction, &mut state.mask_rng)?
                    } else {
                        vec![false; chunk.len()]
                    };
                    AttrInput::Attrs {
                        batch: &own_attrs,
                        bypass,
                    }
                }
            };
            let out = model.forward(&mut tape, &binding, img, attr_input, NormMode::Train)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                records.push(diverged_record(run_id, cfg, epoch));
                flush_outputs(cfg, &records, None, run_id, out_dir)?;
                return Err(Error::Diverged { epoch, step: train_seen / cfg.batch_size });
            }
            ce_sum += loss_value * labels.len() as f64;
            let logits = tape.value(out.logits);
            let k = logits.shape()[1];
            for (i, &label) in labels.iter().enumerate() {
                let row = &logits.data()[i * k..(i + 1) * k];
                if row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j) == Some(label) {
                    train_correct += 1;
                }
            }
            train_seen += labels.len();
            tape.backward(loss)?;
            optimizer.step(&mut model, &tape, &ids, lr)?;
        }
        records.push(MetricsRecord {
            run_id: run_id.to_string(),
            seed: cfg.seed,
            epoch,
            split: "train".to_string(),
            test_mask_fraction: 0.0,
            train_mask_fraction: cfg.train_mask_fraction,
            accuracy: train_correct as f64 / train_seen.max(1) as f64,
            ce_loss: ce_sum / train_seen.max(1) as f64,
            kl_loss: 0.0,
        });
        push_eval(&mut records, &mut model, Split::Val, "val", epoch)?;
    }

    push_eval(&mut records, &mut model, Split::Test, "test", cfg.epochs)?;
    let checkpoint = flush_outputs(cfg, &records, Some(&model), run_id, out_dir)?;
    Ok(TrainOutcome {
        model,
        records,
        checkpoint,
    })
}

fn diverged_record(run_id: &str, cfg: &ExperimentConfig, epoch: usize) -> MetricsRecord {
    MetricsRecord {
        run_id: run_id.to_string(),
        seed: cfg.seed,
        epoch,
        split: "diverged".to_string(),
        test_mask_fraction: 0.0,
        train_mask_fraction: cfg.train_mask_fraction,
        accuracy: 0.0,
        ce_loss: f64::NAN,
        kl_loss: 0.0,
    }
}

fn flush_outputs(
    cfg: &ExperimentConfig,
    records: &[MetricsRecord],
    model: Option<&MicroResNet>,
    run_id: &str,
    out_dir: Option<&Path>,
) -> Result<Option<PathBuf>> {
    let Some(dir) = out_dir else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(records, &dir.join(format!("{}-metrics.csv", run_id)))?;
    std::fs::write(
        dir.join(format!("{}-config.json", run_id)),
        serde_json::to_string_pretty(cfg)?,
    )?;
    if let Some(model) = model {
        let path = dir.join(format!("{}.ckpt", run_id));
        save_checkpoint(model, &path)?;
        return Ok(Some(path));
    }
    Ok(None)
}

/// Co-train the conditional network F on the composite objective and its
/// plain twin G on ordinary cross-entropy, step for step on the same batches.
/// G's logits feed F's KL term as constants.
pub fn train_with_supplementary(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    run_id: &str,
    out_dir: Option<&Path>,
) -> Result<SupplementaryOutcome> {
    cfg.validate()?;
    if !cfg.supplementary_enabled {
        return Err(Error::InvalidConfig("supplementary_enabled must be set".into()));
    }
    if cfg.norm_kind != NormKind::Cbn {
        return Err(Error::InvalidConfig("the composite objective trains a conditional F".into()));
    }
    let model_cfg = cfg.resolved_model(dataset)?;
    let mut f_model = build_model(&model_cfg, NormKind::Cbn, cfg.seed)?;
    let mut g_model = build_model(&model_cfg, NormKind::Bn, cfg.seed)?;
    let mut f_opt = Optimizer::new(&f_model, cfg.optimizer);
    let mut g_opt = Optimizer::new(&g_model, cfg.optimizer);
    let mut records = Vec::new();
    let mut state = RunState::new(cfg.seed, dataset.train.len());

    let push_eval = |records: &mut Vec<MetricsRecord>,
                         f_model: &mut MicroResNet,
                         g_model: &mut MicroResNet,
                         split: Split,
                         name: &str,
                         epoch: usize,
                         kl: f64|
     -> Result<()> {
        let f = evaluate(f_model, dataset.split(split), EvalAttrs::Full, cfg.batch_size)?;
        let g = evaluate(g_model, dataset.split(split), EvalAttrs::Plain, cfg.batch_size)?;
        records.push(MetricsRecord {
            run_id: format!("{}-F", run_id),
            seed: cfg.seed,
            epoch,
            split: name.to_string(),
            test_mask_fraction: 0.0,
            train_mask_fraction: cfg.train_mask_fraction,
            accuracy: f.accuracy,
            ce_loss: f.ce_loss,
            kl_loss: kl,
        });
        records.push(MetricsRecord {
            run_id: format!("{}-G", run_id),
            seed: cfg.seed,
            epoch,
            split: name.to_string(),
            test_mask_fraction: 0.0,
            train_mask_fraction: cfg.train_mask_fraction,
            accuracy: g.accuracy,
            ce_loss: g.ce_loss,
            kl_loss: 0.0,
        });
        Ok(())
    };

    push_eval(&mut records, &mut f_model, &mut g_model, Split::Val, "val", 0, 0.0)?;

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(cfg.learning_rate, epoch - 1, cfg.epochs);
        state.shuffle();
        let mut kl_sum = 0.0;
        let mut seen = 0usize;
        for chunk in state.order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let images = stack_images(&batch);

            // G: plain cross-entropy on the same batch, current weights.
            let mut g_tape = Tape::new();
            let g_binding = g_model.bind(&mut g_tape);
            let g_ids = g_binding.flat_ids();
            let g_img = g_tape.constant(images.clone());
            let g_out = g_model.forward(&mut g_tape, &g_binding, g_img, AttrInput::None, NormMode::Train)?;
            let g_logits = g_tape.value(g_out.logits).clone();
            let g_loss = g_tape.cross_entropy(g_out.logits, &labels)?;
            if !g_tape.value(g_loss).item().is_finite() {
                records.push(diverged_record(&format!("{}-G", run_id), cfg, epoch));
                return Err(Error::Diverged { epoch, step: seen / cfg.batch_size });
            }

            // F: composite objective with G's logits as constants.
            let mut f_tape = Tape::new();
            let f_binding = f_model.bind(&mut f_tape);
            let f_ids = f_binding.flat_ids();
            let f_img = f_tape.constant(images);
            let own_attrs: Vec<AttributeVector> = batch.iter().map(|e| e.attributes.clone()).collect();
            let bypass = if cfg.train_mask_mode == MaskMode::DeltaBypass {
                bernoulli_bypass(chunk.len(), cfg.train_mask_fraction, &mut state.mask_rng)?
            } else {
                vec![false; chunk.len()]
            };
            let f_out = f_model.forward(
                &mut f_tape,
                &f_binding,
                f_img,
                AttrInput::Attrs {
                    batch: &own_attrs,
                    bypass,
                },
                NormMode::Train,
            )?;
            let (loss, _ce, kl) = composite_loss(&mut f_tape, f_out.logits, &g_logits, &labels, cfg.m)?;
            let loss_value = f_tape.value(loss).item();
            if !loss_value.is_finite() {
                records.push(diverged_record(&format!("{}-F", run_id), cfg, epoch));
                return Err(Error::Diverged { epoch, step: seen / cfg.batch_size });
            }
            kl_sum += f_tape.value(kl).item() * labels.len() as f64;
            seen += labels.len();

            f_tape.backward(loss)?;
            f_opt.step(&mut f_model, &f_tape, &f_ids, lr)?;
            g_tape.backward(g_loss)?;
            g_opt.step(&mut g_model, &g_tape, &g_ids, lr)?;
        }
        let epoch_kl = kl_sum / seen.max(1) as f64;
        push_eval(&mut records, &mut f_model, &mut g_model, Split::Val, "val", epoch, epoch_kl)?;
    }

    push_eval(
        &mut records,
        &mut f_model,
        &mut g_model,
        Split::Test,
        "test",
        cfg.epochs,
        0.0,
    )?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(&records, &dir.join(format!("{}-metrics.csv", run_id)))?;
        std::fs::write(
            dir.join(format!("{}-config.json", run_id)),
            serde_json::to_string_pretty(cfg)?,
        )?;
        save_checkpoint(&f_model, &dir.join(format!("{}-F.ckpt", run_id)))?;
        save_checkpoint(&g_model, &dir.join(format!("{}-G.ckpt", run_id)))?;
    }

    Ok(SupplementaryOutcome {
        conditional: f_model,
        supplementary: g_model,
        records,
    })
}
