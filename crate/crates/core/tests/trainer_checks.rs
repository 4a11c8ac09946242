//! Trainer contracts: optimizer arithmetic, composite-objective identities,
//! bypass equivalence, and seed determinism.

use cbnlab_core::conditioning::{AttributeKind, MaskMode};
use cbnlab_core::datagen::ShortcutDatasetConfig;
use cbnlab_core::error::Error;
use cbnlab_core::model::{BackboneConfig, NormKind};
use cbnlab_core::tape::Tape;
use cbnlab_core::tensor::Tensor;
use cbnlab_core::trainer::{
    composite_loss, evaluate, sgd_step, train, train_with_supplementary, EvalAttrs, ExperimentConfig,
    OptimizerKind, METRICS_CSV_HEADER,
};

fn tiny_dataset_cfg(seed: u64) -> ShortcutDatasetConfig {
    ShortcutDatasetConfig {
        num_classes: 3,
        attribute_dim: 6,
        rho: 1.0,
        image_size: 7,
        visual_noise_sigma: 0.1,
        attribute_kind: AttributeKind::Binary,
        samples_per_class: 8,
        seed,
    }
}

fn tiny_experiment(norm_kind: NormKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset_config: Some(tiny_dataset_cfg(seed)),
        model: BackboneConfig {
            image_channels: 3,
            num_classes: 3,
            attr_dim: 6,
            stem_channels: 4,
            stage_channels: vec![4, 6],
            aux_hidden: 8,
            aux_shared_trunk: true,
            conditioned_layers: None,
        },
        norm_kind,
        epochs: 2,
        batch_size: 8,
        learning_rate: 0.05,
        optimizer: OptimizerKind::SgdMomentum,
        seed,
        num_runs: 1,
        ..ExperimentConfig::default()
    }
}

#[test]
fn sgd_without_momentum_subtracts_the_gradient() {
    let mut p = vec![1.0, 2.0];
    let mut v = vec![0.0, 0.0];
    sgd_step(&mut p, &[0.5, -1.0], &mut v, 1.0, 0.0).unwrap();
    assert_eq!(p, vec![0.5, 3.0]);
}

#[test]
fn sgd_with_zero_learning_rate_changes_nothing() {
    let mut p = vec![1.0, 2.0];
    let mut v = vec![0.3, 0.0];
    sgd_step(&mut p, &[9.0, 9.0], &mut v, 0.0, 0.9).unwrap();
    assert_eq!(p, vec![1.0, 2.0]);
}

#[test]
fn two_momentum_steps_match_the_hand_unrolled_recurrence() {
    // Quadratic f(x) = x^2 / 2, grad = x, momentum 0.9, lr 0.1, x0 = 1.
    let mut x = vec![1.0];
    let mut v = vec![0.0];
    let (lr, mu) = (0.1, 0.9);
    // step 1: v = 1.0, x = 1 - 0.1 = 0.9
    sgd_step(&mut x, &[1.0], &mut v, lr, mu).unwrap();
    assert!((x[0] - 0.9).abs() < 1e-15);
    // step 2: v = 0.9*1.0 + 0.9 = 1.8, x = 0.9 - 0.18 = 0.72
    let g = x[0];
    sgd_step(&mut x, &[g], &mut v, lr, mu).unwrap();
    assert!((x[0] - 0.72).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_aborts_the_step() {
    let mut p = vec![1.0];
    let mut v = vec![0.0];
    assert!(matches!(
        sgd_step(&mut p, &[f64::NAN], &mut v, 0.1, 0.9),
        Err(Error::NonFinite { .. })
    ));
    assert_eq!(p, vec![1.0]);
}

#[test]
fn composite_loss_with_m_one_is_exactly_cross_entropy() {
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::new(&[2, 3], vec![0.3, -0.2, 1.0, 0.0, 0.5, -0.5]).unwrap());
    let g = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let labels = [2usize, 1];
    let (loss, ce, kl) = composite_loss(&mut tape, f, &g, &labels, 1.0).unwrap();
    assert_eq!(tape.value(loss).item().to_bits(), tape.value(ce).item().to_bits());
    assert!(tape.value(kl).item() >= 0.0);
}

#[test]
fn composite_loss_kl_term_vanishes_when_logits_agree() {
    let mut tape = Tape::new();
    let values = vec![0.4, -1.0, 0.2, 0.9, 0.1, -0.3];
    let f = tape.leaf(Tensor::new(&[2, 3], values.clone()).unwrap());
    let g = Tensor::new(&[2, 3], values).unwrap();
    let labels = [0usize, 2];
    let m = 0.7;
    let (loss, ce, kl) = composite_loss(&mut tape, f, &g, &labels, m).unwrap();
    assert!(tape.value(kl).item().abs() < 1e-15);
    assert!((tape.value(loss).item() - m * tape.value(ce).item()).abs() < 1e-15);
}

#[test]
fn composite_loss_matches_two_class_hand_computation() {
    // F logits [ln 2, 0] -> p = (2/3, 1/3); G logits [0, 0] -> q = (1/2, 1/2).
    let mut tape = Tape::new();
    let f = tape.leaf(Tensor::new(&[1, 2], vec![2.0_f64.ln(), 0.0]).unwrap());
    let g = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
    let labels = [0usize];
    let m = 0.9;
    let (loss, _, _) = composite_loss(&mut tape, f, &g, &labels, m).unwrap();
    let ce = -(2.0_f64 / 3.0).ln();
    let kl = (2.0 / 3.0) * ((2.0_f64 / 3.0) / 0.5).ln() + (1.0 / 3.0) * ((1.0_f64 / 3.0) / 0.5).ln();
    let expect = m * ce + (1.0 - m) * kl;
    assert!((tape.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn composite_loss_sends_no_gradient_into_the_supplementary_logits() {
    // The G side enters as a constant, so only F's leaf gets a gradient.
    let mut tape = Tape::new();
    let f_t = Tensor::new(&[1, 2], vec![0.2, -0.2]).unwrap().with_grad();
    let f = tape.leaf(f_t);
    let g = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let (loss, _, _) = composite_loss(&mut tape, f, &g, &[0], 0.5).unwrap();
    let report = tape.backward(loss).unwrap();
    assert!(report.disconnected.is_empty());
    assert!(tape.grad(f).unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn zero_epochs_returns_the_initialized_model_at_chance() {
    let mut cfg = tiny_experiment(NormKind::Bn, 5);
    cfg.epochs = 0;
    let dataset = cfg.dataset().unwrap();
    let outcome = train(&cfg, &dataset, "probe", None).unwrap();

    let fresh = cbnlab_core::model::build_model(&cfg.model, NormKind::Bn, cfg.seed).unwrap();
    let mut a = Vec::new();
    outcome.model.for_each_param(&mut |_, t| a.extend(t.data().iter().map(|v| v.to_bits())));
    let mut b = Vec::new();
    fresh.for_each_param(&mut |_, t| b.extend(t.data().iter().map(|v| v.to_bits())));
    assert_eq!(a, b);

    let val = outcome.records.iter().find(|r| r.split == "val").unwrap();
    assert!((val.accuracy - 1.0 / 3.0).abs() < 0.35, "val accuracy {}", val.accuracy);
}

#[test]
fn fully_masked_conditional_training_reproduces_the_plain_run_bit_for_bit() {
    let seed = 11;
    let mut cbn_cfg = tiny_experiment(NormKind::Cbn, seed);
    cbn_cfg.train_mask_fraction = 1.0;
    cbn_cfg.train_mask_mode = MaskMode::DeltaBypass;
    let bn_cfg = tiny_experiment(NormKind::Bn, seed);

    let dataset = bn_cfg.dataset().unwrap();
    let cbn = train(&cbn_cfg, &dataset, "cbn", None).unwrap();
    let bn = train(&bn_cfg, &dataset, "bn", None).unwrap();

    let mut cbn_params = std::collections::BTreeMap::new();
    cbn.model
        .for_each_param(&mut |n, t| drop(cbn_params.insert(n, t.data().to_vec())));
    let mut bn_params = std::collections::BTreeMap::new();
    bn.model
        .for_each_param(&mut |n, t| drop(bn_params.insert(n, t.data().to_vec())));

    for (name, data) in &bn_params {
        let other = &cbn_params[name];
        assert_eq!(
            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            other.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            "weights diverged at {}",
            name
        );
    }
}

#[test]
fn same_seed_and_config_yield_identical_metric_streams() {
    let cfg = tiny_experiment(NormKind::Cbn, 21);
    let dataset = cfg.dataset().unwrap();
    let a = train(&cfg, &dataset, "r", None).unwrap();
    let b = train(&cfg, &dataset, "r", None).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn supplementary_with_m_one_matches_plain_conditional_training() {
    let seed = 31;
    let mut supp_cfg = tiny_experiment(NormKind::Cbn, seed);
    supp_cfg.supplementary_enabled = true;
    supp_cfg.m = 1.0;
    let plain_cfg = tiny_experiment(NormKind::Cbn, seed);

    let dataset = plain_cfg.dataset().unwrap();
    let supp = train_with_supplementary(&supp_cfg, &dataset, "s", None).unwrap();
    let plain = train(&plain_cfg, &dataset, "p", None).unwrap();

    let mut a = Vec::new();
    supp.conditional
        .for_each_param(&mut |_, t| a.extend(t.data().iter().map(|v| v.to_bits())));
    let mut b = Vec::new();
    plain
        .model
        .for_each_param(&mut |_, t| b.extend(t.data().iter().map(|v| v.to_bits())));
    assert_eq!(a, b);
}

#[test]
fn supplementary_kl_records_are_nonnegative() {
    let mut cfg = tiny_experiment(NormKind::Cbn, 41);
    cfg.supplementary_enabled = true;
    cfg.m = 0.9;
    let dataset = cfg.dataset().unwrap();
    let outcome = train_with_supplementary(&cfg, &dataset, "s", None).unwrap();
    for r in &outcome.records {
        assert!(r.kl_loss >= -1e-12, "kl {} at epoch {}", r.kl_loss, r.epoch);
    }
}

#[test]
fn metrics_csv_uses_the_exact_header_and_roundtrips_floats() {
    let cfg = tiny_experiment(NormKind::Bn, 51);
    let dataset = cfg.dataset().unwrap();
    let outcome = train(&cfg, &dataset, "hdr", None).unwrap();
    let csv = cbnlab_core::trainer::metrics_to_csv(&outcome.records);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
    let first = lines.next().unwrap();
    let fields: Vec<&str> = first.split(',').collect();
    assert_eq!(fields.len(), 9);
    // shortest-roundtrip float formatting: parsing back is exact
    let acc: f64 = fields[6].parse().unwrap();
    assert_eq!(acc, outcome.records[0].accuracy);
}

#[test]
fn dataset_source_must_be_exactly_one_of_config_or_path() {
    let mut cfg = tiny_experiment(NormKind::Bn, 61);
    cfg.dataset_path = Some("/tmp/nope.scds".into());
    assert!(cfg.validate().is_err());
    cfg.dataset_config = None;
    cfg.dataset_path = None;
    assert!(cfg.validate().is_err());
}

#[test]
fn invalid_m_is_rejected() {
    let mut cfg = tiny_experiment(NormKind::Cbn, 71);
    cfg.m = 1.5;
    assert!(cfg.validate().is_err());
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let cfg = tiny_experiment(NormKind::Cbn, 81);
    let dataset = cfg.dataset().unwrap();
    let mut outcome = train(&cfg, &dataset, "e", None).unwrap();
    let a = evaluate(&mut outcome.model, &dataset.test, EvalAttrs::Full, 8).unwrap();
    let b = evaluate(&mut outcome.model, &dataset.test, EvalAttrs::Full, 8).unwrap();
    assert_eq!(a, b);
    let bypass = evaluate(&mut outcome.model, &dataset.test, EvalAttrs::Bypassed, 8).unwrap();
    assert!(bypass.accuracy <= 1.0);
}
