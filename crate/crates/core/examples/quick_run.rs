//! Train the plain and conditional variants on one seed of each synthetic
//! regime and print the headline numbers. Handy smoke check:
//!
//! ```text
//! cargo run --release -p cbnlab-core --example quick_run
//! ```

use std::time::Instant;

use cbnlab_core::datagen::{zero_images, ShortcutDatasetConfig};
use cbnlab_core::model::NormKind;
use cbnlab_core::trainer::{evaluate, train, EvalAttrs, ExperimentConfig};

fn main() {
    for (name, ds_cfg) in [
        ("cub-like", ShortcutDatasetConfig::cub_like(7)),
        ("til-like", ShortcutDatasetConfig::til_like(7)),
    ] {
        println!("=== {} regime ===", name);
        let cfg = ExperimentConfig {
            dataset_config: Some(ds_cfg),
            norm_kind: NormKind::Cbn,
            seed: 7,
            ..ExperimentConfig::default()
        };
        let dataset = cfg.dataset().expect("generate dataset");
        let chance = 1.0 / dataset.num_classes as f64;

        let t0 = Instant::now();
        let mut cbn = train(&cfg, &dataset, "cbn", None).expect("conditional run");
        let cbn_time = t0.elapsed();
        let t0 = Instant::now();
        let bn_cfg = ExperimentConfig {
            norm_kind: NormKind::Bn,
            ..cfg.clone()
        };
        let mut bn = train(&bn_cfg, &dataset, "bn", None).expect("plain run");
        let bn_time = t0.elapsed();

        let cbn_full = evaluate(&mut cbn.model, &dataset.test, EvalAttrs::Full, 64).unwrap();
        let cbn_bypass = evaluate(&mut cbn.model, &dataset.test, EvalAttrs::Bypassed, 64).unwrap();
        let bn_acc = evaluate(&mut bn.model, &dataset.test, EvalAttrs::Plain, 64).unwrap();

        let zeroed = zero_images(&dataset);
        let mut novis = train(&cfg, &zeroed, "cbn-novis", None).expect("no-visual run");
        let novis_acc = evaluate(&mut novis.model, &zeroed.test, EvalAttrs::Full, 64).unwrap();

        println!("  chance                 {:.3}", chance);
        println!("  bn  test accuracy      {:.3}   ({:.1?})", bn_acc.accuracy, bn_time);
        println!("  cbn test accuracy      {:.3}   ({:.1?})", cbn_full.accuracy, cbn_time);
        println!("  cbn bypassed accuracy  {:.3}", cbn_bypass.accuracy);
        println!("  cbn no-visual accuracy {:.3}", novis_acc.accuracy);
        let val_curve: Vec<(usize, f64)> = cbn
            .records
            .iter()
            .filter(|r| r.split == "val" && r.run_id == "cbn")
            .map(|r| (r.epoch, r.accuracy))
            .collect();
        println!("  cbn val curve          {:?}", &val_curve[..val_curve.len().min(8)]);
        let bn_curve: Vec<(usize, f64)> = bn
            .records
            .iter()
            .filter(|r| r.split == "val")
            .map(|r| (r.epoch, r.accuracy))
            .collect();
        println!("  bn  val curve          {:?}", &bn_curve[..bn_curve.len().min(8)]);
    }
}
