//! Scratch calibration sweep over regime knobs (temporary dev tool).

use std::time::Instant;

use cbnlab_core::datagen::{zero_images, ShortcutDatasetConfig};
use cbnlab_core::model::NormKind;
use cbnlab_core::trainer::{evaluate, train, EvalAttrs, ExperimentConfig};

fn probe(tag: &str, ds: ShortcutDatasetConfig, epochs: usize, seeds: &[u64]) {
    let mut agg = [0.0f64; 4]; // bn, cbn, bypass, novis
    let t0 = Instant::now();
    for &seed in seeds {
        let mut ds = ds.clone();
        ds.seed = seed;
        let cfg = ExperimentConfig {
            dataset_config: Some(ds.clone()),
            norm_kind: NormKind::Cbn,
            epochs,
            seed,
            ..ExperimentConfig::default()
        };
        let dataset = cfg.dataset().unwrap();
        let mut cbn = train(&cfg, &dataset, "cbn", None).unwrap();
        let bn_cfg = ExperimentConfig {
            norm_kind: NormKind::Bn,
            ..cfg.clone()
        };
        let mut bn = train(&bn_cfg, &dataset, "bn", None).unwrap();
        let zeroed = zero_images(&dataset);
        let mut novis = train(&cfg, &zeroed, "novis", None).unwrap();

        agg[0] += evaluate(&mut bn.model, &dataset.test, EvalAttrs::Plain, 64).unwrap().accuracy;
        agg[1] += evaluate(&mut cbn.model, &dataset.test, EvalAttrs::Full, 64).unwrap().accuracy;
        agg[2] += evaluate(&mut cbn.model, &dataset.test, EvalAttrs::Bypassed, 64).unwrap().accuracy;
        agg[3] += evaluate(&mut novis.model, &zeroed.test, EvalAttrs::Full, 64).unwrap().accuracy;
    }
    let n = seeds.len() as f64;
    println!(
        "{:<26} bn {:.3}  cbn {:.3}  bypass {:.3}  novis {:.3}   ({:.1}s/seed-triple)",
        tag,
        agg[0] / n,
        agg[1] / n,
        agg[2] / n,
        agg[3] / n,
        t0.elapsed().as_secs_f64() / n
    );
}

fn main() {
    let seeds = [0u64, 1, 2];

    let mut til = ShortcutDatasetConfig::til_like(0);

    til.visual_noise_sigma = 0.50;
    probe("til sig.50 e20", til.clone(), 20, &seeds);

    til.visual_noise_sigma = 0.50;
    probe("til sig.50 e18", til.clone(), 18, &seeds);

    til.visual_noise_sigma = 0.48;
    til.rho = 0.68;
    probe("til sig.48 rho.68 e18", til.clone(), 18, &seeds);
}
