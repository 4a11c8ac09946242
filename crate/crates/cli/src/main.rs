//! `cbnlab` — generation, training, sweeps, ablations, saliency, and
//! reporting for the conditional-normalization shortcut-learning lab.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbnlab_core::conditioning::MaskMode;
use cbnlab_core::datagen::{generate, save_dataset, ShortcutDatasetConfig};
use cbnlab_core::diagnostics::{
    self, default_fraction_grid, regime_dataset, regime_experiment, run_ablation_grid,
    run_regime_battery, saliency_compare, test_mask_sweep, train_mask_sweep, BatteryOptions,
    LabResults,
};
use cbnlab_core::digest::config_digest;
use cbnlab_core::gradcheck;
use cbnlab_core::model::NormKind;
use cbnlab_core::trainer::{evaluate, train, train_with_supplementary, EvalAttrs, ExperimentConfig};

/// Precedence everywhere: command-line flags override values from --config,
/// which override built-in defaults.
#[derive(Parser, Debug)]
#[command(
    name = "cbnlab",
    about = "Synthetic-data lab for probing conditional batch normalization",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file (schema depends on the subcommand)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if absent)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Base RNG seed override
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Named regime: cub-like | til-like (ignored when --config gives one)
    #[arg(long, global = true)]
    regime: Option<String>,

    /// Parallelism for independent runs (default: number of cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Seeds per configuration for sweep/ablation subcommands
    #[arg(long, global = true)]
    num_seeds: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and write it as an SCDS file
    GenData,
    /// Train one model (plain, conditional, or conditional + supplementary)
    Train,
    /// Train a conditional model, then sweep test-time attribute masking
    SweepTestMask,
    /// Train one model per train-time masking fraction and seed
    SweepTrainMask,
    /// The one-shot battery: both regimes, all table rows, both sweeps,
    /// convergence and saliency comparisons, full report
    AblationGrid,
    /// Train twin models and write Grad-CAM heatmaps with localization scores
    Saliency,
    /// Re-render the CSV/JSON report from a raw results JSON file
    Report,
    /// Finite-difference checks over every op and the full models
    GradCheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; usage problems are exit 1 here.
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("cbnlab: could not size the thread pool: {}", e);
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cbnlab: {}", e);
            ExitCode::from(2)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn out_dir(cli: &Cli) -> Result<PathBuf, AnyError> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("cbnlab-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn regime_name(cli: &Cli) -> String {
    cli.regime.clone().unwrap_or_else(|| "cub-like".to_string())
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AnyError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), AnyError> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Resolve the experiment config: --config, else regime defaults; then apply
/// flag overrides.
fn experiment_config(cli: &Cli) -> Result<ExperimentConfig, AnyError> {
    let mut cfg: ExperimentConfig = match &cli.config {
        Some(path) => load_json(path)?,
        None => regime_experiment(&regime_name(cli), cli.seed.unwrap_or(0), NormKind::Cbn)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        if let Some(ds) = cfg.dataset_config.as_mut() {
            ds.seed = seed;
        }
    }
    Ok(cfg)
}

fn seeds_from(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

fn run(cli: &Cli) -> Result<(), AnyError> {
    match cli.command {
        Command::GenData => gen_data(cli),
        Command::Train => train_cmd(cli),
        Command::SweepTestMask => sweep_test_mask(cli),
        Command::SweepTrainMask => sweep_train_mask(cli),
        Command::AblationGrid => ablation_grid(cli),
        Command::Saliency => saliency(cli),
        Command::Report => report(cli),
        Command::GradCheck => grad_check(cli),
    }
}

fn gen_data(cli: &Cli) -> Result<(), AnyError> {
    let mut cfg: ShortcutDatasetConfig = match &cli.config {
        Some(path) => load_json(path)?,
        None => regime_dataset(&regime_name(cli), cli.seed.unwrap_or(0))?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = out_dir(cli)?;
    let dataset = generate(&cfg)?;
    save_dataset(&dataset, &dir.join("dataset.scds"))?;
    write_json(&cfg, &dir.join("dataset-config.json"))?;
    let digest = config_digest(&cfg)?;
    println!(
        "wrote {} ({} train / {} val / {} test examples)",
        dir.join("dataset.scds").display(),
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len()
    );
    println!("config digest: {}", digest);
    Ok(())
}

fn train_cmd(cli: &Cli) -> Result<(), AnyError> {
    let cfg = experiment_config(cli)?;
    let dir = out_dir(cli)?;
    let dataset = cfg.dataset()?;
    if cfg.supplementary_enabled {
        let outcome = train_with_supplementary(&cfg, &dataset, "train", Some(&dir))?;
        let last_f = outcome
            .records
            .iter()
            .rev()
            .find(|r| r.split == "test" && r.run_id.ends_with("-F"));
        if let Some(r) = last_f {
            println!("conditional (F) test accuracy: {:.4}", r.accuracy);
        }
    } else {
        let outcome = train(&cfg, &dataset, "train", Some(&dir))?;
        let last = outcome.records.iter().rev().find(|r| r.split == "test");
        if let Some(r) = last {
            println!("test accuracy: {:.4}  ce {:.4}", r.accuracy, r.ce_loss);
        }
        if let Some(ckpt) = &outcome.checkpoint {
            println!("checkpoint: {}", ckpt.display());
        }
    }
    println!("metrics and resolved config written to {}", dir.display());
    Ok(())
}

fn sweep_test_mask(cli: &Cli) -> Result<(), AnyError> {
    let mut cfg = experiment_config(cli)?;
    cfg.norm_kind = NormKind::Cbn;
    let dir = out_dir(cli)?;
    let dataset = cfg.dataset()?;
    let mut outcome = train(&cfg, &dataset, "sweep-base", Some(&dir))?;
    let mask_seeds = seeds_from(cfg.seed, cli.num_seeds.unwrap_or(5));
    let grid = default_fraction_grid();
    let mut results = LabResults {
        config_digest: config_digest(&cfg)?,
        seeds: mask_seeds.clone(),
        ..LabResults::default()
    };
    for mode in [MaskMode::DeltaBypass, MaskMode::DimensionZero] {
        let sweep = test_mask_sweep(&mut outcome.model, &dataset, &grid, mode, &mask_seeds, cfg.batch_size)?;
        for (f, acc) in sweep.fractions.iter().zip(&sweep.mean_accuracy) {
            println!("present {:.1}  mode {:?}  accuracy {:.4}", f, mode, acc);
        }
        results.test_sweeps.push((regime_name(cli), sweep));
    }
    write_json(&cfg, &dir.join("resolved-config.json"))?;
    diagnostics::emit_report(&results, &dir)?;
    println!("sweep CSVs written to {}", dir.display());
    Ok(())
}

fn sweep_train_mask(cli: &Cli) -> Result<(), AnyError> {
    let mut cfg = experiment_config(cli)?;
    cfg.norm_kind = NormKind::Cbn;
    let dir = out_dir(cli)?;
    let seeds = seeds_from(cfg.seed, cli.num_seeds.unwrap_or(5));
    let grid = default_fraction_grid();
    let sweep = train_mask_sweep(&cfg, &grid, &seeds)?;
    for (f, acc) in sweep.fractions.iter().zip(&sweep.mean_accuracy) {
        println!("present {:.1}  accuracy {:.4}", f, acc);
    }
    let rho = diagnostics::spearman(&sweep.fractions, &sweep.mean_accuracy);
    println!("spearman(fraction-present, accuracy) = {:.3}", rho);
    let results = LabResults {
        config_digest: config_digest(&cfg)?,
        seeds,
        train_sweeps: vec![(regime_name(cli), sweep)],
        ..LabResults::default()
    };
    write_json(&cfg, &dir.join("resolved-config.json"))?;
    diagnostics::emit_report(&results, &dir)?;
    println!("sweep CSVs written to {}", dir.display());
    Ok(())
}

fn ablation_grid(cli: &Cli) -> Result<(), AnyError> {
    let dir = out_dir(cli)?;
    let base_seed = cli.seed.unwrap_or(0);
    let seeds = seeds_from(base_seed, cli.num_seeds.unwrap_or(5));
    let mut results = LabResults {
        seeds: seeds.clone(),
        ..LabResults::default()
    };
    let mut batteries = Vec::new();
    for regime in ["cub-like", "til-like"] {
        let ds = regime_dataset(regime, base_seed)?;
        eprintln!("[{}] training battery over {} seeds...", regime, seeds.len());
        let opts = BatteryOptions {
            epochs: diagnostics::regime_epochs(regime),
            ..BatteryOptions::default()
        };
        let battery = run_regime_battery(regime, &ds, &seeds, &opts)?;

        // Convergence rows from the batteries' metric streams.
        let mut records = Vec::new();
        for outcome in battery.cbn.iter().chain(&battery.bn) {
            records.extend(outcome.records.iter().cloned());
        }
        results.convergence.extend(diagnostics::convergence_report(&records, 0.95));
        batteries.push(battery);
    }

    // Test-time masking sweeps over each trained conditional model.
    let grid = default_fraction_grid();
    for battery in batteries.iter_mut() {
        let mut per_seed_curves: Vec<Vec<f64>> = Vec::new();
        for i in 0..battery.seeds.len() {
            let sweep = test_mask_sweep(
                &mut battery.cbn[i].model,
                &battery.datasets[i],
                &grid,
                MaskMode::DeltaBypass,
                &[battery.seeds[i]],
                64,
            )?;
            per_seed_curves.push(sweep.mean_accuracy);
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for fi in 0..grid.len() {
            let col: Vec<f64> = per_seed_curves.iter().map(|c| c[fi]).collect();
            let (m, s) = diagnostics::mean_std(&col);
            mean.push(m);
            std.push(s);
        }
        results.test_sweeps.push((
            battery.regime.clone(),
            diagnostics::SweepResult {
                fractions: grid.clone(),
                mean_accuracy: mean,
                std_accuracy: std,
                num_seeds: battery.seeds.len(),
                mask_mode: MaskMode::DeltaBypass,
            },
        ));
    }

    // Train-time masking sweep on the fast regime.
    eprintln!("[cub-like] train-mask sweep...");
    let sweep_cfg = {
        let mut cfg = regime_experiment("cub-like", base_seed, NormKind::Cbn)?;
        if let Some(ds) = cfg.dataset_config.as_mut() {
            ds.samples_per_class = 16;
        }
        cfg.epochs = 8;
        cfg
    };
    results
        .train_sweeps
        .push(("cub-like".into(), train_mask_sweep(&sweep_cfg, &grid, &seeds)?));

    // Saliency comparison on the shortcut regime.
    eprintln!("[cub-like] saliency comparison...");
    {
        let battery = &mut batteries[0];
        let dataset = &battery.datasets[0];
        let provenance = dataset.provenance.as_ref().expect("generated dataset");
        let examples: Vec<_> = dataset.test.iter().take(20).cloned().collect();
        let boxes: Vec<_> = examples
            .iter()
            .map(|e| provenance.blobs[e.label].bounding_box(dataset.height))
            .collect();
        let (cbn_model, bn_model) = {
            let (a, b) = (&mut battery.cbn[0].model, &mut battery.bn[0].model);
            (a, b)
        };
        let mut entries = vec![
            ("cbn".to_string(), cbn_model, false),
            ("bn".to_string(), bn_model, false),
        ];
        let mut scored = saliency_compare(&mut entries, &examples, &boxes, Some(&dir.join("heatmaps")))?;
        results.saliency.append(&mut scored);
    }

    results.ablation = run_ablation_grid(&mut batteries, 64)?;
    results.config_digest = config_digest(&seeds)?;

    for row in &results.ablation.rows {
        println!(
            "{:<10} {:<22} / {:<22} {:.4} ± {:.4}",
            row.regime, row.training_model, row.testing_model, row.mean_accuracy, row.std_accuracy
        );
    }
    write_json(&results, &dir.join("raw_results.json"))?;
    diagnostics::emit_report(&results, &dir)?;
    println!("full report written to {}", dir.display());
    Ok(())
}

fn saliency(cli: &Cli) -> Result<(), AnyError> {
    let cfg = experiment_config(cli)?;
    let dir = out_dir(cli)?;
    let dataset = cfg.dataset()?;
    let provenance = dataset
        .provenance
        .as_ref()
        .ok_or("saliency needs a generated dataset (use dataset_config, not dataset_path)")?;
    let mut cbn_cfg = cfg.clone();
    cbn_cfg.norm_kind = NormKind::Cbn;
    let mut bn_cfg = cfg.clone();
    bn_cfg.norm_kind = NormKind::Bn;
    let mut cbn = train(&cbn_cfg, &dataset, "saliency-cbn", None)?;
    let mut bn = train(&bn_cfg, &dataset, "saliency-bn", None)?;

    let examples: Vec<_> = dataset.test.iter().take(20).cloned().collect();
    let boxes: Vec<_> = examples
        .iter()
        .map(|e| provenance.blobs[e.label].bounding_box(dataset.height))
        .collect();
    let mut second_cbn = cbn.model.clone();
    let mut entries = vec![
        ("cbn".to_string(), &mut cbn.model, false),
        ("cbn-bypassed".to_string(), &mut second_cbn, true),
        ("bn".to_string(), &mut bn.model, false),
    ];
    let scores = saliency_compare(&mut entries, &examples, &boxes, Some(&dir.join("heatmaps")))?;
    for s in &scores {
        println!(
            "{:<14} mean localization {:.4}  ({} examples, {} zero heatmaps)",
            s.model, s.mean_score, s.num_examples, s.zero_heatmaps
        );
    }
    let results = LabResults {
        config_digest: config_digest(&cfg)?,
        seeds: vec![cfg.seed],
        saliency: scores,
        ..LabResults::default()
    };
    write_json(&cfg, &dir.join("resolved-config.json"))?;
    diagnostics::emit_report(&results, &dir)?;

    // Accuracy context for the heatmaps.
    let cbn_acc = evaluate(&mut cbn.model, &dataset.test, EvalAttrs::Full, cfg.batch_size)?;
    let bn_acc = evaluate(&mut bn.model, &dataset.test, EvalAttrs::Plain, cfg.batch_size)?;
    println!("cbn test accuracy {:.4}, bn test accuracy {:.4}", cbn_acc.accuracy, bn_acc.accuracy);
    Ok(())
}

fn report(cli: &Cli) -> Result<(), AnyError> {
    let path = cli
        .config
        .as_ref()
        .ok_or("report needs --config pointing at a raw_results.json")?;
    let results: LabResults = load_json(path)?;
    let dir = out_dir(cli)?;
    diagnostics::emit_report(&results, &dir)?;
    println!("report re-rendered into {}", dir.display());
    Ok(())
}

fn grad_check(cli: &Cli) -> Result<(), AnyError> {
    let trials = cli.num_seeds.unwrap_or(20);
    let tol = 1e-4;
    let reports = gradcheck::suite::run_all(trials, tol)?;
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:<26} max_rel_error {:>12.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if !all_passed {
        return Err("gradient check failed".into());
    }
    println!("all gradient checks passed at tolerance {:.0e}", tol);
    Ok(())
}
