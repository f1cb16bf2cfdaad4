//! The six subcommands. Each resolves an effective config (defaults +
//! config file + overrides + --seed), writes that config into its output
//! directory, and otherwise just drives the library.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gated_mip_core::config::ExperimentConfig;
use gated_mip_core::evaluation::{
    self, ablation_cells, misalignment_cells, scaling_cells, CellOutcome, PoolMode, ResultRow,
    SweepCell,
};
use gated_mip_core::mip::{self, BoundCheckReport};
use gated_mip_core::model::Model;
use gated_mip_core::synthetic_xnor::{self, Dataset, SplitIndices};
use gated_mip_core::{trainer, Error, Result};

use crate::args::{self, Args};
use crate::files;

const USAGE: &str = "\
gated-mip: train and probe gated multilinear inner product models

usage: gated-mip <command> [flags] [--key=value ...]

commands:
  generate        write a synthetic dataset (binary + csv)
  train           train a model, keeping the best validation checkpoint
  evaluate        score test-set retrieval for a saved checkpoint
  diagnostics     dump gate statistics for a saved checkpoint
  sweep <kind>    run a grid: misalignment | scaling | ablation
  verify-bounds   check the score-perturbation bounds numerically

flags:
  --config PATH      flat key = value config file
  --seed N           root seed (wins over the config file)
  --out DIR          output directory (default <out_dir>/<run_name>)
  --checkpoint PATH  parameter table for evaluate / diagnostics
  --trials N         verify-bounds trial count (default 1000)
  --resume           skip sweep cells that already produced a row
  --key=value        override any config key (also --key value)

environment:
  GATED_MIP_THREADS  caps worker threads (default: all cores)

exit codes: 0 ok, 1 config or data error, 2 numeric or training failure
";

pub fn run(argv: &[String]) -> Result<()> {
    let args = args::parse(argv)?;
    if args.help || args.command == "help" {
        print!("{USAGE}");
        return Ok(());
    }
    match args.command.as_str() {
        "generate" => cmd_generate(&args),
        "train" => cmd_train(&args),
        "evaluate" => cmd_evaluate(&args),
        "diagnostics" => cmd_diagnostics(&args),
        "sweep" => cmd_sweep(&args),
        "verify-bounds" => cmd_verify_bounds(&args),
        other => Err(Error::config(format!("unknown command '{other}'; try --help"))),
    }
}

/// defaults -> config file -> --key overrides (command-line order) ->
/// --seed, then finalize.
fn load_config(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in &args.overrides {
        cfg.apply(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn out_dir(args: &Args, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = match &args.out {
        Some(o) => PathBuf::from(o),
        None => Path::new(&cfg.out_dir).join(&cfg.run_name),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn dataset_and_splits(cfg: &ExperimentConfig) -> Result<(Dataset, SplitIndices)> {
    let data = synthetic_xnor::generate(&cfg.data)?;
    let splits = synthetic_xnor::split(&data, cfg.split_fractions(), cfg.seed)?;
    Ok((data, splits))
}

/// Sampled pools cannot exceed the split; clamp like the trainer does for
/// its validation pools.
fn test_pool(cfg: &ExperimentConfig, test_len: usize) -> PoolMode {
    match cfg.eval_pool() {
        PoolMode::Sampled(k) => PoolMode::Sampled(k.min(test_len.saturating_sub(1))),
        PoolMode::Full => PoolMode::Full,
    }
}

fn require_checkpoint(args: &Args) -> Result<&str> {
    args.checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --checkpoint PATH"))
}

fn cmd_generate(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(args, &cfg)?;
    let data = synthetic_xnor::generate(&cfg.data)?;
    files::write_atomic(&dir.join("config.txt"), cfg.to_flat().as_bytes())?;
    files::save_atomic(&dir.join("dataset.bin"), |p| synthetic_xnor::save_binary(&data, p))?;
    files::save_atomic(&dir.join("dataset.csv"), |p| synthetic_xnor::save_csv(&data, p))?;
    println!(
        "generated {} samples (p = {}) -> {}",
        data.len(),
        cfg.data.misalignment_prob,
        dir.display()
    );
    Ok(())
}

fn cmd_train(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(args, &cfg)?;
    let (data, splits) = dataset_and_splits(&cfg)?;
    let started = Instant::now();
    let outcome = trainer::train(&cfg.model, &cfg.objective, &cfg.train, &data, &splits)?;
    files::write_atomic(&dir.join("config.txt"), cfg.to_flat().as_bytes())?;
    files::write_atomic(&dir.join("metrics.csv"), outcome.history.to_csv().as_bytes())?;
    files::save_atomic(&dir.join("checkpoint.bin"), |p| outcome.model.save(p))?;
    let best = match outcome.best_val_top1 {
        Some(v) => format!("{v:.6}"),
        None => "none".into(),
    };
    println!(
        "trained {} for {} steps in {:.1}s; best val top1 {} -> {}",
        cfg.model.method.as_str(),
        outcome.steps,
        started.elapsed().as_secs_f64(),
        best,
        dir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let ckpt = require_checkpoint(args)?;
    let dir = out_dir(args, &cfg)?;
    let (data, splits) = dataset_and_splits(&cfg)?;
    let model = Model::load(&cfg.model, cfg.train.lr_gate_mul, Path::new(ckpt))?;
    let started = Instant::now();
    let pool = test_pool(&cfg, splits.test.len());
    let report = evaluation::top1_retrieval(&model, &data, &splits.test, pool, cfg.seed)?;
    let row = ResultRow {
        method: cfg.model.method.as_str().into(),
        p: cfg.data.misalignment_prob,
        batch_size: cfg.train.batch_size,
        num_negatives: cfg.objective.num_negatives,
        seed: cfg.seed,
        top1: report.top1_accuracy,
        pool: report.pool.as_str().into(),
        runtime_s: started.elapsed().as_secs_f64(),
    };
    let rows = [row];
    files::write_atomic(&dir.join("config.txt"), cfg.to_flat().as_bytes())?;
    files::write_atomic(&dir.join("results.csv"), evaluation::results_csv(&rows).as_bytes())?;
    files::write_atomic(&dir.join("results.json"), evaluation::results_json(&rows).as_bytes())?;
    println!(
        "top1 {:.6} over {} queries (pool {}) -> {}",
        report.top1_accuracy,
        report.num_queries,
        report.candidate_pool_size,
        dir.display()
    );
    Ok(())
}

fn cmd_diagnostics(args: &Args) -> Result<()> {
    let cfg = load_config(args)?;
    let ckpt = require_checkpoint(args)?;
    let dir = out_dir(args, &cfg)?;
    let (data, splits) = dataset_and_splits(&cfg)?;
    let model = Model::load(&cfg.model, cfg.train.lr_gate_mul, Path::new(ckpt))?;
    let diag = evaluation::gate_diagnostics(&model, &data, &splits.test)?;
    files::write_atomic(&dir.join("config.txt"), cfg.to_flat().as_bytes())?;
    files::write_atomic(&dir.join("diagnostics.csv"), diag.to_csv().as_bytes())?;
    println!("gate alpha {:.4} over {} tuples", diag.alpha, diag.num_samples);
    for m in &diag.per_modality {
        println!(
            "modality {}: mean weight {:.4}, cos(gated, original) {:.4}",
            m.modality, m.mean_weight, m.mean_cos_gated_original
        );
    }
    for b in &diag.weight_deltas {
        println!(
            "misaligned modality {}: weight delta {:+.4} +- {:.4} (n = {})",
            b.misaligned_modality, b.mean, b.stderr, b.count
        );
    }
    println!("wrote {}", dir.join("diagnostics.csv").display());
    Ok(())
}

fn sweep_cells(kind: &str, cfg: &ExperimentConfig) -> Result<Vec<SweepCell>> {
    match kind {
        "misalignment" => misalignment_cells(cfg),
        "scaling" => scaling_cells(cfg),
        "ablation" => ablation_cells(cfg),
        other => Err(Error::config(format!(
            "unknown sweep kind '{other}'; expected misalignment, scaling, or ablation"
        ))),
    }
}

fn write_cell_outputs(dir: &Path, cell: &SweepCell, out: &CellOutcome) -> Result<()> {
    let cdir = dir.join("cells").join(&cell.label);
    fs::create_dir_all(&cdir)?;
    files::write_atomic(&cdir.join("config.txt"), out.effective_config.as_bytes())?;
    files::write_atomic(&cdir.join("metrics.csv"), out.metrics_csv.as_bytes())?;
    let row = [out.row.clone()];
    files::write_atomic(&cdir.join("row.csv"), evaluation::results_csv(&row).as_bytes())?;
    if let Some(diag) = &out.diagnostics {
        files::write_atomic(&cdir.join("diagnostics.csv"), diag.to_csv().as_bytes())?;
    }
    Ok(())
}

fn finished_row(dir: &Path, cell: &SweepCell) -> Option<ResultRow> {
    let path = dir.join("cells").join(&cell.label).join("row.csv");
    let text = fs::read_to_string(path).ok()?;
    evaluation::parse_results_csv(&text).ok()?.into_iter().next()
}

fn cmd_sweep(args: &Args) -> Result<()> {
    let kind = args
        .positional
        .first()
        .ok_or_else(|| Error::config("sweep needs a kind: misalignment | scaling | ablation"))?
        .clone();
    let cfg = load_config(args)?;
    let cells = sweep_cells(&kind, &cfg)?;
    let dir = out_dir(args, &cfg)?;
    files::write_atomic(&dir.join("config.txt"), cfg.to_flat().as_bytes())?;

    let mut failures: Vec<(String, String, i32)> = Vec::new();
    let (rows, _) = evaluation::run_sweep(
        &cells,
        |cell| {
            if !args.resume {
                return None;
            }
            let row = finished_row(&dir, cell)?;
            println!("cell {}: finished earlier, skipping", cell.label);
            Some(row)
        },
        |cell, result| match result {
            Ok(out) => {
                if let Err(e) = write_cell_outputs(&dir, cell, out) {
                    eprintln!("cell {}: could not write outputs: {e}", cell.label);
                    failures.push((cell.label.clone(), e.to_string(), e.exit_code()));
                } else {
                    println!(
                        "cell {}: top1 {:.4} in {:.1}s",
                        cell.label, out.row.top1, out.row.runtime_s
                    );
                }
            }
            Err(e) => {
                eprintln!("cell {}: {e}", cell.label);
                failures.push((cell.label.clone(), e.to_string(), e.exit_code()));
            }
        },
    );

    files::write_atomic(&dir.join("results.csv"), evaluation::results_csv(&rows).as_bytes())?;
    files::write_atomic(&dir.join("results.json"), evaluation::results_json(&rows).as_bytes())?;
    println!(
        "sweep {kind}: {} of {} cells succeeded -> {}",
        rows.len(),
        cells.len(),
        dir.display()
    );
    if let Some((label, message, _)) = failures.first() {
        let summary = format!("{} sweep cells failed; first: {label}: {message}", failures.len());
        // a single config mistake should exit 1, anything numeric exits 2
        return if failures.iter().all(|(_, _, code)| *code == 1) {
            Err(Error::config(summary))
        } else {
            Err(Error::numeric(summary))
        };
    }
    Ok(())
}

fn report_text(report: &BoundCheckReport) -> String {
    let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
    let mut out = String::new();
    out.push_str(&format!("trials: {}\n", report.trials));
    out.push_str(&format!(
        "closed-form shift vs brute force: max rel err {:.3e} (tol {:.0e}) [{}]\n",
        report.max_identity_rel_err,
        mip::IDENTITY_TOL,
        mark(report.max_identity_rel_err <= mip::IDENTITY_TOL)
    ));
    out.push_str(&format!(
        "cauchy-schwarz bound violations: {} [{}]\n",
        report.bound_violations,
        mark(report.bound_violations == 0)
    ));
    out.push_str(&format!(
        "aligned-perturbation tightness: max gap {:.3e} (tol {:.0e}) [{}]\n",
        report.max_aligned_gap,
        mip::ALIGNED_GAP_TOL,
        mark(report.max_aligned_gap <= mip::ALIGNED_GAP_TOL)
    ));
    out.push_str(&format!(
        "gate-strength linearity: max rel err {:.3e} (tol {:.0e}) [{}]\n",
        report.max_beta_linearity_err,
        mip::BETA_LINEARITY_TOL,
        mark(report.max_beta_linearity_err <= mip::BETA_LINEARITY_TOL)
    ));
    out.push_str(&format!(
        "gated shift identity: max rel err {:.3e} (tol {:.0e}) [{}]\n",
        report.max_gated_identity_rel_err,
        mip::GATED_IDENTITY_TOL,
        mark(report.max_gated_identity_rel_err <= mip::GATED_IDENTITY_TOL)
    ));
    out.push_str(&format!(
        "gated bound violations: {} [{}]\n",
        report.gated_bound_violations,
        mark(report.gated_bound_violations == 0)
    ));
    out.push_str(&format!("overall: {}\n", if report.passed() { "PASS" } else { "FAIL" }));
    out
}

fn cmd_verify_bounds(args: &Args) -> Result<()> {
    let trials = args.trials.unwrap_or(1000);
    let seed = args.seed.unwrap_or(0);
    let report = mip::verify_bounds(trials, seed)?;
    let text = report_text(&report);
    print!("{text}");
    if let Some(o) = &args.out {
        let dir = PathBuf::from(o);
        fs::create_dir_all(&dir)?;
        files::write_atomic(&dir.join("bounds_report.txt"), text.as_bytes())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Error::numeric("bound verification failed"))
    }
}
