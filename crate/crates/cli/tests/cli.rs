//! End-to-end checks of the binary: exit codes, file layout, and
//! reproducibility of everything a command writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gated-mip"))
}

/// Overrides shared by every training-shaped test: a dataset and model
/// small enough that a run takes well under a second.
const TINY: &[&str] = &[
    "--data.num_samples",
    "120",
    "--data.bit_length",
    "4",
    "--data.input_dim",
    "16",
    "--modelname.emb_dim",
    "8",
    "--modelname.hidden_dims",
    "16",
    "--modelname.hidden_dropouts",
    "0",
    "--modelname.gate_d_k",
    "8",
    "--objective.num_negatives",
    "8",
    "--optimizer.batch_size",
    "16",
    "--optimizer.max_epochs",
    "2",
    "--optimizer.warmup_steps",
    "0",
    "--optimizer.eval_every",
    "5",
    "--eval.num_negatives",
    "8",
];

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should spawn")
}

fn run_tiny(args: &[&str]) -> Output {
    bin().args(args).args(TINY).output().expect("binary should spawn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_exits_zero_and_bad_commands_exit_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["help"])), 0);
    assert_eq!(code(&run(&[])), 1);
    let out = run(&["fit"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unknown command"));
}

#[test]
fn config_errors_exit_one_and_name_the_problem() {
    let out = run(&["train", "--optimizer.momentum", "0.9"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("optimizer.momentum"));

    let out = run(&["train", "--data.bit_length", "zero"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("data.bit_length"));

    let out = run(&["evaluate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--checkpoint"));

    let out = run(&["sweep", "everything"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("sweep kind"));

    let out = run(&["sweep"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn verify_bounds_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("vb");
    let out = run(&["verify-bounds", "--trials", "60", "--seed", "5", "--out", out_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(stdout.contains("overall: PASS"), "{stdout}");
    let report = fs::read_to_string(out_path.join("bounds_report.txt")).unwrap();
    assert_eq!(report, stdout);
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let st = run_tiny(&["generate", "--seed", seed, "--out", out.to_str().unwrap(), "--p", "0.5"]);
        assert_eq!(code(&st), 0, "{}", stderr(&st));
    }
    let bin_a = fs::read(a.join("dataset.bin")).unwrap();
    assert_eq!(bin_a, fs::read(b.join("dataset.bin")).unwrap(), "same seed, same bytes");
    assert_ne!(bin_a, fs::read(c.join("dataset.bin")).unwrap(), "different seed differs");
    assert_eq!(
        fs::read(a.join("dataset.csv")).unwrap(),
        fs::read(b.join("dataset.csv")).unwrap()
    );
    assert!(a.join("config.txt").exists());
}

fn assert_same_file(a: &Path, b: &Path) {
    assert_eq!(
        fs::read(a).unwrap(),
        fs::read(b).unwrap(),
        "{} and {} should be identical",
        a.display(),
        b.display()
    );
}

#[test]
fn train_evaluate_diagnostics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train_a = dir.path().join("train_a");
    let train_b = dir.path().join("train_b");
    for out in [&train_a, &train_b] {
        let st = run_tiny(&["train", "--seed", "1", "--out", out.to_str().unwrap(), "--p", "1.0"]);
        assert_eq!(code(&st), 0, "{}", stderr(&st));
        assert!(out.join("checkpoint.bin").exists());
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("config.txt").exists());
    }
    // identical (config, seed) => identical artifacts
    assert_same_file(&train_a.join("metrics.csv"), &train_b.join("metrics.csv"));
    assert_same_file(&train_a.join("checkpoint.bin"), &train_b.join("checkpoint.bin"));
    assert_same_file(&train_a.join("config.txt"), &train_b.join("config.txt"));

    let ckpt = train_a.join("checkpoint.bin");
    let eval_dir = dir.path().join("eval");
    let st = run_tiny(&[
        "evaluate",
        "--seed",
        "1",
        "--p",
        "1.0",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&st), 0, "{}", stderr(&st));
    let results = fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), "method,p,B,K,seed,top1,pool,runtime_s");
    let row = lines.next().unwrap();
    assert!(row.starts_with("gated_symile,1,16,8,1,"), "{row}");
    let json = fs::read_to_string(eval_dir.join("results.json")).unwrap();
    assert!(json.contains("\"gated_symile\""));

    let diag_dir = dir.path().join("diag");
    let st = run_tiny(&[
        "diagnostics",
        "--seed",
        "1",
        "--p",
        "1.0",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        diag_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&st), 0, "{}", stderr(&st));
    let diag = fs::read_to_string(diag_dir.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("modality,statistic,value,count"), "{diag}");
    assert!(diag.contains("weight_delta_mean"));
}

#[test]
fn sweep_resume_reuses_finished_cells_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let sw = dir.path().join("sw");
    let args = [
        "sweep",
        "misalignment",
        "--out",
        sw.to_str().unwrap(),
        "--sweep.methods",
        "symile,gated_symile",
        "--sweep.p_grid",
        "0,1",
        "--sweep.seeds",
        "0",
        "--optimizer.max_epochs",
        "1",
    ];
    let st = run_tiny(&args);
    assert_eq!(code(&st), 0, "{}", stderr(&st));
    let first = fs::read(sw.join("results.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 5, "header + 4 cells");

    // resume: every cell is picked up from disk, including its runtime,
    // so the final table is byte-identical
    fs::remove_file(sw.join("results.csv")).unwrap();
    let mut with_resume: Vec<&str> = args.to_vec();
    with_resume.push("--resume");
    let st = run_tiny(&with_resume);
    assert_eq!(code(&st), 0, "{}", stderr(&st));
    let stdout = String::from_utf8_lossy(&st.stdout).into_owned();
    assert_eq!(stdout.matches("skipping").count(), 4, "{stdout}");
    assert_eq!(fs::read(sw.join("results.csv")).unwrap(), first);

    // per-cell artifacts exist for resumed sweeps too
    let cell = sw.join("cells").join("method=gated_symile_p=1_seed=0");
    assert!(cell.join("row.csv").exists());
    assert!(cell.join("metrics.csv").exists());
    assert!(cell.join("config.txt").exists());
    assert!(cell.join("diagnostics.csv").exists());
}

#[test]
fn training_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("diverge");
    // exp(logit scale) overflows immediately; two strikes abort the run
    let st = run_tiny(&[
        "train",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
        "--modelname.logit_scale_init",
        "10000",
    ]);
    assert_eq!(code(&st), 2, "{}", stderr(&st));
    assert!(stderr(&st).contains("step"), "{}", stderr(&st));
}
