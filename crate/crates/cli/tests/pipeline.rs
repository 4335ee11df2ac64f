//! End-to-end subprocess tests of the `t2d` binary: the full
//! generate/train/predict/evaluate flow, snapshot re-runs, determinism, and
//! the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn t2d(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_t2d"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = t2d(args, &[]);
    assert!(
        out.status.success(),
        "t2d {args:?} failed:\n{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn assert_identical(a: &Path, b: &Path, names: &[&str]) {
    for name in names {
        assert_eq!(
            read(&a.join(name)),
            read(&b.join(name)),
            "{name} differs between {} and {}",
            a.display(),
            b.display()
        );
    }
}

/// Small-but-real settings shared by the tests: 16^3 tube phantoms and a
/// thin k=3 network.
const GEN: &[&str] = &[
    "--generate.count=4",
    "--generate.train_fraction=0.75",
    "--phantom.h=16",
    "--phantom.w=16",
    "--phantom.d=16",
    "--phantom.radius_min=1",
    "--phantom.radius_max=2.5",
];
const MODEL: &[&str] = &[
    "--model.k=3",
    "--model.base_width=2",
    "--model.trunk_width=4",
    "--model.input_size=16",
    "--model.ssa_pool_size=4",
];
const TRAIN: &[&str] = &[
    "--train.iterations=4",
    "--train.batch_size=2",
    "--train.base_lr=0.01",
];

fn gen_args(out: &Path) -> Vec<String> {
    let mut v = vec!["generate".to_string(), "--seed".into(), "7".into()];
    v.push(format!("--out={}", out.display()));
    v.extend(GEN.iter().map(|s| s.to_string()));
    v
}

fn train_args(data: &Path, out: &Path) -> Vec<String> {
    let mut v = vec!["train".to_string(), "--seed".into(), "7".into()];
    v.push(format!("--out={}", out.display()));
    v.push(format!("--train.data={}", data.display()));
    v.extend(MODEL.iter().chain(TRAIN).map(|s| s.to_string()));
    v
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn generate_train_predict_evaluate_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let pred = tmp.path().join("pred");
    let eval = tmp.path().join("eval");

    ok(&strs(&gen_args(&data)));
    assert!(data.join("manifest.tsv").exists());
    assert!(data.join("case_000_img.t2dv").exists());
    assert!(data.join("config.resolved").exists());

    ok(&strs(&train_args(&data, &run)));
    for f in ["model_final.t2dc", "model_best.t2dc", "loss.csv", "config.resolved"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(loss.starts_with("iteration,lr,loss\n"));
    assert_eq!(loss.lines().count(), 5, "header plus one row per iteration");

    // case_003 is the single test case under a 0.75 split of 4.
    ok(&[
        "predict",
        &format!("--out={}", pred.display()),
        &format!("--predict.checkpoint={}", run.join("model_final.t2dc").display()),
        &format!("--predict.volume={}", data.join("case_003_img.t2dv").display()),
    ]);
    for axis in ["coronal", "sagittal", "axial"] {
        assert!(pred.join(format!("case_003_prob_{axis}.t2dv")).exists());
    }
    assert!(pred.join("case_003_mask_fused.t2dv").exists());

    let out = ok(&[
        "evaluate",
        &format!("--out={}", eval.display()),
        &format!("--evaluate.pred={}", pred.display()),
        &format!("--evaluate.gt={}", data.display()),
    ]);
    let report = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert!(lines.next().unwrap().starts_with("case,"));
    let case_row = lines.next().unwrap();
    assert!(case_row.starts_with("case_003,"), "{case_row}");
    let dsc_fused: f64 = case_row.split(',').nth(4).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&dsc_fused));
    assert!(report.lines().last().unwrap().starts_with("mean,"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
}

#[test]
fn single_axis_predict_writes_probability_and_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let pred = tmp.path().join("pred");
    ok(&strs(&gen_args(&data)));
    ok(&strs(&train_args(&data, &run)));
    ok(&[
        "predict",
        &format!("--out={}", pred.display()),
        &format!("--predict.checkpoint={}", run.join("model_best.t2dc").display()),
        &format!("--predict.volume={}", data.join("case_000_img.t2dv").display()),
        "--predict.axis=axial",
    ]);
    assert!(pred.join("case_000_prob_axial.t2dv").exists());
    assert!(pred.join("case_000_mask_axial.t2dv").exists());
    assert!(!pred.join("case_000_prob_coronal.t2dv").exists());
}

#[test]
fn identical_seeds_reproduce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (data_a, data_b) = (tmp.path().join("da"), tmp.path().join("db"));
    ok(&strs(&gen_args(&data_a)));
    ok(&strs(&gen_args(&data_b)));
    assert_identical(
        &data_a,
        &data_b,
        &[
            "manifest.tsv",
            "config.resolved",
            "case_000_img.t2dv",
            "case_001_mask.t2dv",
            "case_003_img.t2dv",
        ],
    );

    let (run_a, run_b) = (tmp.path().join("ra"), tmp.path().join("rb"));
    ok(&strs(&train_args(&data_a, &run_a)));
    ok(&strs(&train_args(&data_a, &run_b)));
    assert_identical(
        &run_a,
        &run_b,
        &["model_final.t2dc", "model_best.t2dc", "loss.csv", "config.resolved"],
    );

    let (pred_a, pred_b) = (tmp.path().join("pa"), tmp.path().join("pb"));
    for pred in [&pred_a, &pred_b] {
        ok(&[
            "predict",
            &format!("--out={}", pred.display()),
            &format!("--predict.checkpoint={}", run_a.join("model_final.t2dc").display()),
            &format!("--predict.volume={}", data_a.join("case_003_img.t2dv").display()),
        ]);
    }
    assert_identical(
        &pred_a,
        &pred_b,
        &[
            "case_003_prob_coronal.t2dv",
            "case_003_prob_sagittal.t2dv",
            "case_003_prob_axial.t2dv",
            "case_003_mask_fused.t2dv",
        ],
    );
}

#[test]
fn resolved_snapshot_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let again = tmp.path().join("again");
    ok(&strs(&gen_args(&first)));
    // No overrides, no --seed: everything comes from the snapshot.
    ok(&[
        "generate",
        &format!("--config={}", first.join("config.resolved").display()),
        &format!("--out={}", again.display()),
    ]);
    assert_identical(
        &first,
        &again,
        &[
            "manifest.tsv",
            "config.resolved",
            "case_000_img.t2dv",
            "case_000_mask.t2dv",
            "case_002_img.t2dv",
            "case_003_mask.t2dv",
        ],
    );
}

#[test]
fn ablation_is_deterministic_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let base: Vec<String> = [
        "ablate",
        "--seed",
        "11",
        "--ablate.modes=plain,esm_ssa",
        "--ablate.ks=3,6",
        "--ablate.count=3",
        "--ablate.train_fraction=0.67",
        "--train.iterations=3",
        "--train.batch_size=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain(GEN[2..].iter().map(|s| s.to_string()))
    .chain(MODEL[1..].iter().map(|s| s.to_string()))
    .collect();

    let mut outs = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = tmp.path().join(format!("t{threads}"));
        let mut args = base.clone();
        args.push(format!("--out={}", out_dir.display()));
        let out = t2d(&strs(&args), &[("T2D_THREADS", threads)]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outs.push(out_dir);
    }
    assert_identical(&outs[0], &outs[1], &["ablate.csv", "config.resolved"]);
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown config key: validation.
    let out = t2d(
        &["bench", "--bogus.key=1", &format!("--out={}", tmp.path().join("b").display())],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus.key"));

    // Unreadable input: validation.
    let out = t2d(
        &[
            "train",
            "--train.data=/nonexistent",
            &format!("--out={}", tmp.path().join("t").display()),
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));

    // Bad flag: validation.
    let out = t2d(&["generate", "--no-such-flag"], &[]);
    assert_eq!(out.status.code(), Some(1));

    // Output path collides with a file: runtime.
    let blocked = tmp.path().join("blocked");
    std::fs::write(&blocked, b"x").unwrap();
    let mut args = gen_args(&blocked);
    args.push("--generate.count=1".into());
    let out = t2d(&strs(&args), &[]);
    assert_eq!(out.status.code(), Some(2));

    // Help exits 0.
    let out = t2d(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("generate"));
}

#[test]
fn corrupt_inputs_are_rejected_with_exit_code_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&strs(&gen_args(&data)));

    // Flip one byte inside a volume payload.
    let victim = data.join("case_000_img.t2dv");
    let mut bytes = std::fs::read(&victim).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&victim, bytes).unwrap();

    let out = t2d(&strs(&train_args(&data, &tmp.path().join("run"))), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("checksum"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
