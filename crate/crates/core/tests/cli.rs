use std::path::Path;
use std::process::{Command, Output};

use fbe_core::bank::{load_bank, BankFormat, FeatureBank};
use fbe_core::fbe::load_boundaries;
use serde_json::Value;
use tempfile::TempDir;

fn fbe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn fbe")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fbe(dir, args);
    assert!(
        out.status.success(),
        "fbe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A small synthetic benchmark in a fresh directory.
fn workspace(seed: u64) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--seed",
            &seed.to_string(),
            "--per-class",
            "40",
            "--test-per-class",
            "20",
            "--out-dir",
            "d",
        ],
    );
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn bank(dir: &Path, name: &str) -> FeatureBank {
    load_bank(dir.join(name), BankFormat::Binary).unwrap()
}

#[test]
fn full_retention_pipeline_is_identity() {
    let w = workspace(1);
    let d = w.path();
    ok(
        d,
        &[
            "fit",
            "--bank",
            "d/train.fbnk",
            "--lambda",
            "100",
            "--out",
            "b.fbdy",
        ],
    );
    ok(
        d,
        &[
            "apply",
            "--bank",
            "d/train.fbnk",
            "--boundaries",
            "b.fbdy",
            "--out",
            "e.fbnk",
        ],
    );
    assert_eq!(read(d, "e.fbnk"), read(d, "d/train.fbnk"));

    // d* at 100 is the largest deviation from the stored mean.
    let b = load_boundaries(d.join("b.fbdy")).unwrap();
    let train = bank(d, "d/train.fbnk");
    for j in 0..train.m() {
        let max = train
            .rows()
            .map(|r| (r[j] as f64 - b.mu()[j] as f64).abs())
            .fold(0.0, f64::max);
        assert!(b.d_star()[j] as f64 >= max);
        assert!(((b.d_star()[j] as f64) - max).abs() <= max * 1e-6);
    }
}

#[test]
fn lambda_out_of_range_is_usage_error() {
    let w = workspace(2);
    for bad in ["100.5", "-1", "nan"] {
        let out = fbe(
            w.path(),
            &[
                "fit",
                "--bank",
                "d/train.fbnk",
                "--lambda",
                bad,
                "--out",
                "b.fbdy",
            ],
        );
        assert_eq!(out.status.code(), Some(2), "lambda {bad}: {}", stderr(&out));
    }
    assert!(!w.path().join("b.fbdy").exists());
}

#[test]
fn apply_reports_retention_and_is_idempotent() {
    let w = workspace(3);
    let d = w.path();
    ok(
        d,
        &[
            "fit",
            "--bank",
            "d/train.fbnk",
            "--lambda",
            "95",
            "--out",
            "b.fbdy",
        ],
    );
    let first = json(&ok(
        d,
        &[
            "apply",
            "--bank",
            "d/train.fbnk",
            "--boundaries",
            "b.fbdy",
            "--out",
            "e.fbnk",
        ],
    ));
    let n = first["n"].as_f64().unwrap();
    let frac = first["clamped_fraction"].as_f64().unwrap();
    assert!((frac - 0.05).abs() <= 1.0 / n, "fraction {frac}");
    for key in ["min", "max"] {
        let v = first["clamped_fraction_per_dim"][key].as_f64().unwrap();
        assert!((v - 0.05).abs() <= 1.0 / n, "{key} {v}");
    }
    let second = json(&ok(
        d,
        &[
            "apply",
            "--bank",
            "e.fbnk",
            "--boundaries",
            "b.fbdy",
            "--out",
            "e2.fbnk",
        ],
    ));
    assert_eq!(second["clamped_total"], 0);
    assert_eq!(read(d, "e.fbnk"), read(d, "e2.fbnk"));
}

#[test]
fn dimension_mismatch_names_both_dims() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::write(d.join("a.csv"), "1,2,3\n4,5,6\n").unwrap();
    std::fs::write(d.join("b.csv"), "1,2\n3,4\n").unwrap();
    ok(
        d,
        &[
            "fit", "--bank", "a.csv", "--lambda", "50", "--out", "a.fbdy",
        ],
    );
    let out = fbe(
        d,
        &[
            "apply",
            "--bank",
            "b.csv",
            "--boundaries",
            "a.fbdy",
            "--out",
            "x.fbnk",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains('2') && msg.contains('3'), "{msg}");
}

#[test]
fn runtime_errors_exit_one() {
    let w = tempfile::tempdir().unwrap();
    let out = fbe(
        w.path(),
        &[
            "fit",
            "--bank",
            "missing.fbnk",
            "--lambda",
            "50",
            "--out",
            "b.fbdy",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    std::fs::write(w.path().join("bad.csv"), "1,2\n3\n").unwrap();
    let out = fbe(
        w.path(),
        &[
            "fit", "--bank", "bad.csv", "--lambda", "50", "--out", "b.fbdy",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_two() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    assert_eq!(fbe(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        fbe(d, &["fit", "--lambda", "50", "--out", "b"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        fbe(d, &["synth", "--out-dir", "x"]).status.code(),
        Some(2),
        "seed is mandatory"
    );
    assert_eq!(
        fbe(d, &["simulate"]).status.code(),
        Some(2),
        "seed is mandatory"
    );
    std::fs::write(d.join("c.toml"), "seed = 1\nbogus = 2\n").unwrap();
    let out = fbe(d, &["synth", "--config", "c.toml", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn eval_with_full_retention_matches_base() {
    let w = workspace(4);
    let d = w.path();
    ok(
        d,
        &[
            "fit",
            "--bank",
            "d/train.fbnk",
            "--lambda",
            "100",
            "--out",
            "b.fbdy",
        ],
    );
    let report = json(&ok(
        d,
        &[
            "eval",
            "--bank",
            "d/train.fbnk",
            "--id",
            "d/id_test.fbnk",
            "--ood",
            "d/near_ood.fbnk",
            "--score",
            "knn",
            "--k",
            "5",
            "--boundaries",
            "b.fbdy",
            "--scores-dir",
            "s",
        ],
    ));
    assert_eq!(read(d, "s/base_id.csv"), read(d, "s/fbe_id.csv"));
    assert_eq!(read(d, "s/base_ood.csv"), read(d, "s/fbe_ood.csv"));
    let fbe_run = &report["fbe"]["report"];
    assert_eq!(report["base"]["auroc"], fbe_run["auroc"]);
    assert_eq!(report["base"]["fpr95"], fbe_run["fpr95"]);
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert!(
        report["inputs"]["boundaries"]["sha256"]
            .as_str()
            .unwrap()
            .len()
            == 64
    );
    assert!(report["timings"]["base_score_ms"].is_number());
}

#[test]
fn eval_head_scores_on_synthetic_data() {
    let w = workspace(5);
    for score in ["energy", "msp", "maxlogit"] {
        let out = ok(
            w.path(),
            &[
                "eval",
                "--bank",
                "d/train.fbnk",
                "--id",
                "d/id_test.fbnk",
                "--ood",
                "d/near_ood.fbnk",
                "--head",
                "d/head.fhed",
                "--score",
                score,
                "--lambda",
                "95",
            ],
        );
        assert!(
            stderr(&out).contains("does not read the bank"),
            "{}",
            stderr(&out)
        );
        let report = json(&out);
        let auroc = report["base"]["auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auroc), "{score}: {auroc}");
        assert_eq!(report["base"]["auroc"], report["fbe"]["report"]["auroc"]);
    }
    let out = fbe(
        w.path(),
        &[
            "eval",
            "--bank",
            "d/train.fbnk",
            "--id",
            "d/id_test.fbnk",
            "--ood",
            "d/far_ood.fbnk",
            "--score",
            "energy",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "energy without a head: {}",
        stderr(&out)
    );
}

#[test]
fn sweep_at_full_retention_matches_eval_base() {
    let w = workspace(6);
    let d = w.path();
    let common = [
        "--bank",
        "d/train.fbnk",
        "--id",
        "d/id_test.fbnk",
        "--ood",
        "d/near_ood.fbnk",
        "--score",
        "knn",
        "--k",
        "5",
    ];
    let mut eval = vec!["eval"];
    eval.extend(common);
    let base = json(&ok(d, &eval))["base"].clone();

    let mut sweep = vec!["sweep"];
    sweep.extend(common);
    sweep.extend(["--lambdas", "100,100"]);
    let out = ok(d, &sweep);
    assert!(stderr(&out).contains("duplicate"), "{}", stderr(&out));
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,auroc,fpr95");
    assert_eq!(lines.len(), 2);
    let fields: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields[0], 100.0);
    assert_eq!(fields[1], base["auroc"].as_f64().unwrap());
    assert_eq!(fields[2], base["fpr95"].as_f64().unwrap());
}

#[test]
fn simulate_is_deterministic_and_warns_on_few_trials() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    let args = [
        "simulate",
        "--seed",
        "9",
        "--trials",
        "200",
        "--dim",
        "4",
        "--sigma-out",
        "1.5,2",
        "--epsilon",
        "-0.5",
    ];
    let a = ok(d, &args);
    let b = ok(d, &args);
    assert_eq!(a.stdout, b.stdout);
    assert!(
        stderr(&a).contains("1000") || stderr(&a).contains("trials"),
        "{}",
        stderr(&a)
    );
    let csv = String::from_utf8(a.stdout).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "sigma_out,epsilon,p_base,p_fbe,delta,stderr,trials,seed"
    );
    assert_eq!(csv.lines().count(), 3);

    let out = fbe(
        d,
        &[
            "simulate",
            "--seed",
            "1",
            "--sigma-out",
            "0.5",
            "--epsilon",
            "-0.5",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "sigma_out below sigma_in without --control"
    );
}

#[test]
fn synth_is_deterministic_and_validated() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    let run = |out: &str| {
        ok(
            d,
            &[
                "synth",
                "--seed",
                "11",
                "--per-class",
                "20",
                "--out-dir",
                out,
            ],
        )
    };
    run("a");
    run("b");
    for f in [
        "train.fbnk",
        "id_test.fbnk",
        "near_ood.fbnk",
        "far_ood.fbnk",
        "head.fhed",
        "manifest.json",
    ] {
        assert_eq!(
            read(d, &format!("a/{f}")),
            read(d, &format!("b/{f}")),
            "{f}"
        );
    }
    let manifest: Value = serde_json::from_slice(&read(d, "a/manifest.json")).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 5);

    let out = fbe(
        d,
        &[
            "synth",
            "--seed",
            "1",
            "--near-shift",
            "5",
            "--far-shift",
            "5",
            "--out-dir",
            "c",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("c/train.fbnk").exists());
}

#[test]
fn flags_override_config_file() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::create_dir(d.join("cfg")).unwrap();
    std::fs::write(
        d.join("cfg/s.toml"),
        "seed = 4\nclasses = 3\nper_class = 12\ndim = 5\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "synth",
            "--config",
            "cfg/s.toml",
            "--per-class",
            "15",
            "--out-dir",
            "o",
        ],
    );
    let train = bank(d, "o/train.fbnk");
    assert_eq!((train.n(), train.m()), (45, 5));

    // Paths in a config file resolve against the file's directory.
    std::fs::rename(d.join("o/train.fbnk"), d.join("cfg/train.fbnk")).unwrap();
    std::fs::write(d.join("cfg/f.toml"), "bank = \"train.fbnk\"\nlambda = 90\n").unwrap();
    let report = json(&ok(
        d,
        &[
            "fit",
            "--config",
            "cfg/f.toml",
            "--lambda",
            "80",
            "--out",
            "b.fbdy",
        ],
    ));
    assert_eq!(report["config"]["lambda"], 80.0);
    assert_eq!(load_boundaries(d.join("b.fbdy")).unwrap().lambda(), 80.0);
}

#[test]
fn csv_bank_with_labels_round_trips_through_apply() {
    let w = tempfile::tempdir().unwrap();
    let d = w.path();
    std::fs::write(d.join("l.csv"), "0.5,1.5,0\n2.5,-1,1\n3,4,1\n").unwrap();
    ok(
        d,
        &[
            "fit", "--bank", "l.csv", "--labels", "--lambda", "100", "--out", "b.fbdy",
        ],
    );
    ok(
        d,
        &[
            "apply",
            "--bank",
            "l.csv",
            "--labels",
            "--boundaries",
            "b.fbdy",
            "--out",
            "o.fbnk",
        ],
    );
    let out = load_bank(d.join("o.fbnk"), BankFormat::Binary).unwrap();
    assert_eq!(out.labels(), Some(&[0, 1, 1][..]));
    assert_eq!(out.data(), &[0.5, 1.5, 2.5, -1.0, 3.0, 4.0]);
}

#[test]
fn bank_scores_run_with_react() {
    let w = workspace(8);
    let common = [
        "eval",
        "--bank",
        "d/train.fbnk",
        "--id",
        "d/id_test.fbnk",
        "--ood",
        "d/near_ood.fbnk",
        "--lambda",
        "95",
    ];
    let mut maha = common.to_vec();
    maha.extend(["--score", "mahalanobis"]);
    let report = json(&ok(w.path(), &maha));
    assert!(report["react_threshold"].is_null());

    let mut guide = common.to_vec();
    guide.extend([
        "--head",
        "d/head.fhed",
        "--score",
        "nnguide",
        "--k",
        "5",
        "--react-percentile",
        "90",
    ]);
    let report = json(&ok(w.path(), &guide));
    assert!(report["react_threshold"].as_f64().unwrap() > 0.0);
    assert_eq!(report["config"]["react_scope"], "both");
}
