use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn selpred(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selpred"))
        .args(args)
        .env("SELPRED_NO_COLOR", "1")
        .output()
        .expect("spawn selpred")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn losscheck_is_deterministic() {
    let args = ["losscheck", "--loss", "sicova", "--n", "8", "--d", "4", "--seed", "1"];
    let a = selpred(&args);
    let b = selpred(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    for key in ["var_z", "cov_zp", "inv", "corr", "total"] {
        assert!(stdout(&a).contains(key), "missing {key}");
    }
}

#[test]
fn losscheck_triplet_prints_scalar() {
    let out = selpred(&["losscheck", "--loss", "triplet", "--margin", "1.0"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("total"));
}

#[test]
fn losscheck_rejects_single_row() {
    let out = selpred(&["losscheck", "--n", "1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--n"));
}

#[test]
fn gradcheck_exit_codes() {
    let ok = selpred(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("max_rel_err"));

    let strict = selpred(&["gradcheck", "--loss", "sicova", "--tol", "1e-15"]);
    assert_eq!(code(&strict), 1);
    assert!(stdout(&strict).contains("FAIL"));

    let unknown = selpred(&["gradcheck", "--loss", "barlow"]);
    assert_eq!(code(&unknown), 2);
}

#[test]
fn synth_default_config_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = default_config();
    let ra = selpred(&["synth", "--config", s(&cfg), "--out", s(&a), "--jobs", "1"]);
    assert_eq!(code(&ra), 0, "{}", stderr(&ra));
    let rb = selpred(&["synth", "--config", s(&cfg), "--out", s(&b), "--jobs", "3"]);
    assert_eq!(code(&rb), 0);

    for rel in [
        "results/summary.csv",
        "results/rank.csv",
        "results/risk_coverage.svg",
        "results/checkpoints.csv",
        "records/ep-200/eval-logits.csv",
        "checkpoints/ep-20.ckpt",
    ] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let summary = fs::read_to_string(a.join("results/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 10);
    assert_eq!(fs::read_dir(a.join("checkpoints")).unwrap().count(), 10);
}

#[test]
fn synth_missing_config_is_usage_error() {
    let out = selpred(&["synth", "--config", "/nonexistent/selpred.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_divergence_is_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.toml",
        "[data]\nsamples_per_class = 20\ninput_dim = 8\n[schedule]\nepochs = 20\ncheckpoint_every = 10\nlr = 1e6\n",
    );
    let out = selpred(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
}

#[test]
fn calibrate_closed_form_set() {
    let tmp = TempDir::new().unwrap();
    let logits = write(tmp.path(), "l.csv", "l0,l1\n1,0\n1,0\n1,0\n");
    let labels = write(tmp.path(), "y.csv", "0\n0\n1\n");
    let out = selpred(&[
        "calibrate",
        "--logits",
        s(&logits),
        "--labels",
        s(&labels),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(tmp.path().join("calibration.json")).unwrap();
    for key in ["\"temperature\"", "\"nll\"", "\"clamped\"", "\"n\""] {
        assert!(text.contains(key), "{text}");
    }
    let t: f64 = text
        .lines()
        .find(|l| l.contains("temperature"))
        .and_then(|l| l.split(':').nth(1))
        .map(|v| v.trim().trim_end_matches(',').parse().unwrap())
        .unwrap();
    assert!((t - 1.0 / std::f64::consts::LN_2).abs() < 1e-3, "{t}");
}

#[test]
fn sweep_with_unit_step_has_two_rows() {
    let tmp = TempDir::new().unwrap();
    let logits = write(tmp.path(), "l.csv", "l0,l1\n2,0\n0,1\n");
    let labels = write(tmp.path(), "y.csv", "0\n1\n");
    let out = selpred(&[
        "sweep",
        "--logits",
        s(&logits),
        "--labels",
        s(&labels),
        "--grid-step",
        "1.0",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let curve = fs::read_to_string(tmp.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(
        lines[0],
        "threshold,coverage,n_retained,sel_accuracy,sel_macro_f1,sel_qwk"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.0,1.0,2,"));
    assert_eq!(lines[2], "1.0,0.0,0,,,");
}

#[test]
fn malformed_logits_report_line() {
    let tmp = TempDir::new().unwrap();
    let logits = write(tmp.path(), "l.csv", "l0,l1\n1,0\nNaN,0\n");
    let labels = write(tmp.path(), "y.csv", "0\n1\n");
    let out = selpred(&[
        "calibrate",
        "--logits",
        s(&logits),
        "--labels",
        s(&labels),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("l.csv:3"), "{}", stderr(&out));
}

fn two_checkpoint_manifest(dir: &Path) -> PathBuf {
    write(dir, "cal.csv", "l0,l1,l2\n2,0,0\n0,2,0\n0,0,2\n1,0.5,0\n0.2,0.1,0\n");
    write(dir, "cal_y.csv", "0\n1\n2\n1\n0\n");
    write(dir, "eval.csv", "l0,l1,l2\n3,0,0\n0,1,0.8\n0,0,2\n0.5,0.4,0\n");
    write(dir, "eval_y.csv", "0\n2\n2\n1\n");
    let entry = |id: &str, epoch: u64| {
        format!(
            r#"{{"id": "{id}", "pretrain_epoch": {epoch}, "cal_logits": "cal.csv", "cal_labels": "cal_y.csv",
               "eval_logits": "eval.csv", "eval_labels": "eval_y.csv", "note": "ignored"}}"#
        )
    };
    write(
        dir,
        "manifest.json",
        &format!(
            r#"{{"run_id": "demo", "n_classes": 3, "extra": true, "checkpoints": [{}, {}]}}"#,
            entry("late", 40),
            entry("early", 20)
        ),
    )
}

#[test]
fn rank_ties_go_to_earlier_epoch() {
    let tmp = TempDir::new().unwrap();
    let manifest = two_checkpoint_manifest(tmp.path());
    let out_dir = tmp.path().join("out");
    let out = selpred(&["rank", "--manifest", s(&manifest), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rank = fs::read_to_string(out_dir.join("rank.csv")).unwrap();
    let lines: Vec<&str> = rank.lines().collect();
    assert_eq!(
        lines[0],
        "rank,checkpoint_id,pretrain_epoch,threshold,coverage,sel_accuracy,sel_macro_f1,sel_qwk"
    );
    assert!(lines[1].starts_with("1,early,20,"), "{rank}");
    assert!(lines[2].starts_with("2,late,40,"), "{rank}");
}

#[test]
fn report_writes_table_and_plot() {
    let tmp = TempDir::new().unwrap();
    let manifest = two_checkpoint_manifest(tmp.path());
    let out_dir = tmp.path().join("rep");
    let out = selpred(&["report", "--manifest", s(&manifest), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("demo,early,20,"));
    let svg = fs::read_to_string(out_dir.join("risk_coverage.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn manifest_with_mismatched_counts_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let manifest = two_checkpoint_manifest(tmp.path());
    write(tmp.path(), "cal_y.csv", "0\n1\n2\n1\n");
    let out = selpred(&["rank", "--manifest", s(&manifest), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cal_y.csv"), "{}", stderr(&out));
}

#[test]
fn invalid_coverage_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let manifest = two_checkpoint_manifest(tmp.path());
    let out = selpred(&[
        "rank",
        "--manifest",
        s(&manifest),
        "--coverage",
        "1.5",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn help_lists_flags_and_defaults() {
    let expected: [(&str, &[&str]); 7] = [
        (
            "losscheck",
            &["--loss", "--n", "--d", "--seed", "--margin", "[default: sicova]"],
        ),
        ("gradcheck", &["--loss", "--tol", "[default: 0.000001]"]),
        ("synth", &["--config", "--seed", "--out", "--jobs"]),
        ("calibrate", &["--logits", "--labels", "--out"]),
        (
            "sweep",
            &[
                "--temperature",
                "--grid-step",
                "--coverage",
                "[default: 0.01]",
                "[default: 0.7]",
            ],
        ),
        ("rank", &["--manifest", "--coverage", "--grid-step", "--jobs"]),
        ("report", &["--manifest", "--out"]),
    ];
    for (cmd, flags) in expected {
        let out = selpred(&[cmd, "--help"]);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(code(&selpred(&["frobnicate"])), 2);
}
