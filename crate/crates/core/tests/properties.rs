use std::fs;
use std::path::Path;

use proptest::prelude::*;

use selpred_core::calibration::{softmax_probs, LogitsSet};
use selpred_core::ingest::{self, load_manifest};
use selpred_core::losses::{LossSpec, SicovaWeights, TripletParams};
use selpred_core::protocol::{evaluate_checkpoint, EvaluationProtocol};
use selpred_core::report::{risk_coverage_svg, summary_table, PlotSpec, Series};
use selpred_core::selective::{
    decide, rank_checkpoints, select_operating_point, threshold_grid, threshold_sweep, AbsentClassPolicy,
    CheckpointScore, OperatingPoint, RiskCoveragePoint,
};
use selpred_core::synth::{run_experiment, ExperimentConfig};
use selpred_core::{Error, Matrix, Rng};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-6.0f64..6.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn first_max(row: &[f64]) -> usize {
    let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.iter().position(|&v| v == best).unwrap()
}

proptest! {
    #[test]
    fn temperature_never_moves_the_argmax(
        logits in (1usize..12, 2usize..8).prop_flat_map(|(n, k)| matrix(n, k)),
        t in 0.05f64..10.0,
    ) {
        let p = softmax_probs(&logits, t).unwrap();
        for i in 0..logits.rows() {
            prop_assert_eq!(first_max(p.row(i)), first_max(logits.row(i)));
        }
    }

    #[test]
    fn coverage_is_non_increasing(
        (logits, labels) in (2usize..40, 2usize..6).prop_flat_map(|(n, k)| {
            (matrix(n, k), prop::collection::vec(0..k, n))
        }),
    ) {
        let k = logits.cols();
        let probs = softmax_probs(&logits, 1.0).unwrap();
        let grid = threshold_grid(0.01).unwrap();
        let curve = threshold_sweep(&probs, &labels, k, &grid, AbsentClassPolicy::Exclude).unwrap();
        prop_assert_eq!(curve[0].coverage, 1.0);
        for w in curve.windows(2) {
            prop_assert!(w[1].coverage <= w[0].coverage);
            prop_assert!(w[1].n_retained <= w[0].n_retained);
        }
        for p in &curve {
            prop_assert_eq!(decide(&probs, p.threshold).unwrap().n_retained(), p.n_retained);
            prop_assert_eq!(p.sel_accuracy.is_none(), p.n_retained == 0);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_row_order_free(
        (z, zp) in (2usize..10, 1usize..5).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d))),
        shift in 1usize..10,
    ) {
        let n = z.rows();
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let pick = |m: &Matrix| Matrix::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        for spec in [
            LossSpec::Sicova(SicovaWeights::default()),
            LossSpec::Triplet(TripletParams::default()),
        ] {
            let a = spec.value(&z, &zp).unwrap();
            let b = spec.value(&pick(&z), &pick(&zp)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }
}

fn point(f1: Option<f64>, acc: Option<f64>) -> OperatingPoint {
    OperatingPoint {
        point: RiskCoveragePoint {
            threshold: 0.5,
            coverage: 0.7,
            n_retained: 7,
            sel_accuracy: acc,
            sel_macro_f1: f1,
            sel_qwk: None,
        },
        target_coverage: 0.7,
    }
}

fn score(id: &str, epoch: u64, f1: Option<f64>, acc: Option<f64>) -> CheckpointScore {
    CheckpointScore {
        checkpoint_id: id.into(),
        pretrain_epoch: epoch,
        operating_point: point(f1, acc),
    }
}

#[test]
fn ranking_follows_selective_f1() {
    let ranking = rank_checkpoints(vec![
        score("first", 20, Some(0.9), Some(0.5)),
        score("second", 40, Some(0.7), Some(0.99)),
        score("third", 60, Some(0.8), Some(0.6)),
    ]);
    let order: Vec<&str> = ranking.ranked.iter().map(|r| r.score.checkpoint_id.as_str()).collect();
    assert_eq!(order, ["first", "third", "second"]);
    assert_eq!(ranking.ranked.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn ranking_ties_and_undefined_scores() {
    let ranking = rank_checkpoints(vec![
        score("late", 80, Some(0.5), Some(0.8)),
        score("acc", 90, Some(0.5), Some(0.9)),
        score("early", 20, Some(0.5), Some(0.8)),
        score("empty", 10, None, None),
    ]);
    let order: Vec<&str> = ranking.ranked.iter().map(|r| r.score.checkpoint_id.as_str()).collect();
    assert_eq!(order, ["acc", "early", "late"]);
    assert_eq!(ranking.excluded.len(), 1);
    assert_eq!(ranking.excluded[0].0, "empty");
}

/// Pairs of rows whose confidence order flips between two temperatures.
fn confidence_flips(logits: &Matrix, t1: f64, t2: f64) -> usize {
    let pmax = |t: f64| -> Vec<f64> {
        let p = softmax_probs(logits, t).unwrap();
        (0..p.rows())
            .map(|i| p.row(i).iter().copied().fold(0.0, f64::max))
            .collect()
    };
    let (a, b) = (pmax(t1), pmax(t2));
    let mut flips = 0;
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            if (a[i] - a[j]) * (b[i] - b[j]) < 0.0 {
                flips += 1;
            }
        }
    }
    flips
}

#[test]
fn confidence_order_under_temperature() {
    let mut rng = Rng::new(12);
    let mut binary = 0;
    let (mut multi, mut pairs) = (0, 0);
    for _ in 0..200 {
        let t = 0.2 + 4.0 * rng.uniform();
        binary += confidence_flips(&Matrix::random_normal(30, 2, 2.0, &mut rng), 1.0, t);
        multi += confidence_flips(&Matrix::random_normal(30, 5, 2.0, &mut rng), 1.0, t);
        pairs += 30 * 29 / 2;
    }
    // Two classes: p_max is monotone in |l0 - l1| for every T, so the
    // retained set at any coverage is the same. With more classes it is not.
    assert_eq!(binary, 0);
    eprintln!(
        "K=5: {multi} of {pairs} row pairs ({:.2}%) change confidence order under rescaling",
        100.0 * multi as f64 / pairs as f64
    );
    assert!(multi > 0);
}

#[test]
fn zero_threshold_grid_reproduces_standard_metrics() {
    // Small run with the full protocol grid collapsed to {0}: selective
    // metrics must equal the unmasked ones for every checkpoint.
    let cfg = ExperimentConfig::from_toml_str(
        "grid_step = 1.0\ntarget_coverage = 1.0\n[data]\nsamples_per_class = 30\ninput_dim = 8\n\
         [schedule]\nepochs = 10\ncheckpoint_every = 5\nhead_epochs = 50\n",
        "inline",
    )
    .unwrap();
    let result = run_experiment(&cfg, Some(2)).unwrap();
    assert_eq!(result.evaluations.len(), 2);
    for e in &result.evaluations {
        let op = &e.operating_point.point;
        assert_eq!(op.threshold, 0.0);
        assert_eq!(op.coverage, 1.0);
        assert_eq!(op.sel_accuracy, e.accuracy);
        assert_eq!(op.sel_macro_f1, e.macro_f1);
        assert_eq!(op.sel_qwk, e.qwk);
    }
    // every checkpoint is scored on the same held-out samples
    let labels: Vec<&[usize]> = result.records.iter().map(|r| r.evaluation.labels()).collect();
    assert!(labels.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn table_and_plot_agree_on_operating_points() {
    let mut rng = Rng::new(21);
    let protocol = EvaluationProtocol::default();
    let mut evals = Vec::new();
    for (i, epoch) in [20u64, 40, 60].into_iter().enumerate() {
        let set = |n: usize, rng: &mut Rng| {
            let labels: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let mut logits = Matrix::random_normal(n, 4, 1.0, rng);
            for (r, &l) in labels.iter().enumerate() {
                logits[(r, l)] += 0.5 * (i + 1) as f64;
            }
            LogitsSet::new(logits, labels).unwrap()
        };
        let (cal, eval) = (set(80, &mut rng), set(120, &mut rng));
        evals.push(evaluate_checkpoint(&format!("ep-{epoch}"), epoch, &cal, &eval, &protocol).unwrap());
    }
    let ranking = selpred_core::protocol::rank_evaluations(&evals);
    let table = summary_table("test", &ranking);
    let series: Vec<Series> = evals
        .iter()
        .map(|e| Series {
            label: e.checkpoint_id.clone(),
            curve: e.curve.clone(),
            operating_point: e.operating_point.point.clone(),
        })
        .collect();
    let svg = risk_coverage_svg(&series, &PlotSpec::default()).unwrap();

    for row in table.lines().skip(1) {
        let cells: Vec<&str> = row.split(',').collect();
        let (coverage, f1) = (cells[3], cells[5]);
        let marker = format!("data-coverage=\"{coverage}\" data-metric=\"{f1}\"");
        assert!(svg.contains(&marker), "no marker {marker} for {row}");
    }
    assert_eq!(svg.matches("class=\"operating-point\"").count(), 3);
}

#[test]
fn operating_point_prefers_higher_coverage_on_ties() {
    // retained fractions 1.0, 0.75 and 0.5 around target 0.625
    let probs = Matrix::from_rows(&[[0.9, 0.1], [0.8, 0.2], [0.6, 0.4], [0.5, 0.5]]).unwrap();
    let grid = threshold_grid(0.01).unwrap();
    let curve = threshold_sweep(&probs, &[0, 0, 1, 1], 2, &grid, AbsentClassPolicy::Exclude).unwrap();
    let op = select_operating_point(&curve, 0.625).unwrap().point;
    assert_eq!(op.coverage, 0.75);
    assert_eq!(op.threshold, 0.51);
}

// ------------------------------------------------------------ manifests

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn manifest_dir(extra_entry_key: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir(d.join("data")).unwrap();
    write(d, "data/cal.csv", "l0,l1\n1,0\n0,1\n0.5,0.4\n");
    write(d, "data/cal_y.csv", "0\n1\n1\n");
    write(d, "data/eval.csv", "l0,l1\n2,0\n0,2\n");
    write(d, "data/eval_y.csv", "0\n1\n");
    let entry = |id: &str| {
        format!(
            r#"{{"id": "{id}", "pretrain_epoch": 5, "cal_logits": "data/cal.csv", "cal_labels": "data/cal_y.csv",
                "eval_logits": "data/eval.csv", "eval_labels": "data/eval_y.csv"{extra_entry_key}}}"#
        )
    };
    write(
        d,
        "manifest.json",
        &format!(
            r#"{{"run_id": "r", "n_classes": 2, "checkpoints": [{}, {}]}}"#,
            entry("a"),
            entry("b")
        ),
    );
    tmp
}

#[test]
fn manifest_paths_resolve_and_unknown_keys_are_ignored() {
    let tmp = manifest_dir(r#", "comment": "kept for humans""#);
    let (manifest, loaded) = load_manifest(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.target_coverage, 0.70);
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[0].cal.len(), 3);
    assert_eq!(loaded[1].eval.labels(), [0, 1]);
}

#[test]
fn manifest_count_mismatch_names_the_file() {
    let tmp = manifest_dir("");
    write(tmp.path(), "data/eval_y.csv", "0\n1\n1\n");
    let err = load_manifest(&tmp.path().join("manifest.json")).unwrap_err();
    assert!(err.is_input_error());
    assert!(err.to_string().contains("eval_y.csv"), "{err}");
}

#[test]
fn manifest_rejects_missing_files_and_bad_labels() {
    let tmp = manifest_dir("");
    fs::remove_file(tmp.path().join("data/cal.csv")).unwrap();
    assert!(load_manifest(&tmp.path().join("manifest.json"))
        .unwrap_err()
        .is_input_error());

    let tmp = manifest_dir("");
    write(tmp.path(), "data/cal_y.csv", "0\n1\n2\n");
    let err = load_manifest(&tmp.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("cal_y.csv:3"), "{err}");
}

#[test]
fn manifest_rejects_duplicate_ids_and_missing_keys() {
    let tmp = manifest_dir("");
    let text = fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
    write(
        tmp.path(),
        "manifest.json",
        &text.replace("\"id\": \"b\"", "\"id\": \"a\""),
    );
    assert!(load_manifest(&tmp.path().join("manifest.json")).is_err());

    write(tmp.path(), "manifest.json", &text.replace("\"pretrain_epoch\": 5,", ""));
    let err = load_manifest(&tmp.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("pretrain_epoch"), "{err}");
}

#[test]
fn checkpoint_weights_round_trip() {
    let mut rng = Rng::new(2);
    let w = Matrix::random_normal(7, 3, 1.0, &mut rng);
    let back = ingest::decode_checkpoint(&ingest::encode_checkpoint(&w), "mem").unwrap();
    assert_eq!(w, back);
    let mut bytes = ingest::encode_checkpoint(&w);
    bytes.truncate(bytes.len() - 1);
    assert!(matches!(
        ingest::decode_checkpoint(&bytes, "mem"),
        Err(Error::Parse { .. } | Error::Validation(_))
    ));
}
