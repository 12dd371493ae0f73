use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fssk::fst;

fn fssk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fssk"))
        .args(args)
        .output()
        .expect("running fssk")
}

fn fssk_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fssk"))
        .args(args)
        .env(key, value)
        .output()
        .expect("running fssk")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_twice_is_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = fssk(&["gen", "--seed", "7", "--n", "10", "--out", &path(t.path(), name)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert_eq!(a.len(), 10 * 7 + 1);
    assert_eq!(a, b);
}

#[test]
fn gen_thread_count_does_not_change_output() {
    let t = tempfile::tempdir().unwrap();
    let one = fssk_env(&["gen", "--n", "5", "--out", &path(t.path(), "one")], "FSSK_THREADS", "1");
    let four = fssk_env(&["gen", "--n", "5", "--out", &path(t.path(), "four")], "FSSK_THREADS", "4");
    assert!(one.status.success() && four.status.success());
    assert_eq!(tree(&t.path().join("one")), tree(&t.path().join("four")));

    let bad = fssk_env(&["gen", "--n", "1", "--out", &path(t.path(), "x")], "FSSK_THREADS", "zero");
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gen_records_distractor_and_rejects_zero_episodes() {
    let t = tempfile::tempdir().unwrap();
    let out = path(t.path(), "d");
    assert!(fssk(&["gen", "--n", "2", "--distractor", "--out", &out]).status.success());
    let m: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("d/episode_0001/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["meta"]["distractor"], true);
    assert_eq!(m["k"], 1);

    let zero = fssk(&["gen", "--n", "0", "--out", &path(t.path(), "z")]);
    assert_eq!(zero.status.code(), Some(1));
    assert!(stderr(&zero).contains("--n"));
    assert!(!t.path().join("z").exists());
}

#[test]
fn gen_rejects_bad_size_and_fidelity() {
    let t = tempfile::tempdir().unwrap();
    let out = path(t.path(), "x");
    assert_eq!(fssk(&["gen", "--size", "16x8", "--out", &out]).status.code(), Some(1));
    assert_eq!(fssk(&["gen", "--size", "16x2x2", "--out", &out]).status.code(), Some(1));
    assert_eq!(fssk(&["gen", "--cam-fidelity", "1.5", "--out", &out]).status.code(), Some(1));
}

#[test]
fn run_inference_episodes_with_strategy_none() {
    let t = tempfile::tempdir().unwrap();
    let eps = path(t.path(), "eps");
    assert!(fssk(&["gen", "--n", "2", "--inference", "--out", &eps]).status.success());
    assert!(!t.path().join("eps/episode_0000/query_mask.fst").exists());

    let ok = fssk(&["run", &eps, "--strategy", "none", "--out", &path(t.path(), "r")]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("r/report.json")).unwrap()).unwrap();
    assert!(report["summary"].is_null());
    assert!(report["episodes"][0]["metrics"].is_null());

    let dicm = fssk(&["run", &eps, "--strategy", "dicm", "--out", &path(t.path(), "r2")]);
    assert_eq!(dicm.status.code(), Some(1));
    assert!(stderr(&dicm).contains("mode error"), "{}", stderr(&dicm));
}

#[test]
fn run_report_schema_and_outputs() {
    let t = tempfile::tempdir().unwrap();
    let eps = path(t.path(), "eps");
    assert!(fssk(&["gen", "--n", "3", "--shots", "2", "--distractor", "--out", &eps]).status.success());
    let out = t.path().join("r");
    let o = fssk(&[
        "run", &eps, "--strategy", "cyctr", "--cab", "3", "--fold", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let r: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["command"], "run");
    for key in ["seed", "delta", "strategy", "blocks", "cab", "epsilon", "fold"] {
        assert!(!r["config"][key].is_null(), "config.{key}");
    }
    assert_eq!(r["config"]["strategy"], "cyctr");
    let episodes = r["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), 3);
    for e in episodes {
        assert_eq!(e["k"], 2);
        assert_eq!(e["masking"].as_array().unwrap().len(), 3);
        for key in ["iou", "prior_ce", "baseline_prior_ce"] {
            assert!(e["metrics"][key].is_f64(), "metrics.{key}");
        }
        for (_, file) in e["outputs"].as_object().unwrap() {
            let p = out.join(file.as_str().unwrap());
            assert!(fst::read_value(fs::File::open(&p).unwrap()).is_ok(), "{}", p.display());
        }
    }
    let prior = fst::load_tensor(out.join("episodes/episode_0000/prior.fst")).unwrap();
    assert_eq!(prior.dims(), &[1, 8, 8]);
    let decoded = fst::load_tensor(out.join("episodes/episode_0000/decoder_output.fst")).unwrap();
    assert_eq!(decoded.dims(), &[16, 8, 8]);

    for key in ["miou", "fb_iou", "prior_ce_mean", "prior_ce_std", "episode_count"] {
        assert!(!r["summary"]["pmgm"][key].is_null(), "summary.pmgm.{key}");
        assert!(!r["summary"]["baseline"][key].is_null(), "summary.baseline.{key}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fold,miou,fb_iou,ce_mean,ce_std,n");
    assert!(lines[1].starts_with("2,") && lines[1].ends_with(",3"));
}

#[test]
fn run_rejects_malformed_fst_with_offset() {
    let t = tempfile::tempdir().unwrap();
    let eps = path(t.path(), "eps");
    assert!(fssk(&["gen", "--n", "1", "--out", &eps]).status.success());
    let target = t.path().join("eps/episode_0000/support_0_features.fst");
    let mut bytes = fs::read(&target).unwrap();
    bytes[0] = b'X';
    fs::write(&target, bytes).unwrap();
    let o = fssk(&["run", &eps, "--out", &path(t.path(), "r")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at byte 0"), "{}", stderr(&o));
}

#[test]
fn run_validates_flags() {
    let t = tempfile::tempdir().unwrap();
    let eps = path(t.path(), "eps");
    assert!(fssk(&["gen", "--n", "1", "--out", &eps]).status.success());
    let out = path(t.path(), "r");
    for bad in [
        vec!["--cab", "6"],
        vec!["--cab", "0"],
        vec!["--delta", "1.0"],
        vec!["--epsilon", "0.7"],
        vec!["--strategy", "both"],
    ] {
        let mut args = vec!["run", eps.as_str(), "--out", out.as_str()];
        args.extend(bad.iter());
        assert_eq!(fssk(&args).status.code(), Some(1), "{bad:?}");
    }
    let missing = fssk(&["run", &path(t.path(), "nope"), "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn mask_stats_csv_shape_and_bounds() {
    let t = tempfile::tempdir().unwrap();
    let out = path(t.path(), "ms");
    let o = fssk(&["mask-stats", "--n", "4", "--size", "16x12x12", "--distractor", "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("ms/mask_stats.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    let cells = 144.0;
    for row in &rows {
        let (mean, max): (f64, f64) = (row[3].parse().unwrap(), row[5].parse().unwrap());
        match row[0] {
            "dicm" => assert!(max <= 1.0 / cells + 1e-9, "{row:?}"),
            "cyctr" => {
                let cols: f64 = row[7].parse().unwrap();
                assert!((mean - cols / cells).abs() < 1e-6, "{row:?}");
            }
            other => panic!("unexpected strategy {other}"),
        }
    }
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("ms/mask_stats.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 8);
}

#[test]
fn oracle_passes_and_catches_injected_faults() {
    let t = tempfile::tempdir().unwrap();
    let json = path(t.path(), "oracle.json");
    let ok = fssk(&["oracle", "--out", &json]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("pmgm_prior") && stdout.contains("max |diff|"));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(r["passed"], true);

    for fault in ["conv", "minmax"] {
        let bad = fssk(&["oracle", "--inject-fault", fault]);
        assert_eq!(bad.status.code(), Some(3), "{fault}");
        assert!(String::from_utf8_lossy(&bad.stdout).contains("failing case"));
    }
}
