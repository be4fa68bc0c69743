use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use filterbasis::trainer::residuals;
use filterbasis::{count_params, load_model, split_and_flatten, LayerOp, LayerShape, ModelGraph};
use filterbasis_oracles::svd_tail_norm;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn fb(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_filterbasis"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> String {
    let r = fb(args);
    assert_eq!(
        r.code, 0,
        "{args:?}\nstdout:\n{}\nstderr:\n{}",
        r.stdout, r.stderr
    );
    r.stdout
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn row<'a>(table: &'a str, first: &str) -> Vec<&'a str> {
    table
        .lines()
        .find(|l| l.split_whitespace().next() == Some(first))
        .unwrap_or_else(|| panic!("no row `{first}` in\n{table}"))
        .split_whitespace()
        .collect()
}

/// Model files (manifest and blobs) keyed by relative path.
fn artifact(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![(
        PathBuf::from("model.json"),
        fs::read(dir.join("model.json")).unwrap(),
    )];
    let mut blobs: Vec<_> = fs::read_dir(dir.join("blobs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    blobs.sort();
    for b in blobs {
        out.push((
            b.strip_prefix(dir).unwrap().to_path_buf(),
            fs::read(&b).unwrap(),
        ));
    }
    out
}

#[test]
fn plan_prints_shared_and_unshared_goldens() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "edsr", "--out", &p(d, "edsr")]);
    let shared = ok(&[
        "plan",
        "--model",
        &p(d, "edsr"),
        "--out",
        &p(d, "a"),
        "--m",
        "32",
        "--share",
        "block",
    ]);
    let r = row(&shared, "block0");
    assert_eq!((r[5], r[6], r[7]), ("90112", "1179648", "7.6%"), "{shared}");
    let unshared = ok(&[
        "plan",
        "--model",
        &p(d, "edsr"),
        "--out",
        &p(d, "b"),
        "--m",
        "32",
    ]);
    assert_eq!(
        row(&unshared, "total")[2..5],
        ["163840", "1179648", "13.9%"],
        "{unshared}"
    );
    let auto = ok(&[
        "plan",
        "--model",
        &p(d, "edsr"),
        "--out",
        &p(d, "c"),
        "--m",
        "32",
        "--s",
        "auto",
    ]);
    let r = row(&auto, "block0.conv1");
    assert_eq!((r[3], r[4]), ("4", "64"), "{auto}");

    ok(&["synth", "srresnet", "--out", &p(d, "sr")]);
    let sr = ok(&[
        "plan",
        "--model",
        &p(d, "sr"),
        "--out",
        &p(d, "e"),
        "--m",
        "14",
    ]);
    assert_eq!(row(&sr, "total")[2..5], ["17920", "73728", "24.3%"], "{sr}");
    let sr2 = ok(&[
        "plan",
        "--model",
        &p(d, "sr"),
        "--out",
        &p(d, "f"),
        "--m",
        "32",
        "--s",
        "2",
        "--format",
        "csv",
    ]);
    assert!(
        sr2.lines()
            .any(|l| l.starts_with("total,2,,,,26624,73728,36.1%,")),
        "{sr2}"
    );
}

#[test]
fn printed_params_equal_count_params() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "resnet", "--out", &p(d, "r"), "--spatial", "8"]);
    for s in ["1", "2", "auto"] {
        let table = ok(&[
            "plan",
            "--model",
            &p(d, "r"),
            "--out",
            &p(d, "rp"),
            "--m",
            "8",
            "--s",
            s,
            "--format",
            "csv",
        ]);
        let g: ModelGraph<f64> = load_model(p(d, "rp")).unwrap();
        let plan = g.plan.as_ref().unwrap();
        for e in &plan.entries {
            let shape = g.conv_shape(g.layer(&e.layer).unwrap()).unwrap().unwrap();
            let want = count_params(shape, e.m, e.s, 1).unwrap();
            let line = table
                .lines()
                .find(|l| l.starts_with(&format!("{},", e.layer)))
                .unwrap();
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[5], want.params_compressed.to_string(), "{line}");
            assert_eq!(cells[6], want.params_original.to_string(), "{line}");
        }
    }
}

#[test]
fn unplannable_split_is_reported_per_layer() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "resnet", "--out", &p(d, "r"), "--spatial", "8"]);
    let r = fb(&[
        "plan",
        "--model",
        &p(d, "r"),
        "--out",
        &p(d, "x"),
        "--m",
        "4",
        "--s",
        "3",
    ]);
    assert_eq!(r.code, 2);
    for layer in ["stage1.conv0", "stage2.conv0", "stage3.conv2"] {
        assert!(r.stderr.contains(layer), "{}", r.stderr);
    }
}

#[test]
fn full_rank_decomposition_is_exact() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "srresnet", "--out", &p(d, "sr")]);
    ok(&[
        "plan",
        "--model",
        &p(d, "sr"),
        "--out",
        &p(d, "sp"),
        "--m",
        "64",
    ]);
    let text = ok(&["decompose", "--model", &p(d, "sp"), "--out", &p(d, "sd")]);
    for line in text.lines().filter(|l| l.starts_with("layer=")) {
        let r: f64 = line.rsplit("residual=").next().unwrap().parse().unwrap();
        assert!(r < 1e-9, "{line}");
    }
}

#[test]
fn decompose_residual_matches_svd_tail() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "srresnet", "--out", &p(d, "sr"), "--seed", "4"]);
    ok(&[
        "plan",
        "--model",
        &p(d, "sr"),
        "--out",
        &p(d, "sp"),
        "--m",
        "14",
        "--s",
        "2",
    ]);
    ok(&["decompose", "--model", &p(d, "sp"), "--out", &p(d, "sd")]);
    let orig: ModelGraph<f64> = load_model(p(d, "sr")).unwrap();
    let comp: ModelGraph<f64> = load_model(p(d, "sd")).unwrap();
    // Blobs are stored in 32-bit, so compare against the stored weight.
    for (layer, r) in residuals(&comp).unwrap() {
        let w = orig
            .blob(&format!("{layer}.weight"))
            .unwrap()
            .to_tensor()
            .unwrap();
        let tail = svd_tail_norm(&split_and_flatten(&w, 2).unwrap().mat, 14);
        assert!((r - tail).abs() <= 1e-5 * tail, "{layer}: {r} vs {tail}");
    }
}

#[test]
fn decompose_without_plan_says_what_to_do() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "pointwise", "--out", &p(d, "pw")]);
    let r = fb(&["decompose", "--model", &p(d, "pw"), "--out", &p(d, "x")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("run `plan` first"), "{}", r.stderr);
}

#[test]
fn verify_passes_fresh_and_fails_corrupted() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "pointwise", "--out", &p(d, "pw")]);
    ok(&[
        "plan",
        "--model",
        &p(d, "pw"),
        "--out",
        &p(d, "pp"),
        "--m",
        "4",
    ]);
    ok(&["decompose", "--model", &p(d, "pp"), "--out", &p(d, "pd")]);
    let v = ok(&["verify", "--model", &p(d, "pd"), "--original", &p(d, "pw")]);
    assert!(v.lines().last().unwrap().starts_with("PASS"), "{v}");

    let blob = d.join("pd/blobs/pw1.coeffs.blob");
    let mut bytes = fs::read(&blob).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0x7f;
    fs::write(&blob, bytes).unwrap();
    let r = fb(&["verify", "--model", &p(d, "pd")]);
    assert_eq!(r.code, 3);
    assert!(r.stdout.contains("FAIL layer=pw1"), "{}", r.stdout);
}

#[test]
fn verify_catches_shape_drift() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "pointwise", "--out", &p(d, "pw")]);
    ok(&["synth", "srresnet", "--out", &p(d, "sr")]);
    ok(&[
        "plan",
        "--model",
        &p(d, "pw"),
        "--out",
        &p(d, "pp"),
        "--m",
        "2",
    ]);
    ok(&["decompose", "--model", &p(d, "pp"), "--out", &p(d, "pd")]);
    let r = fb(&["verify", "--model", &p(d, "pd"), "--original", &p(d, "sr")]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("shape drift"), "{}", r.stderr);
}

fn teacher(d: &Path) {
    ok(&[
        "synth",
        "teacher",
        "--out",
        &p(d, "t"),
        "--dataset",
        &p(d, "data.bin"),
        "--seed",
        "11",
    ]);
    ok(&[
        "plan",
        "--model",
        &p(d, "t"),
        "--out",
        &p(d, "tp"),
        "--m",
        "4",
    ]);
    ok(&["decompose", "--model", &p(d, "tp"), "--out", &p(d, "td")]);
}

fn final_field(report: &str, field: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with("final ")).unwrap();
    let key = format!("{field}=");
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key.as_str()))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn training_recovers_the_teacher() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    teacher(d);
    let report = ok(&[
        "train",
        "--model",
        &p(d, "td"),
        "--dataset",
        &p(d, "data.bin"),
        "--out",
        &p(d, "tt"),
        "--epochs",
        "125",
        "--seed",
        "3",
    ]);
    assert_eq!(final_field(&report, "steps"), 500.0);
    assert!(final_field(&report, "data_loss") < 1e-4, "{report}");
    assert_eq!(
        fs::read_to_string(d.join("tt/train_report.txt")).unwrap(),
        report
    );
    let g: ModelGraph<f64> = load_model(p(d, "tt")).unwrap();
    assert_eq!(g.training.as_ref().unwrap().seed, 3);
}

#[test]
fn zero_epochs_keeps_model_bytes() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    teacher(d);
    ok(&[
        "train",
        "--model",
        &p(d, "td"),
        "--dataset",
        &p(d, "data.bin"),
        "--out",
        &p(d, "t0"),
        "--epochs",
        "0",
    ]);
    assert_eq!(artifact(&d.join("td")), artifact(&d.join("t0")));
}

#[test]
fn zero_gamma_reports_no_penalty_and_export_drops_weights() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    teacher(d);
    let report = ok(&[
        "train",
        "--model",
        &p(d, "td"),
        "--dataset",
        &p(d, "data.bin"),
        "--out",
        &p(d, "tg"),
        "--epochs",
        "2",
        "--gamma",
        "0",
        "--export",
    ]);
    assert_eq!(final_field(&report, "penalty"), 0.0);
    assert!(
        report
            .lines()
            .filter(|l| l.starts_with("epoch="))
            .all(|l| l.contains("penalty=0.000000000e0")),
        "{report}"
    );
    let g: ModelGraph<f64> = load_model(p(d, "tg")).unwrap();
    assert!(g.blobs.keys().all(|k| !k.ends_with(".weight")));
    assert!(g.training.is_none());
}

#[test]
fn runaway_training_exits_numerical() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    teacher(d);
    let r = fb(&[
        "train",
        "--model",
        &p(d, "td"),
        "--dataset",
        &p(d, "data.bin"),
        "--out",
        &p(d, "tx"),
        "--epochs",
        "20",
        "--lr",
        "1000",
    ]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("diverged"), "{}", r.stderr);
}

#[test]
fn report_rows_and_ratios() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "srresnet", "--out", &p(d, "sr"), "--blocks", "2"]);
    let single = ok(&["report", "--model", &p(d, "sr"), "--format", "csv"]);
    assert_eq!(single.lines().count(), 2, "{single}");

    ok(&[
        "plan",
        "--model",
        &p(d, "sr"),
        "--out",
        &p(d, "sp"),
        "--m",
        "14",
        "--share",
        "block",
    ]);
    ok(&["decompose", "--model", &p(d, "sp"), "--out", &p(d, "sd")]);
    let pair = ok(&[
        "report",
        "--model",
        &p(d, "sr"),
        "--model",
        &p(d, "sd"),
        "--format",
        "csv",
    ]);
    let cells: Vec<&str> = pair.lines().nth(2).unwrap().split(',').collect();
    let shape = LayerShape::of(64, 64, 3, 3);
    let planned = count_params(shape, 14, 1, 2).unwrap();
    let want = 2.0 * planned.params_compressed as f64 / (2.0 * planned.params_original as f64);
    let rate: f64 = cells[4].parse().unwrap();
    let vs_first: f64 = cells[7].parse().unwrap();
    assert!((rate - want).abs() < 1e-12, "{rate} vs {want}");
    assert!((vs_first - want).abs() < 1e-12, "{vs_first} vs {want}");

    let r = fb(&["report"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("--model"), "{}", r.stderr);
}

#[test]
fn group_and_network_sharing_pipelines_verify() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(&["synth", "resnet", "--out", &p(d, "r"), "--spatial", "8"]);
    let table = ok(&[
        "plan",
        "--model",
        &p(d, "r"),
        "--out",
        &p(d, "rp"),
        "--m",
        "12",
        "--share",
        "group",
    ]);
    assert!(row(&table, "stage3")[1] == "2", "{table}");
    ok(&["decompose", "--model", &p(d, "rp"), "--out", &p(d, "rd")]);
    ok(&["verify", "--model", &p(d, "rd"), "--original", &p(d, "r")]);

    ok(&["synth", "densenet", "--out", &p(d, "dn"), "--blocks", "4"]);
    let table = ok(&[
        "plan",
        "--model",
        &p(d, "dn"),
        "--out",
        &p(d, "dp"),
        "--m",
        "2",
        "--share",
        "network",
    ]);
    assert_eq!(
        row(&table, "network")[1..5],
        ["4", "8", "1-4", "12"],
        "{table}"
    );
    ok(&["decompose", "--model", &p(d, "dp"), "--out", &p(d, "dd")]);
    ok(&["verify", "--model", &p(d, "dd")]);
    let g: ModelGraph<f64> = load_model(p(d, "dd")).unwrap();
    let bases: std::collections::BTreeSet<&str> = g
        .layers
        .iter()
        .filter_map(|l| match &l.op {
            LayerOp::DecomposedConv { basis, .. } => Some(basis.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(bases.into_iter().collect::<Vec<_>>(), vec!["network.basis"]);
}

#[test]
fn log_variable_is_accepted() {
    let t = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_filterbasis"))
        .env("BASIS_LOG", "debug")
        .args(["synth", "pointwise", "--out", &p(t.path(), "pw")])
        .output()
        .unwrap();
    assert!(out.status.success());
}
