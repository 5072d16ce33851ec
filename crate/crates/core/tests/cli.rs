use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twoscale::data::{parse_dataset, RunManifest};
use twoscale::inference::FitReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (head, rows)
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let usage = [
        vec![
            "simulate",
            "--mode",
            "distributional",
            "--pools",
            "2",
            "--seed",
            "1",
            "--coherent-fraction",
            "1",
            "--over-rotation",
            "0.05",
            "--out",
            "x.csv",
        ],
        vec![
            "simulate", "--mode", "stepwise", "--pools", "2", "--out", "x.csv",
        ],
        vec![
            "bounds",
            "--dn",
            "1e-3",
            "--gates-max",
            "10",
            "--out",
            "b.csv",
            "--bogus",
        ],
        vec!["fit", "--data", "d.csv", "--out", "r.json"],
    ];
    for args in usage {
        assert_eq!(run_in(d, &args).status.code(), Some(2), "{args:?}");
    }
    let missing = run_in(
        d,
        &[
            "fit", "--data", "nope.csv", "--seed", "1", "--out", "r.json",
        ],
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    fs::write(d.join("bad.csv"), "gates,shots,zeros\n4,8192,9000\n").unwrap();
    let bad = run_in(
        d,
        &["fit", "--data", "bad.csv", "--seed", "1", "--out", "r.json"],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("zeros > shots"));
}

#[test]
fn parse_examples() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    fs::write(
        &p,
        "gates,shots,zeros,timestamp\n4,8192,8100,2022-03-01T10:00:00Z\n",
    )
    .unwrap();
    let d = parse_dataset(&p).unwrap();
    assert_eq!(
        (d.records[0].gates.0, d.records[0].shots, d.records[0].zeros),
        (4, 8192, 8100)
    );
    assert_eq!(
        d.records[0].timestamp.as_deref(),
        Some("2022-03-01T10:00:00Z")
    );
    fs::write(&p, "gates,shots,frequency\n8,8192,0.9887\n").unwrap();
    assert_eq!(parse_dataset(&p).unwrap().records[0].zeros, 8099);
    fs::write(
        &p,
        "gates,shots,zeros,timestamp\n4,8192,9000,2022-03-01T10:00:00Z\n",
    )
    .unwrap();
    let e = parse_dataset(&p).unwrap_err().to_string();
    assert!(e.contains("zeros > shots") && e.contains("line 2"), "{e}");
}

#[test]
fn bounds_without_pool_noise_meet_at_half() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "bounds",
            "--dini",
            "0.01",
            "--dn",
            "2e-3",
            "--gates-max",
            "4000",
            "--gate-step",
            "50",
            "--out",
            "b.csv",
        ],
    );
    let (head, rows) = read_csv(&dir.path().join("b.csv"));
    assert_eq!(&head[..4], ["gates", "lower", "upper", "pool_mean"]);
    for r in &rows {
        assert!((r[1] + r[2] - 1.0).abs() < 1e-15);
        assert!(r[4..].iter().all(|&q| q == r[2]));
    }
    let last = rows.last().unwrap();
    assert!((last[2] - 0.5).abs() < 1e-6 && (last[1] - 0.5).abs() < 1e-6);
    assert!(dir.path().join("b.csv.manifest.json").exists());
}

#[test]
fn tables_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "pdf", "--dini", "0.02", "--dn", "5e-4", "--dq", "3e-4", "--gates", "200", "--grid",
            "11", "--out", "p.csv",
        ],
    );
    let (head, rows) = read_csv(&d.join("p.csv"));
    assert_eq!(head, ["p", "prob_pdf", "pool_pdf"]);
    assert_eq!(rows.len(), 11);
    ok(
        d,
        &[
            "moments",
            "--dn",
            "5e-4",
            "--gates-max",
            "100",
            "--gate-step",
            "10",
            "--out",
            "m.csv",
        ],
    );
    let (_, rows) = read_csv(&d.join("m.csv"));
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][2], 1.0);
    assert!((rows[10][2] - 0.5 - 0.5 * (-0.1f64).exp()).abs() < 1e-15);
}

fn outputs_of(dir: &Path, manifest: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let m = RunManifest::read(dir.join(manifest)).unwrap();
    m.outputs
        .iter()
        .map(|o| (dir.join(o), fs::read(dir.join(o)).unwrap()))
        .collect()
}

/// Runs a command, deletes its outputs, replays its manifest and compares bytes.
fn assert_replays(dir: &Path, args: &[&str], manifest: &str) {
    ok(dir, args);
    let before = outputs_of(dir, manifest);
    let manifest_bytes = fs::read(dir.join(manifest)).unwrap();
    for (p, _) in &before {
        fs::remove_file(p).unwrap();
    }
    ok(dir, &["replay", "--manifest", manifest]);
    for (p, bytes) in &before {
        assert_eq!(&fs::read(p).unwrap(), bytes, "{}", p.display());
    }
    assert_eq!(fs::read(dir.join(manifest)).unwrap(), manifest_bytes);
    ok(dir, args);
    for (p, bytes) in &before {
        assert_eq!(&fs::read(p).unwrap(), bytes, "rerun {}", p.display());
    }
}

#[test]
fn stochastic_commands_replay_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::copy(fixture("synthetic.csv"), d.join("data.csv")).unwrap();
    assert_replays(
        d,
        &[
            "simulate",
            "--mode",
            "stepwise",
            "--dn",
            "5e-4",
            "--dq",
            "3e-4",
            "--gates-max",
            "60",
            "--gate-step",
            "20",
            "--pools",
            "3",
            "--shots",
            "64",
            "--seed",
            "5",
            "--out",
            "s.csv",
        ],
        "s.csv.manifest.json",
    );
    assert_replays(
        d,
        &[
            "simulate",
            "--mode",
            "stepwise",
            "--gates-max",
            "40",
            "--pools",
            "1",
            "--shots",
            "64",
            "--seed",
            "5",
            "--coherent-fraction",
            "0.5",
            "--over-rotation",
            "-0.05",
            "--out",
            "c.csv",
        ],
        "c.csv.manifest.json",
    );
    assert_replays(
        d,
        &[
            "simulate",
            "--mode",
            "distributional",
            "--dini",
            "0.02",
            "--dn",
            "5e-4",
            "--dq",
            "3e-4",
            "--gates-max",
            "500",
            "--gate-step",
            "100",
            "--pools",
            "4",
            "--seed",
            "9",
            "--out",
            "t.csv",
        ],
        "t.csv.manifest.json",
    );
    assert_replays(
        d,
        &[
            "fit",
            "--data",
            "data.csv",
            "--iters",
            "1500",
            "--burn-in",
            "500",
            "--thin",
            "5",
            "--seed",
            "3",
            "--out",
            "r.json",
        ],
        "r.json.manifest.json",
    );
    assert_replays(
        d,
        &[
            "report",
            "--chain",
            "r.json.chain.csv",
            "--out",
            "summary.json",
        ],
        "summary.json.manifest.json",
    );
}

#[test]
fn golden_fit_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::copy(fixture("synthetic.csv"), d.join("synthetic.csv")).unwrap();
    ok(
        d,
        &[
            "fit",
            "--data",
            "synthetic.csv",
            "--iters",
            "4000",
            "--burn-in",
            "2000",
            "--thin",
            "10",
            "--seed",
            "7",
            "--out",
            "report.json",
        ],
    );
    let got = fs::read(d.join("report.json")).unwrap();
    let want = fs::read(fixture("synthetic_report.json")).unwrap();
    assert!(got == want, "report differs from the committed golden file");
    let rep: FitReport = serde_json::from_slice(&got).unwrap();
    assert_eq!(
        rep.log_likelihood_ratio,
        rep.max_log_lik_two_level - rep.max_log_lik_single_level
    );
}

#[test]
fn simulate_then_fit_recovers_rates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gates: Vec<String> = (0..50)
        .map(|i| (4 * (1 + (i as f64 * 499.0 / 49.0).round() as u64)).to_string())
        .collect();
    let gates = gates.join(",");
    ok(
        d,
        &[
            "simulate",
            "--mode",
            "distributional",
            "--dini",
            "0.0218",
            "--dn",
            "4.9764e-4",
            "--dq",
            "3.2418e-4",
            "--gates",
            &gates,
            "--pools",
            "1",
            "--shots",
            "8192",
            "--seed",
            "101",
            "--out",
            "sim.csv",
        ],
    );
    ok(
        d,
        &[
            "fit",
            "--data",
            "sim.csv",
            "--iters",
            "60000",
            "--burn-in",
            "20000",
            "--thin",
            "20",
            "--seed",
            "1",
            "--out",
            "fit.json",
        ],
    );
    let rep: FitReport = serde_json::from_slice(&fs::read(d.join("fit.json")).unwrap()).unwrap();
    let post = &rep.posterior;
    for (name, got, want) in [
        ("d_ini", post.d_ini.mean, 0.0218),
        ("d_n", post.d_n.mean, 4.9764e-4),
        ("d_q", post.d_q.mean, 3.2418e-4),
    ] {
        assert!(
            ((got - want) / want).abs() < 0.25,
            "{name}: {got} vs {want}"
        );
    }
    assert!(rep.log_likelihood_ratio > 50.0);
}
