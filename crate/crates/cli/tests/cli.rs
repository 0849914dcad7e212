use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_onionlab");

const TINY: &[&str] = &[
    "--n-symbols", "6", "--l-max", "4", "--train-size", "300", "--test-size", "60",
    "--n", "8", "--eval-size", "20", "--eval-every", "10", "--batch-size", "32",
];

fn run(args: &[&str], extra: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .args(TINY)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], extra: &[&str]) -> String {
    let out = run(args, extra);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error record");
    serde_json::from_str(line).expect("error record is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_provenance(dir: &Path) {
    assert!(dir.join("config.toml").exists(), "{}", dir.display());
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
    assert!(m["version"].as_str().unwrap().starts_with("0.1.0+"));
    assert!(m["seed"].is_u64());
    assert!(m["inputs"].is_object());
}

#[test]
fn full_pipeline_writes_artifacts_and_a_stable_report() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("runs");
    let data = tmp.path().join("data");
    ok(&["gen-data", "--out", p(&data)], &[]);
    assert_provenance(&data);

    let model_dir = root.join("base");
    let stdout = ok(&["train", "--data", p(&data), "--out", p(&model_dir)], &["--steps", "20"]);
    assert!(stdout.contains("exact-match"));
    assert_provenance(&model_dir);
    let model = model_dir.join("model.ckpt");
    let metrics = std::fs::read_to_string(model_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    // A second run with the same seed reproduces metrics and weights exactly.
    let again = tmp.path().join("again");
    ok(&["train", "--data", p(&data), "--out", p(&again)], &["--steps", "20"]);
    assert_eq!(metrics, std::fs::read_to_string(again.join("metrics.jsonl")).unwrap());
    assert_eq!(
        std::fs::read(&model).unwrap(),
        std::fs::read(again.join("model.ckpt")).unwrap()
    );

    let m = p(&model);
    let aux = ["--steps", "10"];
    ok(&["eval", "--model", m, "--data", p(&data), "--out", p(&root.join("eval"))], &[]);
    for kind in ["unigram", "bigram", "onion"] {
        let out = root.join(kind);
        ok(&["intervene", kind, "--model", m, "--data", p(&data), "--out", p(&out)], &aux);
        assert!(out.join("intervention.aux").exists());
        assert_provenance(&out);
    }
    ok(
        &["intervene", "onion", "--control", "--model", m, "--data", p(&data), "--out", p(&root.join("control"))],
        &aux,
    );
    for kind in ["linear", "mlp", "gru-ar", "gru-noinput", "onion"] {
        let out = root.join(format!("probe-{kind}"));
        ok(&["probe", kind, "--model", m, "--data", p(&data), "--out", p(&out)], &aux);
        assert!(out.join("probe.aux").exists());
    }
    ok(&["gates", "--model", m, "--data", p(&data), "--out", p(&root.join("gates"))], &[]);
    ok(&["toy", "--data", p(&data), "--out", p(&root.join("toy"))], &aux);

    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    let s1 = ok(&["report", "--root", p(&root), "--out", p(&r1)], &[]);
    let s2 = ok(&["report", "--root", p(&root), "--out", p(&r2)], &[]);
    assert_eq!(s1, s2);
    assert!(s1.starts_with("13 result files"), "{s1}");
    for name in [
        "table1_base.tsv",
        "table2_interventions.tsv",
        "table3_probes.tsv",
        "table4_gates_toy.tsv",
        "summary.txt",
        "manifest.json",
    ] {
        assert_eq!(
            std::fs::read(r1.join(name)).unwrap(),
            std::fs::read(r2.join(name)).unwrap(),
            "{name}"
        );
    }
    let t2 = std::fs::read_to_string(r1.join("table2_interventions.tsv")).unwrap();
    assert_eq!(t2.lines().count(), 5);
    assert!(t2.contains("\tonion-control\t"));
}

#[test]
fn gate_csv_has_one_row_per_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("m");
    ok(&["train", "--out", p(&m)], &["--steps", "2", "--eval-every", "1"]);
    let g = tmp.path().join("g");
    ok(&["gates", "--model", p(&m.join("model.ckpt")), "--input", "3 1 4 0", "--out", p(&g)], &[]);
    let csv = std::fs::read_to_string(g.join("gates.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let vals: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 5);
        assert!(vals.iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let ppm = std::fs::read(g.join("gates.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n40 64\n255\n"));
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["eval", "--model", p(&tmp.path().join("none.ckpt")), "--out", p(tmp.path())], &[]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(error_record(&missing)["error"], "missing-checkpoint");

    let m = tmp.path().join("m");
    ok(&["train", "--out", p(&m)], &["--steps", "1", "--eval-every", "1"]);
    let ckpt = m.join("model.ckpt");
    let mismatch = Command::new(BIN)
        .args(["eval", "--model", p(&ckpt), "--out", p(&tmp.path().join("e"))])
        .output()
        .unwrap();
    assert_eq!(mismatch.status.code(), Some(4));
    assert_eq!(error_record(&mismatch)["exit_code"], 4);
    let wrong_n = run(&["eval", "--model", p(&ckpt), "--out", p(&tmp.path().join("e"))], &["--n", "16"]);
    assert_eq!(wrong_n.status.code(), Some(4));

    let numeric = run(&["train", "--out", p(&tmp.path().join("nan"))], &["--steps", "5", "--lr", "1e300"]);
    assert_eq!(numeric.status.code(), Some(5));
    assert!(tmp.path().join("nan/model.ckpt").exists());

    let usage = Command::new(BIN).args(["train", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let bad_input = run(&["gates", "--model", p(&ckpt), "--input", "9", "--out", p(tmp.path())], &[]);
    assert_eq!(bad_input.status.code(), Some(2));

    let help = Command::new(BIN).arg("--help").output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for code in ["3  missing", "4  configuration", "5  numeric"] {
        assert!(text.contains(code), "{text}");
    }
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[task]\nn_symbols = 6\nl_max = 4\ntrain_size = 300\ntest_size = 60\n[train]\nhidden = 4\nsteps = 3\neval_every = 1\neval_size = 10\n",
    )
    .unwrap();
    let out = tmp.path().join("m");
    let o = Command::new(BIN)
        .args(["train", "--config", p(&cfg), "--steps", "2", "--out", p(&out)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.contains("hidden = 4"));
    assert!(resolved.contains("steps = 2"));
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 2);
}
