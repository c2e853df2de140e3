use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn pathloss(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pathloss"));
    cmd.arg("--out-dir").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

const STAGES: [&str; 7] = ["synth", "ingest", "fit", "anova", "residuals", "calibrate", "report"];

fn run_pipeline(out: &Path) {
    let cfg = fixture("small.toml");
    for stage in STAGES {
        ok(&pathloss(&[stage], Some(&cfg), out));
    }
}

fn assert_same(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) {
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect()
}

#[test]
fn full_pipeline_is_complete_tagged_and_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(a.path());

    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("report.json")).unwrap()).unwrap();
    let models = report["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    for m in models {
        let ps: Vec<f64> = m["fade_margins"].as_array().unwrap().iter().map(|r| r["p"].as_f64().unwrap()).collect();
        assert_eq!(ps, vec![0.05, 0.02, 0.01]);
        let fms: Vec<f64> = m["fade_margins"].as_array().unwrap().iter().map(|r| r["fm_db"].as_f64().unwrap()).collect();
        assert!(fms.windows(2).all(|w| w[0] <= w[1]), "margins grow with reliability: {fms:?}");
        assert!(m["residual_family"].is_string());
    }
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("fit_report.json")).unwrap()).unwrap();
    assert_eq!(fit["models"][1]["n_columns"], 37);

    let first = snapshot(a.path());
    let hash = fit["provenance"]["config_hash"].as_str().unwrap().to_string();
    for (name, bytes) in &first {
        let text = String::from_utf8_lossy(bytes);
        if name.ends_with(".csv") {
            assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash},seed=11"), "{name}");
        } else {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["provenance"]["config_hash"], hash.as_str(), "{name}");
            assert_eq!(v["provenance"]["seed"], 11, "{name}");
        }
    }

    // reruns reproduce every byte, in a fresh directory and in place
    run_pipeline(b.path());
    assert_same(&first, &snapshot(b.path()));
    ok(&pathloss(&["calibrate"], Some(&fixture("small.toml")), a.path()));
    assert_same(&first, &snapshot(a.path()));
}

#[test]
fn ingest_ledger_totals_match_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&pathloss(&["synth", "--n-per-device", "60"], None, out));
    let text = fs::read_to_string(out.join("campaign.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // lines[0] is provenance, lines[1] the header
    let mut rows: Vec<String> = lines[2..].iter().map(|s| s.to_string()).collect();
    let n_base = rows.len();
    rows.push(rows[0].clone());
    rows.push(rows[5].clone());
    let mut f: Vec<String> = rows[7].split(',').map(str::to_string).collect();
    f[11] = "12".into();
    f[1] = "1".into();
    rows.push(f.join(","));
    let input = out.join("dirty.csv");
    fs::write(&input, format!("{}\n{}\n", lines[1], rows.join("\n"))).unwrap();

    ok(&pathloss(&["ingest", "--input", input.to_str().unwrap()], None, out));
    let ledger: serde_json::Value = serde_json::from_slice(&fs::read(out.join("drop_ledger.json")).unwrap()).unwrap();
    let l = &ledger["ledger"];
    let get = |k: &str| l[k].as_u64().unwrap() as usize;
    assert_eq!(get("input"), n_base + 3);
    assert_eq!(get("duplicates"), 2);
    assert_eq!(get("sf_filter"), 1);
    assert_eq!(get("outliers"), ((n_base as f64) * 0.01).ceil() as usize);
    assert_eq!(get("input"), get("duplicates") + get("sf_filter") + get("outliers") + get("kept"));
    let cleaned = fs::read_to_string(out.join("cleaned.csv")).unwrap();
    assert_eq!(cleaned.lines().count() - 2, get("kept"));
    let outliers = fs::read_to_string(out.join("outliers.csv")).unwrap();
    assert_eq!(outliers.lines().count() - 2, get("outliers"));
}

#[test]
fn missing_column_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    let text = fs::read_to_string(fixture("tiny_duplicates.csv")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(10);
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&input, stripped).unwrap();
    let o = pathloss(&["ingest", "--input", input.to_str().unwrap()], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_json(&o);
    assert_eq!(e["error"]["kind"], "MissingColumn");
    assert!(e["error"]["message"].as_str().unwrap().contains("snr_db"));
}

#[test]
fn everything_flagged_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("tiny_duplicates.csv");
    let o = pathloss(&["ingest", "--input", input.to_str().unwrap()], Some(&fixture("contaminated.toml")), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_json(&o)["error"]["kind"], "AllRowsDropped");
}

#[test]
fn input_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    // no upstream artifacts yet
    let o = pathloss(&["fit"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "MissingArtifact");

    let cfg = dir.path().join("typo.toml");
    fs::write(&cfg, "seeed = 1\n").unwrap();
    let o = pathloss(&["synth"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "InvalidConfig");

    let o = pathloss(&["fit", "--model", "cubic"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = pathloss(&["ingest", "--input", "/nonexistent/x.csv"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"]["kind"], "InputNotFound");
}

#[test]
fn seed_flag_changes_hash_and_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&pathloss(&["synth", "--n-per-device", "20", "--seed", "1"], None, a.path()));
    ok(&pathloss(&["synth", "--n-per-device", "20", "--seed", "2"], None, b.path()));
    let ta = fs::read_to_string(a.path().join("campaign.csv")).unwrap();
    let tb = fs::read_to_string(b.path().join("campaign.csv")).unwrap();
    assert_ne!(ta.lines().next(), tb.lines().next());
    assert_ne!(ta.lines().nth(2), tb.lines().nth(2));
    assert!(ta.lines().next().unwrap().ends_with(",seed=1"));
}
