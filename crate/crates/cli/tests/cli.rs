use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn marketsift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marketsift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_synth(dir: &Path, length: usize) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, format!("length = {length}\nseed = 5\nmarket_id = \"syn\"\n")).unwrap();
    let out = dir.join("syn.csv");
    let o = marketsift(&["synth", "--spec", p(&spec), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

const SMALL_CONFIG: &str = r#"
seed = 3
test_fractions = [0.3]
baseline_replicates = 200
learners = [{ kind = "knn", k = 3 }]
gmm.enabled = false

[[markets]]
id = "syn"
path = "syn.csv"
"#;

#[test]
fn synth_then_run_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 300);
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = marketsift(&["run", "--config", p(&cfg), "--out", p(&out), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 1 + 5, "one row per source");
    assert!(lines[0].starts_with("market,cluster,source,learner,test_fraction"));
    assert!(out.join("report_meta.json").exists());
    let figure = fs::read_to_string(out.join("figure_syn.csv")).unwrap();
    assert!(figure.starts_with("cluster,source,learner,apc,baseline_mean,baseline_p2_5,baseline_p97_5"));
}

#[test]
fn only_filter_restricts_cells() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 300);
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = marketsift(&[
        "run", "--config", p(&cfg), "--out", p(&out), "--only", "source=high,learner=knn",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().nth(1).unwrap().starts_with("syn,all,high,knn,0.3,"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    write_synth(dir.path(), 300);
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, format!("{SMALL_CONFIG}\nwindwo = 15\n")).unwrap();
    let o = marketsift(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let spec = dir.path().join("bad_spec.toml");
    fs::write(&spec, "length = 50\n").unwrap();
    let o = marketsift(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn input_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let o = marketsift(&["run", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "missing candle file");

    let candles = write_synth(dir.path(), 300);
    let o = marketsift(&[
        "decompose", "--input", p(&candles), "--column", "nope", "--out", p(&dir.path().join("d.csv")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn decompose_writes_imf_table() {
    let dir = tempfile::tempdir().unwrap();
    let candles = write_synth(dir.path(), 256);
    let out = dir.path().join("imfs.csv");
    let o = marketsift(&["decompose", "--input", p(&candles), "--column", "close", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert!(text.starts_with("t,input,imf_1,"));
    assert_eq!(text.lines().count(), 257);
}
