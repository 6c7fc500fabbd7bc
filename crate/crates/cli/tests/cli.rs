use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qinn::checkpoint::{load_checkpoint, Checkpoint};
use qinn::training::read_epochs_csv;
use serde_json::Value;

fn iris() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.csv")
}

fn config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("c.toml");
    fs::write(&path, format!("[data]\nsource = \"iris\"\npath = {:?}\n{body}", iris().display().to_string())).unwrap();
    path
}

fn qinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qinn")).args(args).env("RUST_LOG", "warn").env_remove("QINN_SEED").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn minimal_train_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[model]\nlist = [\"tqfnn\"]\n[train]\nepochs = 10\nwindow = [1, 10]\n");
    let out = dir.path().join("out");
    let o = qinn(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("seed-0/tqfnn");
    let rows = read_epochs_csv(fs::File::open(run.join("epochs.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 10);
    let summary = json(run.join("summary.json"));
    assert_eq!(summary["model"], "TQFNN");
    assert_eq!(summary["epochs_run"], 10);
    assert!(summary["config"]["train"]["epochs"] == 10);
    assert!(summary["notes"]["loss"].as_str().unwrap().contains("cross-entropy"));
    let header = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert!(header.lines().next().unwrap().ends_with("config_hash,data_hash"));
    assert!(fs::read_to_string(out.join("config.resolved.toml")).unwrap().starts_with("# config_hash"));
}

#[test]
fn checkpoint_reloads_to_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[model]\nlist = [\"qdfnn\", \"mlp-tanh\"]\n[train]\nepochs = 3\nwindow = [1, 3]\n");
    let out = dir.path().join("out");
    assert!(qinn(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    for name in ["qdfnn", "mlp-tanh"] {
        let path = out.join(format!("seed-0/{name}/checkpoint.json"));
        let model = load_checkpoint(&path).unwrap();
        let mut raw = json(path);
        assert_eq!(raw["provenance"]["seed"], 0);
        raw.as_object_mut().unwrap().remove("provenance");
        let again: Value = serde_json::from_str(&Checkpoint::from(&model).to_json().unwrap()).unwrap();
        assert_eq!(raw, again, "{name}");
    }
}

#[test]
fn missing_dataset_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[data]\nsource = \"iris\"\npath = \"nowhere.csv\"\n").unwrap();
    let out = dir.path().join("out");
    let o = qinn(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let no_attack = config(dir.path(), "[train]\nepochs = 1\n");
    assert_eq!(qinn(&["attack", "--config", s(&no_attack), "--out", s(&out)]).status.code(), Some(2));
    let skip_on_none = config(dir.path(), "[model]\nlist = [\"tqfnn\"]\n[train]\nepochs = 1\n[attack]\ntarget = \"skip\"\n");
    assert_eq!(qinn(&["attack", "--config", s(&skip_on_none), "--out", s(&out)]).status.code(), Some(2));
    let unknown = config(dir.path(), "[train]\nepochz = 1\n");
    assert_eq!(qinn(&["train", "--config", s(&unknown), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(qinn(&["train", "--seeds", "x"]).status.code(), Some(2));
    assert_eq!(qinn(&["report"]).status.code(), Some(2));
    assert_eq!(qinn(&["bogus"]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn outer_attack_on_qinn_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[model]\nlist = [\"qrfnn\", \"mlp\"]\n[train]\nepochs = 2\nwindow = [1, 2]\n[attack]\nform = \"outer\"\n");
    let out = dir.path().join("out");
    assert!(qinn(&["attack", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let q = json(out.join("seed-0/qrfnn/summary.json"));
    let m = json(out.join("seed-0/mlp-leaky-relu/summary.json"));
    assert_eq!(q["attack"]["orthogonality_broken"], true);
    assert!(q["flags"].as_array().unwrap().iter().any(|f| f == "orthogonality broken"));
    assert_eq!(m["attack"]["orthogonality_broken"], false);
    assert_eq!(q["attack"]["epsilons"], m["attack"]["epsilons"]);
    assert!(out.join("seed-0/qrfnn/grad.csv").is_file());
}

#[test]
fn single_seed_ablation_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[train]\nepochs = 4\nwindow = [2, 4]\n");
    let out = dir.path().join("out");
    let o = qinn(&["ablate", "--config", s(&cfg), "--out", s(&out), "--seeds", "3"]);
    assert!(o.status.success());
    let mut r = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let models: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(models, ["TQFNN", "QRFNN", "QDFNN"]);
    assert!(rows.iter().all(|r| &r[1] == "1" && &r[3] == "0.0"));
    assert!(out.join("ablation.txt").is_file());
}

#[test]
fn report_skips_corrupt_runs_and_truncates_window() {
    let dir = tempfile::tempdir().unwrap();
    let short = config(dir.path(), "[model]\nlist = [\"qdfnn\", \"qrfnn\"]\n[train]\nepochs = 3\nwindow = [2, 6]\n");
    let a = dir.path().join("a");
    assert!(qinn(&["train", "--config", s(&short), "--out", s(&a)]).status.success());
    fs::write(dir.path().join("c.toml"), fs::read_to_string(&short).unwrap().replace("epochs = 3", "epochs = 6")).unwrap();
    let b = dir.path().join("b");
    assert!(qinn(&["train", "--config", s(&short), "--out", s(&b), "--seeds", "1"]).status.success());
    fs::write(b.join("seed-1/qrfnn/epochs.csv"), "garbage").unwrap();

    let rep = dir.path().join("rep");
    let o = qinn(&["report", s(&a), s(&b), "--out", s(&rep)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
    let report = json(rep.join("report.json"));
    assert_eq!(report["window"], serde_json::json!([2, 3]));
    assert_eq!(report["truncated"], true);
    assert_eq!(report["skipped"].as_array().unwrap().len(), 1);
    let models: Vec<&str> = report["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["QDFNN", "QRFNN"]);

    let mut r = csv::Reader::from_path(rep.join("window_stats.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    assert_eq!(&header[3], "QDFNN");
    assert_eq!(&header[4], "QRFNN");
    assert_eq!(r.records().count(), 3 * 2 * 3);
    assert!(rep.join("table.csv").is_file() && rep.join("curves.csv").is_file());
}

#[test]
fn report_on_one_run_has_one_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[model]\nlist = [\"qrfnn\"]\n[train]\nepochs = 3\nwindow = [1, 3]\n");
    let out = dir.path().join("out");
    assert!(qinn(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let rep = dir.path().join("rep");
    assert!(qinn(&["report", s(&out), "--out", s(&rep)]).status.success());
    let mut r = csv::Reader::from_path(rep.join("table.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["metric", "QRFNN mean", "QRFNN std_window", "QRFNN std_seeds", "scope", "config_hash", "data_hash"]);
    let rows: Vec<_> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), ["pr_area", "roc_area", "accuracy"]);
    assert_eq!(&rows[0][4], "single run");
}

#[test]
fn seed_env_overrides_config_and_flag_overrides_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("seeded.toml");
    let body = format!("seeds = [7]\n[data]\npath = {:?}\n[model]\nlist = [\"tqfnn\"]\n[train]\nepochs = 1\nwindow = [1, 1]\n", s(&iris()));
    fs::write(&cfg, body).unwrap();
    let out = dir.path().join("env");
    let o = Command::new(env!("CARGO_BIN_EXE_qinn"))
        .args(["train", "--config", s(&cfg), "--out", s(&out)])
        .env("QINN_SEED", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("seed-4").is_dir() && !out.join("seed-7").exists());
    let out = dir.path().join("flag");
    let o = Command::new(env!("CARGO_BIN_EXE_qinn"))
        .args(["train", "--config", s(&cfg), "--out", s(&out), "--seeds", "5"])
        .env("QINN_SEED", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(out.join("seed-5").is_dir() && !out.join("seed-4").exists());
}

#[test]
fn hashes_repeat_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[model]\nlist = [\"qrfnn\"]\n[train]\nepochs = 2\nwindow = [1, 2]\n[corruption]\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(qinn(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(qinn(&["train", "--config", s(&cfg), "--out", s(&b)]).status.success());
    let (sa, sb) = (json(a.join("seed-0/qrfnn/summary.json")), json(b.join("seed-0/qrfnn/summary.json")));
    for k in ["config_hash", "data_hash", "manifest_sha256"] {
        assert_eq!(sa[k], sb[k], "{k}");
    }
    assert_eq!(fs::read(a.join("seed-0/manifest.csv")).unwrap(), fs::read(b.join("seed-0/manifest.csv")).unwrap());
}

#[test]
fn vanishing_attack_matches_clean_run() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[model]\nlist = [\"qrfnn\", \"mlp\"]\n[train]\nepochs = 15\nwindow = [1, 15]\n[attack]\nscale = 1e-9\n";
    let cfg = config(dir.path(), body);
    let (clean, attacked) = (dir.path().join("clean"), dir.path().join("attacked"));
    assert!(qinn(&["train", "--config", s(&cfg), "--out", s(&clean)]).status.success());
    assert!(qinn(&["attack", "--config", s(&cfg), "--out", s(&attacked)]).status.success());
    for name in ["qrfnn", "mlp-leaky-relu"] {
        let read = |root: &Path| read_epochs_csv(fs::File::open(root.join(format!("seed-0/{name}/epochs.csv"))).unwrap()).unwrap();
        let (a, b) = (read(&clean), read(&attacked));
        let acc = |v: &[qinn::training::EpochReport]| v.iter().map(|e| e.accuracy).collect::<Vec<_>>();
        assert_eq!(acc(&a), acc(&b), "{name}");
    }
}
