use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[run]
n_clients = 3
rounds_per_task = 2
local_epochs = 1
select_ratio = 1.0
lr = 0.05
batch_size = 8
algo = "fedssi"
reg_strength = 1.0
lambda = 0.5
alpha_dir = 5.0
seed = 2
hidden = [6]

[stream]
kind = "class_il"
feature_dim = 4
total_classes = 4
n_tasks = 2
samples_per_class_train = 15
samples_per_class_test = 5
cluster_spread = 1.0
"#;

fn cflsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cflsim"))
        .args(args)
        .env("CFLSIM_THREADS", "2")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_prints_a_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = cflsim(&["run", "--config", &cfg, "--algo", "fedavg", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["algo"], "fedavg");
    assert_eq!(rec["seed"], 9);
    assert!(rec.get("lambda").is_none());
    assert_eq!(rec["matrix"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn run_writes_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let res = dir.path().join("res");
    let out = cflsim(&["run", "--config", &cfg, "--out", res.to_str().unwrap()]);
    assert!(out.status.success());
    for f in ["records.jsonl", "summary.csv", "manifest.json"] {
        assert!(res.join(f).exists(), "{f} missing");
    }
    assert!(String::from_utf8_lossy(&out.stderr).contains("fedssi seed 2"));
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let res = dir.path().join("sweep");
    let res = res.to_str().unwrap();
    let out = cflsim(&["sweep", "--config", &cfg, "--lambda", "0.2,0.8", "--alpha-dir", "5,100", "--seeds", "1..3", "--out", res]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(Path::new(res).join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 12);

    let md = cflsim(&["report", "--in", res]);
    assert!(md.status.success());
    let md = String::from_utf8(md.stdout).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| fedssi |")).count(), 4);
    assert!(md.contains("| 3 |"));

    let csv = cflsim(&["report", "--in", res, "--format", "csv"]);
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert!(csv.starts_with("algo,alpha_dir,lambda,n_seeds,"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn sweeps_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let strip = |path: &Path| -> Vec<serde_json::Value> {
        std::fs::read_to_string(path.join("records.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["wall_ms"] = 0.into();
                v
            })
            .collect()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = cflsim(&["sweep", "--config", &cfg, "--lambda", "0.5", "--alpha-dir", "5", "--seeds", "4,5", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("lambda = 0.5\n", ""));
    let out = cflsim(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let out = cflsim(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = cflsim(&["run", "--config", &cfg, "--algo", "sgd"]);
    assert!(!out.status.success());

    let out = cflsim(&["sweep", "--config", &cfg, "--lambda", "0.5", "--alpha-dir", "1", "--seeds", "5..1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_missing_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cflsim(&["report", "--in", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("records.jsonl"));
}
