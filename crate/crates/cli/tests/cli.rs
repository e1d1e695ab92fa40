use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedat::checkpoint::Checkpoint;

const SMALL: &str = r#"
[run]
rounds = 3

[data]
class_count = 4
per_class = 10
test_per_class = 5
input_dim = 4

[model]
hidden = [6]

[partition]
clients = 2
skew = 10.0

[attack]
t_steps = 2
epsilon = "8/255"
alpha = "2/255"

[optimizer]
batch_size = 8
"#;

fn fedat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedat"))
        .args(args)
        .env_remove("FEDAT_OUT")
        .output()
        .expect("spawn fedat")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = fedat(&[
        "run",
        "--config",
        "/nonexistent/exp.toml",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["path"], "/nonexistent/exp.toml");
    assert!(err["message"]
        .as_str()
        .unwrap()
        .contains("/nonexistent/exp.toml"));
}

#[test]
fn invalid_fields_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = fedat(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--set",
        "optimizer.learning_rate=-1",
        "--set",
        "partition.clients=0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_json(&out)["message"].as_str().unwrap().to_string();
    assert!(msg.contains("learning_rate"), "{msg}");
    assert!(msg.contains("clients"), "{msg}");
    assert!(!out_dir.exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (out, workers) in [(&a, "1"), (&b, "2")] {
        let o = fedat(&[
            "run",
            "--config",
            s(&cfg),
            "--out",
            s(out),
            "--seed",
            "7",
            "--workers",
            workers,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.jsonl", "summary.csv", "final.ckpt", "config.toml"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(std::fs::read_to_string(a.join("config.toml"))
        .unwrap()
        .contains("seed = 7"));
    let report = fedat(&["report", s(&a)]);
    assert!(report.status.success());
    let table = String::from_utf8(report.stdout).unwrap();
    assert!(table.starts_with("round,e_t,nat_acc,adv_acc,mean_loss\n"));
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn schedule_overrides_select_the_decaying_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let o = fedat(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--set",
        "run.rounds=7",
        "--set",
        "run.eval_every=0",
        "--set",
        "attack.t_steps=1",
        "--set",
        "schedule.e0=50",
        "--set",
        "schedule.gamma_e=0.5",
        "--set",
        "schedule.freq_e=5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = fedat::metrics::read_metrics(&out_dir.join("metrics.jsonl")).unwrap();
    let epochs: Vec<u32> = records.iter().map(|r| r.e_t).collect();
    assert_eq!(epochs, vec![50, 50, 50, 50, 50, 25, 25]);
}

#[test]
fn sweep_over_local_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let o = fedat(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--axis",
        "schedule.fixed_e",
        "--values",
        "1,5,20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["1", "5", "20"] {
        assert!(out_dir
            .join(format!("schedule.fixed_e={v}/metrics.jsonl"))
            .exists());
    }
    let table = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "value,status,nat_acc,adv_acc,mean_loss");
    assert_eq!(rows.len(), 4);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1) == Some("ok")));
}

#[test]
fn lambda_zero_sweep_row_matches_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let sweep = dir.path().join("sweep");
    let o = fedat(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&sweep),
        "--set",
        "fusion.kind=fedcurv",
        "--axis",
        "fusion.lambda",
        "--values",
        "0,0.01,1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let avg = dir.path().join("avg");
    let o = fedat(&["run", "--config", s(&cfg), "--out", s(&avg)]);
    assert!(o.status.success());

    let read = |p: PathBuf| Checkpoint::read(&p).unwrap().values;
    let fedavg = read(avg.join("final.ckpt"));
    let zero = read(sweep.join("fusion.lambda=0/final.ckpt"));
    assert!(zero.max_abs_diff(&fedavg) <= 1e-12);
    let one = read(sweep.join("fusion.lambda=1/final.ckpt"));
    assert!(one.max_abs_diff(&fedavg) > 0.0);
}

#[test]
fn empty_sweep_is_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let o = fedat(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--axis",
        "schedule.fixed_e",
        "--values",
        "",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn sweep_continues_past_failed_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let o = fedat(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
        "--axis",
        "optimizer.learning_rate",
        "--values",
        "-1,0.01",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let table = std::fs::read_to_string(out_dir.join("comparison.csv")).unwrap();
    assert!(table.contains("\n-1,failed,"), "{table}");
    assert!(table.contains("\n0.01,ok,"), "{table}");
}

fn trained_checkpoint(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, SMALL);
    let out_dir = dir.join("run");
    let o = fedat(&["run", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (cfg, out_dir.join("final.ckpt"))
}

#[test]
fn interpolating_a_model_with_itself_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_checkpoint(dir.path());
    let out_dir = dir.path().join("interp");
    let o = fedat(&[
        "interpolate",
        s(&ckpt),
        s(&ckpt),
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out_dir.join("interpolation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 29);
    assert_eq!(rows[0][0], "-0.2");
    assert_eq!(rows[28][0], "1.2");
    assert!(rows
        .iter()
        .all(|r| r[1] == rows[0][1] && r[2] == rows[0][2]));
}

#[test]
fn interpolation_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained_checkpoint(dir.path());
    let other = dir.path().join("other");
    let o = fedat(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&other),
        "--set",
        "model.hidden=[3]",
    ]);
    assert!(o.status.success());
    let o = fedat(&[
        "interpolate",
        s(&ckpt),
        s(&other.join("final.ckpt")),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "checkpoint");
}

#[test]
fn svcca_of_identical_checkpoints_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained_checkpoint(dir.path());
    let probe = dir.path().join("probe.csv");
    let mut text = String::from("a,b,c,d\n");
    for i in 0..30 {
        let x = i as f64 / 30.0;
        text.push_str(&format!(
            "{x},{},{},{}\n",
            (x * 7.0) % 1.0,
            1.0 - x,
            (x * 3.0) % 1.0
        ));
    }
    std::fs::write(&probe, text).unwrap();
    let out_dir = dir.path().join("svcca");
    let o = fedat(&[
        "svcca",
        s(&ckpt),
        s(&ckpt),
        "--probe",
        s(&probe),
        "--out",
        s(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out_dir.join("svcca.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let score: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((score - 1.0).abs() < 1e-6, "{row}");
    }
}
