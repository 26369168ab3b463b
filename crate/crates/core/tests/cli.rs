use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn quantcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quantcal"))
        .args(args)
        .env("QUANTCAL_THREADS", "1")
        .output()
        .expect("spawn quantcal")
}

/// Class k images are bright in channel k % 3 so a couple of epochs learn
/// something; the rest is noise.
fn synthetic_cifar(dir: &Path, train: usize, test: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut batch = |n: usize| {
        let mut out = Vec::with_capacity(n * 3073);
        for _ in 0..n {
            let label = rng.gen_range(0..10u8);
            out.push(label);
            for c in 0..3 {
                for _ in 0..1024 {
                    let base = if c == (label % 3) as usize { 150 } else { 40 };
                    out.push(base + rng.gen_range(0..100u8));
                }
            }
        }
        out
    };
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("data_batch_1.bin"), batch(train)).unwrap();
    fs::write(dir.join("test_batch.bin"), batch(test)).unwrap();
}

fn write_config(path: &Path, data: &Path, model: &Path, report: Option<&Path>) {
    let mut output = serde_json::json!({ "model_dir": model });
    if let Some(r) = report {
        output["report"] = serde_json::json!(r);
    }
    let cfg = serde_json::json!({
        "data": { "dir": data },
        "train": { "epochs": 1, "train_samples": 64, "test_samples": 32, "batch_size": 32 },
        "sweep": { "w_bits": [8, 4], "calib_samples": 32 },
        "seed": 3,
        "output": output,
    });
    fs::write(path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    model: PathBuf,
}

fn trained() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    synthetic_cifar(&data, 64, 32);
    let model = root.join("model");
    let config = root.join("run.json");
    write_config(&config, &data, &model, None);
    let out = quantcal(&["train", "--config", config.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    Fixture {
        _tmp: tmp,
        root,
        data,
        model,
    }
}

fn sweep(f: &Fixture, out: &Path) -> Output {
    quantcal(&[
        "sweep",
        "--model",
        f.model.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--w-bits",
        "8,6,4",
        "--a-bits",
        "8",
        "--calib-samples",
        "16",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn train_writes_bundle_and_log() {
    let f = trained();
    let log = fs::read_to_string(f.model.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,test_acc"));
    assert_eq!(lines.count(), 1);
    assert!(f.model.join("manifest.json").exists());
}

#[test]
fn sweep_and_report_are_reproducible() {
    let f = trained();
    let mut runs = Vec::new();
    for i in 0..2 {
        let report = f.root.join(format!("report{i}.json"));
        let out = sweep(&f, &report);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let csv = f.root.join(format!("csv{i}"));
        let out = quantcal(&[
            "report",
            "--in",
            report.to_str().unwrap(),
            "--out-dir",
            csv.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&csv)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| {
                (
                    e.file_name().to_string_lossy().into_owned(),
                    fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files.push(("report.json".into(), fs::read(&report).unwrap()));
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);
    let names: Vec<&str> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "conf_hist.csv",
            "reliability.csv",
            "swapped_hist.csv",
            "sweep.csv",
            "report.json"
        ]
    );

    let sweep_csv = String::from_utf8(runs[0][3].1.clone()).unwrap();
    let mut rows = sweep_csv.lines();
    assert_eq!(
        rows.next(),
        Some("w_bits,swap_pct,delta_err_pct,ratio,acc_q,ece_q")
    );
    let bits: Vec<&str> = rows.map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(bits, ["8", "6", "4"]);

    let reliability = String::from_utf8(runs[0][1].1.clone()).unwrap();
    assert!(reliability.starts_with("bin_lower,bin_upper,count,accuracy,avg_conf\n"));
    assert_eq!(reliability.lines().count(), 16);
    let swapped = String::from_utf8(runs[0][2].1.clone()).unwrap();
    assert!(swapped.starts_with("w_bits,bin_lower,bin_upper,count\n"));
    assert_eq!(swapped.lines().count(), 1 + 3 * 15);
}

#[test]
fn unknown_schema_version_is_rejected_without_output() {
    let f = trained();
    let report = f.root.join("report.json");
    assert!(sweep(&f, &report).status.success());
    let mut doc: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    doc["schema_version"] = serde_json::json!(999);
    fs::write(&report, serde_json::to_vec(&doc).unwrap()).unwrap();
    let csv = f.root.join("csv");
    let out = quantcal(&[
        "report",
        "--in",
        report.to_str().unwrap(),
        "--out-dir",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "report");
    assert!(!csv.exists());
}

#[test]
fn failed_train_removes_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synthetic_cifar(&data, 64, 32);
    let blocker = tmp.path().join("not_a_dir");
    fs::write(&blocker, b"x").unwrap();
    let model = tmp.path().join("model");
    let config = tmp.path().join("run.json");
    write_config(&config, &data, &model, Some(&blocker.join("report.json")));
    let out = quantcal(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_line(&out)["error"]["message"].is_string());
    assert!(!model.exists(), "model dir left behind");
}

#[test]
fn missing_data_reports_machine_readable_error() {
    let f = trained();
    fs::remove_file(f.data.join("test_batch.bin")).unwrap();
    let report = f.root.join("report.json");
    let out = sweep(&f, &report);
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    assert!(err["error"]["kind"].is_string());
    assert!(!report.exists());
}

#[test]
fn unknown_config_key_and_bad_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        br#"{"data": {"dir": "d"}, "output": {"model_dir": "m"}, "epochs": 3}"#,
    )
    .unwrap();
    let out = quantcal(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "config");

    let out = quantcal(&["sweep", "--w-bits", "8,x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");
}

#[test]
fn thread_cap_must_be_positive() {
    let out = Command::new(env!("CARGO_BIN_EXE_quantcal"))
        .args(["report", "--in", "nowhere.json", "--out-dir", "nowhere"])
        .env("QUANTCAL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "config");
}

#[test]
fn thread_count_does_not_change_the_report() {
    let f = trained();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out_path = f.root.join(format!("report_t{threads}.json"));
        let out = Command::new(env!("CARGO_BIN_EXE_quantcal"))
            .args([
                "sweep",
                "--model",
                f.model.to_str().unwrap(),
                "--data",
                f.data.to_str().unwrap(),
            ])
            .args([
                "--w-bits",
                "8,4",
                "--calib-samples",
                "16",
                "--out",
                out_path.to_str().unwrap(),
            ])
            .env("QUANTCAL_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        reports.push(fs::read(&out_path).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
