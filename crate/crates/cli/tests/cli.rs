use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advinpaint::config::RunConfig;
use advinpaint::image::ImageTensor;
use serde_json::Value;

fn bin(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("run.cfg");
    Command::new(env!("CARGO_BIN_EXE_advinpaint"))
        .arg("--config")
        .arg(&config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = bin(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(&text).unwrap_or(Value::Null)
}

fn usage_error(dir: &Path, args: &[&str]) -> String {
    let out = bin(dir, args);
    assert_eq!(out.status.code(), Some(2), "{args:?} should be a usage error");
    let err: Value = serde_json::from_slice(&out.stderr).expect("error JSON on stderr");
    assert_eq!(err["error"]["kind"], "usage");
    err["error"]["message"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

struct Run {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn trained() -> Run {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    RunConfig::tiny().save(&dir.join("run.cfg")).unwrap();
    let data = s(&dir.join("data"));
    let summary = ok(&dir, &["gen-data", "--out", &data]);
    assert_eq!(summary["images"], 24);
    ok(&dir, &["train-fr", "--data", &data, "--out", &s(&dir.join("fr.ckpt"))]);
    let fr = s(&dir.join("fr.ckpt"));
    ok(&dir, &["train-stage1", "--data", &data, "--fr", &fr, "--out", &s(&dir.join("s1.ckpt"))]);
    let s1 = s(&dir.join("s1.ckpt"));
    ok(&dir, &["train-stage2", "--data", &data, "--fr", &fr, "--stage1", &s1, "--out", &s(&dir.join("s2.ckpt"))]);
    assert!(dir.join("s2.ckpt.log.jsonl").is_file());
    Run { _tmp: tmp, dir }
}

#[test]
fn end_to_end_commands() {
    let run = trained();
    let dir = &run.dir;
    let (data, fr, s1, s2) = (s(&dir.join("data")), s(&dir.join("fr.ckpt")), s(&dir.join("s1.ckpt")), s(&dir.join("s2.ckpt")));

    let cal = ok(dir, &["calibrate", "--data", &data, "--fr", &fr, "--out", &s(&dir.join("cal.json"))]);
    assert!(cal["tau"].is_number());
    ok(dir, &["make-pairs", "--data", &data, "--out", &s(&dir.join("pairs.txt"))]);
    let pairs_text = std::fs::read_to_string(dir.join("pairs.txt")).unwrap();
    assert!(pairs_text.starts_with("# advinpaint pair-list v1\n"));
    assert_eq!(pairs_text.lines().count(), 1 + RunConfig::tiny().eval.pairs);

    let report_path = dir.join("eval.json");
    let pairs = s(&dir.join("pairs.txt"));
    let base = ["--pairs", &pairs, "--ckpt1", &s1, "--ckpt2", &s2, "--fr", &fr];
    let (cal_path, extra, rp) = (s(&dir.join("cal.json")), format!("again={fr}:0.5"), s(&report_path));
    let mut args = vec!["evaluate"];
    args.extend(base);
    args.extend(["--calibration", &cal_path, "--model", &extra, "--out", &rp]);
    ok(dir, &args);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["models"].as_array().unwrap().len(), 2);
    assert!(report["lpips"].as_f64().unwrap() >= 0.0);

    let curve_path = s(&dir.join("curve.csv"));
    let mut args = vec!["curve"];
    args.extend(base);
    args.extend(["--out", &curve_path]);
    let out = bin(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&curve_path).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("tau")).collect();
    assert_eq!(rows.len(), 101);

    // Attack one pair, with and without the refiner.
    let (src, tgt) = (dir.join("data/id000/0000.png"), dir.join("data/id001/0000.png"));
    let rect = "10,11,20,16";
    let out_dir = dir.join("attack");
    let side = ok(dir, &[
        "attack", "--source", &s(&src), "--target", &s(&tgt), "--rect", rect, "--ckpt1", &s1, "--ckpt2", &s2,
        "--fr", &fr, "--out", &s(&out_dir),
    ]);
    for key in ["cosine_before", "cosine_after_stage1", "cosine_after_stage2", "cosine_after"] {
        assert!(side[key].is_number(), "{key}");
    }
    let source = ImageTensor::load_png(&src).unwrap().to_rgb8();
    for name in ["x_out.png", "x_refine.png"] {
        let img = ImageTensor::load_png(&out_dir.join(name)).unwrap().to_rgb8();
        for row in 0..32 {
            for col in 0..32 {
                let inside = (11..=16).contains(&row) && (10..=20).contains(&col);
                let i = (row * 32 + col) * 3;
                if !inside {
                    assert_eq!(img[i..i + 3], source[i..i + 3], "{name} changed ({row},{col})");
                }
            }
        }
    }
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("attack.json")).unwrap()).unwrap();
    assert_eq!(saved, side);

    // Repeating a command reproduces its output.
    let again = dir.join("attack2");
    let side2 = ok(dir, &[
        "attack", "--source", &s(&src), "--target", &s(&tgt), "--rect", rect, "--ckpt1", &s1, "--fr", &fr,
        "--out", &s(&again),
    ]);
    assert_eq!(side2["cosine_after_stage1"], side["cosine_after_stage1"]);
    assert_eq!(std::fs::read(again.join("x_out.png")).unwrap(), std::fs::read(out_dir.join("x_out.png")).unwrap());
    assert!(!again.join("x_refine.png").exists());

    let attack = |rect: &str, ckpt: &str| {
        usage_error(dir, &[
            "attack", "--source", &s(&src), "--target", &s(&tgt), "--rect", rect, "--ckpt1", ckpt, "--fr", &fr,
            "--out", &s(&dir.join("bad")),
        ])
    };
    assert!(attack("20,11,10,16", &s1).contains("zero area"));
    assert!(attack("0,0,31,31", &s1).contains("bound"));
    assert!(attack("1,2,3", &s1).contains("L,T,R,B"));
    assert!(attack("10,11,20,40", &s1).contains("exceeds"));
    assert!(attack(rect, &s(&dir.join("missing.ckpt"))).contains("does not exist"));

    // A stage-2 checkpoint paired with a foreign stage-1 model is refused.
    let out = bin(dir, &["train-stage2", "--data", &data, "--fr", &fr, "--out", &s(&dir.join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "state");
}

#[test]
fn config_and_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    RunConfig::tiny().save(&dir.join("run.cfg")).unwrap();
    let out = bin(dir, &["config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::tiny());

    std::fs::write(dir.join("bad.cfg"), "# advinpaint run-config v1\nnot.a.key = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_advinpaint"))
        .args(["--config", &s(&dir.join("bad.cfg")), "config"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    usage_error(dir, &["attack", "--source", "a.png"]);
    usage_error(dir, &["no-such-command"]);
    assert!(usage_error(dir, &["train-fr", "--data", &s(&dir.join("nope")), "--out", "x"]).contains("not a directory"));
}
