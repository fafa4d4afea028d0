//! Black-box runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use polarnet::io;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polarnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn cli")
}

fn ok(args: &[&str], dir: &Path) -> Vec<u8> {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).expect("stdout is JSON")
}

#[test]
fn synth_dsp_train_infer_render() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--frames", "10", "--seed", "7", "--out", "data"], d);
    let files: Vec<String> = std::fs::read_dir(d.join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let data_files = files.iter().filter(|f| f.ends_with(".rten") || f.ends_with(".pgm")).count();
    assert_eq!(data_files, 40);
    assert!(files.contains(&"manifest.json".to_string()));
    let echoed = json(&std::fs::read(d.join("data/resolved_config.json")).unwrap());
    assert_eq!(echoed["seed"], 7);

    ok(&["dsp", "--in", "data/sca_0.rten", "--mode", "sum_log", "--out", "ra.rten"], d);
    let ra = io::rten_read_f32(&d.join("ra.rten"), &[128, 128]).unwrap();
    let reference = io::rten_read_f32(&d.join("data/ra_0.rten"), &[128, 128]).unwrap();
    // the dataset map is computed from the f32-rounded cube that was stored
    assert_eq!(ra, reference);
    ok(&["dsp", "--in", "data/sca_0.rten", "--rad", "--out", "rad.rten"], d);
    let rad = io::rten_read_f32(&d.join("rad.rten"), &[128, 128, 64]).unwrap();
    assert_eq!(rad, io::rten_read_f32(&d.join("data/rad_0.rten"), &[128, 128, 64]).unwrap());

    ok(&["train", "--data", "data", "--out", "run", "--steps", "2", "--batch", "1", "--eval-every", "1"], d);
    for f in ["run/final/manifest.json", "run/best/manifest.json", "run/train_log.jsonl", "run/config.json", "run/resolved_config.json"] {
        assert!(d.join(f).exists(), "{f}");
    }

    ok(&["infer", "--in", "data/ra_9.rten", "--ckpt", "run/final", "--out", "m.pgm", "--cartesian", "mc.pgm"], d);
    let mask = io::read_pgm(&d.join("m.pgm")).unwrap();
    assert_eq!((mask.rows(), mask.cols()), (128, 128));
    let (w, h, cart) = io::read_gray_pgm(&d.join("mc.pgm")).unwrap();
    assert_eq!((w, h), (128, 128));
    assert!(cart.contains(&128));
    assert!(cart.iter().all(|v| [0, 128, 255].contains(v)));

    ok(&["render", "--in", "data/mask_0.pgm", "--out", "r.ppm"], d);
    let (w, h, rgb) = io::read_ppm(&d.join("r.ppm")).unwrap();
    assert_eq!((w, h), (128, 128));
    let colours = [[0, 200, 0], [200, 0, 0], [0, 0, 0]];
    assert!(rgb.iter().all(|p| colours.contains(p)));
    for c in colours {
        assert!(rgb.contains(&c));
    }
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.json"), r#"{"frames": 3, "seed": 4, "out": "from_file"}"#).unwrap();
    ok(&["synth", "--config", "c.json", "--frames", "2"], d);
    let m = json(&std::fs::read(d.join("from_file/manifest.json")).unwrap());
    assert_eq!(m["n_frames"], 2);
    assert_eq!(m["base_seed"], 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(&["synth", "--no-such-flag"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["synth"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"framez": 1}"#).unwrap();
    assert_eq!(run(&["synth", "--config", "bad.json", "--out", "x"], d).status.code(), Some(2));
    let out = run(&["dsp", "--in", "missing.rten", "--out", "o.rten"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.rten"));
}

#[test]
fn json_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let b = json(&ok(&["bench", "--iters", "3", "--warmup", "1"], d));
    assert_eq!(b["param_count"], 572_225);
    assert_eq!(b["input"], "ra");
    assert!(b["fps"].as_f64().unwrap() > 0.0);
    let g = json(&ok(&["gradcheck", "--seeds", "1"], d));
    assert_eq!(g["passed"], true);
    assert_eq!(g["ops"].as_array().unwrap().len(), 9);
}
