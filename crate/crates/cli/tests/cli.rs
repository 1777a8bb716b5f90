use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use handmesh::camera::ImagePlane;
use handmesh::descriptor::GridDescriptor;
use handmesh::image::SoftMask;
use handmesh::raster::rasterize_hard;
use handmesh::regressor::{run_hme, Evidence2D, LinearRegressorWeights};
use handmesh::synth::{read_dataset, read_ground_truth};
use handmesh::{load_model_assets, synthesize_mesh};
use serde_json::Value;

fn handmesh(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handmesh"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = handmesh(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Assets, a 12-record dataset and one-epoch weights.
fn fixture(dir: &Path) {
    ok(dir, &["gen-toy-model", "--seed", "4", "--out", "a.bin"]);
    ok(dir, &["synth", "--assets", "a.bin", "--count", "12", "--seed", "5", "--out", "data"]);
    ok(dir, &["train", "--assets", "a.bin", "--data", "data", "--epochs", "1", "--no-augment", "--out-weights", "w.bin"]);
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn fit_without_refinement_returns_the_regression_result() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(d, &["fit", "--assets", "a.bin", "--weights", "w.bin", "--input-manifest", "data/manifest.jsonl", "--refine-iters", "0", "--out", "pred"]);
    let assets = load_model_assets(d.join("a.bin")).unwrap();
    let (w, _) = LinearRegressorWeights::read(d.join("w.bin")).unwrap();
    let plane = ImagePlane::default();
    for (i, r) in read_dataset(d.join("data")).unwrap().iter().enumerate() {
        let z = Evidence2D::from_image(&r.image, r.gt.j2d, &GridDescriptor::default(), &plane).unwrap();
        let expected = run_hme(&z, &w, &assets).unwrap().params;
        let got = read_ground_truth(d.join(format!("pred/gt/{i:06}.json"))).unwrap().params;
        assert_eq!(got, expected, "record {i}");
    }
}

#[test]
fn evaluating_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-toy-model", "--out", "a.bin"]);
    ok(d, &["synth", "--assets", "a.bin", "--count", "6", "--seed", "1", "--out", "data"]);
    ok(d, &["eval", "--pred", "data", "--gt", "data", "--report", "r.json"]);
    let r = report(&d.join("r.json"));
    assert_eq!(r["auc"].as_f64(), Some(1.0));
    assert_eq!(r["seg"]["iou"].as_f64(), Some(1.0));
    assert_eq!(r["seg"]["f1"].as_f64(), Some(100.0));
    let text = fs::read_to_string(d.join("r.json")).unwrap();
    assert!(text.contains("\"auc\": 1.0000"), "{text}");
}

#[test]
fn rendered_mask_file_equals_the_in_process_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-toy-model", "--seed", "2", "--out", "a.bin"]);
    ok(d, &["synth", "--assets", "a.bin", "--count", "1", "--seed", "3", "--out", "data"]);
    ok(d, &["render", "--assets", "a.bin", "--params", "data/gt/000000.json", "--mode", "mask", "--out", "m.pgm"]);
    let assets = load_model_assets(d.join("a.bin")).unwrap();
    let h = read_ground_truth(d.join("data/gt/000000.json")).unwrap().params;
    let mask = rasterize_hard(&synthesize_mesh(&h, &assets).unwrap(), &ImagePlane::default()).unwrap();
    let bytes = fs::read(d.join("m.pgm")).unwrap();
    assert_eq!(SoftMask::from_pgm(&bytes).unwrap(), mask);
    assert_eq!(bytes, mask.to_pgm());
    assert_eq!(bytes, fs::read(d.join("data/mask/000000.pgm")).unwrap());
}

#[test]
fn shaded_and_canonical_renders_are_images() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-toy-model", "--out", "a.bin"]);
    ok(d, &["synth", "--assets", "a.bin", "--count", "1", "--out", "data"]);
    fs::write(d.join("h.json"), serde_json::to_string(&read_ground_truth(d.join("data/gt/000000.json")).unwrap().params).unwrap()).unwrap();
    for mode in ["shaded", "canonical"] {
        ok(d, &["render", "--assets", "a.bin", "--params", "h.json", "--mode", mode, "--out", "x.ppm"]);
        let img = handmesh::image::RgbImage::read_ppm(d.join("x.ppm")).unwrap();
        assert!(img.data.iter().any(|p| *p != [0.5, 0.5, 0.5]), "{mode} render is blank");
    }
}

#[test]
fn config_file_supplies_flags_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.json"), r#"{"seed": 7, "out": "from_config.bin"}"#).unwrap();
    ok(d, &["gen-toy-model", "--config", "c.json"]);
    ok(d, &["gen-toy-model", "--config", "c.json", "--out", "flag.bin"]);
    ok(d, &["gen-toy-model", "--seed", "7", "--out", "plain.bin"]);
    ok(d, &["gen-toy-model", "--config", "c.json", "--seed", "8", "--out", "other.bin"]);
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_eq!(read("from_config.bin"), read("plain.bin"));
    assert_eq!(read("flag.bin"), read("plain.bin"));
    assert_ne!(read("other.bin"), read("plain.bin"));
}

#[test]
fn failures_are_one_json_line_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.json"), r#"{"sed": 1}"#).unwrap();
    let cases: [&[&str]; 5] = [
        &["gen-toy-model"],
        &["fit", "--no-such-flag"],
        &["synth", "--assets", "missing.bin", "--out", "x"],
        &["gen-toy-model", "--config", "bad.json", "--out", "a.bin"],
        &["eval", "--pred", "nowhere", "--gt", "nowhere", "--report", "r.json"],
    ];
    for args in cases {
        let out = handmesh(d, args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
        let v: Value = serde_json::from_str(err.trim()).unwrap();
        assert!(v["error"].is_string() && v["message"].is_string(), "{err}");
    }
}

#[test]
fn refinement_traces_are_written_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture(d);
    ok(d, &["fit", "--assets", "a.bin", "--weights", "w.bin", "--input-manifest", "data", "--refine-iters", "3", "--out", "pred", "--trace-dir", "tr"]);
    let text = fs::read_to_string(d.join("tr/000000.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,total,joint,feat,lap");
    assert_eq!(lines.len(), 1 + 4);
    ok(d, &["eval", "--pred", "pred", "--gt", "data", "--report", "r.json"]);
    let r = report(&d.join("r.json"));
    assert!(r["mean_joint_error"].as_f64().unwrap().is_finite());
    assert_eq!(r["samples"].as_u64(), Some(12));
}
