use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use cvs_deblur::net::{ArchConfig, ModelParams};
use cvs_deblur::sensor::{read_sample, Frame};
use image::{ImageBuffer, Rgb};
use serde_json::Value;

fn cvsdeblur(args: &[&str]) -> (i32, Value, String) {
    let out_pos = args.iter().position(|a| *a == "--out").expect("tests always pass --out");
    let out = PathBuf::from(args[out_pos + 1]);
    let output = Command::new(env!("CARGO_BIN_EXE_cvsdeblur")).args(args).env("RUST_LOG", "warn").output().unwrap();
    let manifest = fs::read_to_string(out.join("run_manifest.json")).map(|t| serde_json::from_str(&t).unwrap()).unwrap_or(Value::Null);
    (output.status.code().unwrap(), manifest, String::from_utf8_lossy(&output.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_arch() -> ArchConfig {
    ArchConfig { base_channels: 4, n_scales: 2, ..Default::default() }
}

fn identity_checkpoint(dir: &Path) -> PathBuf {
    let mut m = ModelParams::init(&small_arch(), 0).unwrap();
    m.zero_output();
    let path = dir.join("identity.ckpt");
    m.save(&path).unwrap();
    path
}

fn write_png_frame(path: &Path, size: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    let img = ImageBuffer::from_fn(size, size, |x, y| Rgb(f(x, y)));
    img.save(path).unwrap();
}

/// Writes `count` frames of a bar sliding one pixel per frame.
fn moving_sequence(dir: &Path, count: u32, size: u32) {
    fs::create_dir_all(dir).unwrap();
    for t in 0..count {
        write_png_frame(&dir.join(format!("frame_{t}.png")), size, |x, y| {
            let v = if (x + 32 - t) % 8 < 3 { 220 } else { 30 + (y * 4) as u8 };
            [v, v / 2, 255 - v]
        });
    }
}

fn static_sequence(dir: &Path, count: u32, size: u32) {
    fs::create_dir_all(dir).unwrap();
    for t in 0..count {
        write_png_frame(&dir.join(format!("frame_{t:03}.png")), size, |x, y| [(x * 9) as u8, (y * 7) as u8, ((x + y) * 3) as u8]);
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn fifteen_frames_at_the_longest_exposure_make_one_eleven_frame_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("seq");
    moving_sequence(&input, 15, 16);
    let out = tmp.path().join("data");
    let (code, manifest, err) = cvsdeblur(&["--out", s(&out), "datagen", "--input", s(&input), "--exposures", "14520"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["samples"], 1);
    let sample = read_sample(&out.join("seq_t14520")).unwrap();
    assert_eq!((sample.exposure.n, sample.td_seq.len(), sample.extra_td.len()), (11, 10, 3));
    let td_files = fs::read_dir(out.join("seq_t14520"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("td_"))
        .count();
    assert_eq!(td_files, 10);
}

#[test]
fn short_sequences_are_skipped_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    moving_sequence(&tmp.path().join("in/long"), 9, 16);
    moving_sequence(&tmp.path().join("in/short"), 4, 16);
    let out = tmp.path().join("data");
    let (code, manifest, err) = cvsdeblur(&["--out", s(&out), "datagen", "--input", s(&tmp.path().join("in")), "--exposures", "6600,11880"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["samples"], 2);
    assert_eq!(manifest["summary"]["skipped"], 2);
    assert!(manifest["complete"].as_bool().unwrap());
}

#[test]
fn static_input_validates_with_blur_equal_to_target() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("still");
    static_sequence(&input, 6, 16);
    let data = tmp.path().join("data");
    assert_eq!(cvsdeblur(&["--out", s(&data), "datagen", "--input", s(&input), "--exposures", "6600"]).0, 0);
    let report = tmp.path().join("report");
    let (code, manifest, _) = cvsdeblur(&["--out", s(&report), "validate", "--dataset", s(&data)]);
    assert_eq!(code, 0);
    assert_eq!(manifest["summary"]["invalid"], 0);
    let checks: Value = serde_json::from_str(&fs::read_to_string(report.join("validation.json")).unwrap()).unwrap();
    assert_eq!(checks[0]["static_scene"], true);
    assert_eq!(checks[0]["blur_vs_gt"], 0.0);
}

#[test]
fn validation_flags_damaged_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "2", "--height", "16", "--width", "16", "--exposures", "6600"]);
    fs::remove_file(data.join("syn_0001_t6600/td_2.i8")).unwrap();
    let (code, manifest, _) = cvsdeblur(&["--out", s(&tmp.path().join("v")), "validate", "--dataset", s(&data)]);
    assert_eq!(code, 1);
    assert_eq!(manifest["summary"]["invalid"], 1);
    assert_eq!(manifest["complete"], false);
}

#[test]
fn datagen_is_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let args = ["--seed", seed, "--out", s(&out), "datagen", "--synthetic", "3", "--height", "24", "--width", "24", "--random-exposure"];
        assert_eq!(cvsdeblur(&args).0, 0);
        tree_bytes(&out)
    };
    let (a, b, c) = (run("a", "5"), run("b", "5"), run("c", "6"));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn write_config(dir: &Path, train: Value) -> PathBuf {
    let path = dir.join("config.json");
    let arch = serde_json::to_value(small_arch()).unwrap();
    fs::write(&path, serde_json::json!({ "train": train, "arch": arch }).to_string()).unwrap();
    path
}

fn loss_steps(csv: &Path) -> Vec<usize> {
    fs::read_to_string(csv).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn training_smoke_run_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--seed", "1", "--out", s(&data), "datagen", "--synthetic", "8", "--height", "16", "--width", "16", "--exposures", "6600"]);
    let config = write_config(tmp.path(), serde_json::json!({ "batch_size": 2, "epochs": 100 }));
    let run = tmp.path().join("run");
    let (code, manifest, err) = cvsdeblur(&["--config", s(&config), "--out", s(&run), "train", "--dataset", s(&data), "--steps", "30"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["steps"], 30);
    assert_eq!(manifest["config"]["train"]["max_steps"], 30);
    assert!(run.join("model.ckpt").is_file());
    assert_eq!(loss_steps(&run.join("loss.csv")), (0..30).collect::<Vec<_>>());

    let (code, manifest, err) =
        cvsdeblur(&["--config", s(&config), "--out", s(&run), "train", "--dataset", s(&data), "--steps", "50", "--resume"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["steps"], 50);
    assert_eq!(loss_steps(&run.join("loss.csv")), (0..50).collect::<Vec<_>>());

    let (code, _, _) =
        cvsdeblur(&["--config", s(&config), "--out", s(&run), "train", "--dataset", s(&data), "--resume", "--ablate", "no-sd"]);
    assert_eq!(code, 1);
}

#[test]
fn ablation_flag_selects_the_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "2", "--height", "16", "--width", "16", "--exposures", "6600"]);
    let config = write_config(tmp.path(), serde_json::json!({}));
    let run = tmp.path().join("run");
    let (code, manifest, err) =
        cvsdeblur(&["--config", s(&config), "--out", s(&run), "train", "--dataset", s(&data), "--steps", "2", "--ablate", "no-trrm"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["config"]["arch"]["use_trrm"], false);
    let m = ModelParams::load(&run.join("model.ckpt")).unwrap();
    assert!(!m.arch.use_trrm && m.arch.use_sd && m.arch.use_td);
}

#[test]
fn identity_model_matches_blurry_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "3", "--height", "16", "--width", "16", "--exposures", "6600,9240"]);
    let ckpt = identity_checkpoint(tmp.path());
    let out = tmp.path().join("eval");
    let (code, _, err) = cvsdeblur(&["--out", s(&out), "eval", "--dataset", s(&data), "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let samples = report["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 6);
    for s in samples {
        assert_eq!(s["restored"], s["blurry"]);
    }
    let mean: f64 = samples.iter().map(|s| s["restored"]["psnr"].as_f64().unwrap()).sum::<f64>() / 6.0;
    assert!((mean - report["mean"]["restored"]["psnr"].as_f64().unwrap()).abs() <= 1e-9);
}

#[test]
fn identity_model_on_a_static_scene_hits_the_psnr_cap() {
    let tmp = tempfile::tempdir().unwrap();
    static_sequence(&tmp.path().join("still"), 5, 16);
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--input", s(&tmp.path().join("still")), "--exposures", "6600"]);
    let ckpt = identity_checkpoint(tmp.path());
    let out = tmp.path().join("eval");
    assert_eq!(cvsdeblur(&["--out", s(&out), "eval", "--dataset", s(&data), "--checkpoint", s(&ckpt)]).0, 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["mean"]["restored"]["psnr"], 100.0);

    let video = tmp.path().join("video");
    assert_eq!(cvsdeblur(&["--out", s(&video), "video", "--sample", s(&data.join("still_t6600")), "--checkpoint", s(&ckpt)]).0, 0);
    let frames: Vec<Vec<u8>> = (0..5).map(|k| fs::read(video.join(format!("frame_{k:02}.f32"))).unwrap()).collect();
    assert!(frames.iter().all(|f| *f == frames[0]));
}

#[test]
fn eval_rejects_a_mismatched_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "1", "--height", "16", "--width", "16", "--exposures", "6600"]);
    let ckpt = identity_checkpoint(tmp.path());
    let config = tmp.path().join("c.json");
    fs::write(&config, r#"{"arch": {"base_channels": 8, "n_scales": 2}}"#).unwrap();
    let (code, manifest, _) =
        cvsdeblur(&["--config", s(&config), "--out", s(&tmp.path().join("e")), "eval", "--dataset", s(&data), "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 1);
    assert!(manifest["error"].as_str().unwrap().contains("mismatch"));
}

#[test]
fn video_frames_cover_the_exposure_and_match_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "1", "--height", "16", "--width", "16", "--exposures", "6600"]);
    let mut m = ModelParams::init(&small_arch(), 3).unwrap();
    m.params.iter_mut().filter(|(n, _)| n.starts_with("conv_out")).for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= 0.1));
    let ckpt = tmp.path().join("m.ckpt");
    m.save(&ckpt).unwrap();
    let sample = data.join("syn_0000_t6600");
    let video = tmp.path().join("video");
    let (code, manifest, err) = cvsdeblur(&["--out", s(&video), "video", "--sample", s(&sample), "--checkpoint", s(&ckpt)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["frames"], 5);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 10);
    let infer = tmp.path().join("infer");
    assert_eq!(cvsdeblur(&["--out", s(&infer), "infer", "--sample", s(&sample), "--checkpoint", s(&ckpt)]).0, 0);
    assert_eq!(fs::read(video.join("frame_02.f32")).unwrap(), fs::read(infer.join("restored.f32")).unwrap());
    assert_ne!(fs::read(video.join("frame_00.f32")).unwrap(), fs::read(video.join("frame_04.f32")).unwrap());
    let png = image::open(infer.join("restored.png")).unwrap();
    assert_eq!((png.width(), png.height()), (16, 16));
}

#[test]
fn disk_bench_grid_and_trend() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(tmp.path());
    let out = tmp.path().join("disk");
    let (code, manifest, err) = cvsdeblur(&[
        "--out",
        s(&out),
        "disk-bench",
        "--checkpoint",
        s(&ckpt),
        "--rpm",
        "0,150,300,450",
        "--exposures",
        "6600,9240",
        "--illuminations",
        "1.0,0.6",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(manifest["summary"]["cells"], 16);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("disk_bench.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 16);
    for row in cells.chunks(4) {
        let v: Vec<f64> = row.iter().map(|c| c["mean_rbew"].as_f64().unwrap()).collect();
        assert!((v[0] - 1.0).abs() <= 0.05, "static cell {}", v[0]);
        assert!(v.windows(2).all(|p| p[1] >= p[0] - 0.02), "{v:?}");
    }
    let heat = image::open(out.join("disk_bench.png")).unwrap();
    assert_eq!(heat.width(), 4 * 24);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cvsdeblur(&["--out", s(&data), "datagen", "--synthetic", "1", "--height", "16", "--width", "16", "--exposures", "6600"]);
    let sample = data.join("syn_0000_t6600");
    let out = tmp.path().join("o");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"batch_size": 0}}"#).unwrap();
    assert_eq!(cvsdeblur(&["--config", s(&bad), "--out", s(&out), "train", "--dataset", s(&data)]).0, 1);
    assert_eq!(cvsdeblur(&["--out", s(&out), "datagen", "--synthetic", "1", "--exposures", "1000"]).0, 1);

    let (code, manifest, _) = cvsdeblur(&["--out", s(&out), "infer", "--sample", s(&sample), "--checkpoint", "missing.ckpt"]);
    assert_eq!(code, 3);
    assert_eq!(manifest["complete"], false);
    assert_eq!(cvsdeblur(&["--out", s(&out), "validate", "--dataset", s(&tmp.path().join("nowhere"))]).0, 3);

    let mut m = ModelParams::init(&small_arch(), 0).unwrap();
    let b = m.params.get_mut("conv_out.b").unwrap();
    b.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    let nan = tmp.path().join("nan.ckpt");
    m.save(&nan).unwrap();
    assert_eq!(cvsdeblur(&["--out", s(&out), "infer", "--sample", s(&sample), "--checkpoint", s(&nan)]).0, 2);
}

#[test]
fn sixteen_bit_and_srgb_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("seq16");
    fs::create_dir_all(&input).unwrap();
    for t in 0..5u16 {
        let img: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_fn(16, 16, |x, _| Rgb([(x as u16 + t) * 3000, 32768, 65535]));
        img.save(input.join(format!("{t}.png"))).unwrap();
    }
    let linear = tmp.path().join("lin");
    let decoded = tmp.path().join("srgb");
    assert_eq!(cvsdeblur(&["--out", s(&linear), "datagen", "--input", s(&input), "--exposures", "6600"]).0, 0);
    assert_eq!(cvsdeblur(&["--out", s(&decoded), "datagen", "--input", s(&input), "--exposures", "6600", "--srgb-decode"]).0, 0);
    let a = read_sample(&linear.join("seq16_t6600")).unwrap();
    let b = read_sample(&decoded.join("seq16_t6600")).unwrap();
    let px = |f: &Frame| f.get(0, 0, 1);
    assert!((px(&a.gt[0]) - 32768.0 / 65535.0).abs() < 1e-6);
    assert!(px(&b.gt[0]) < px(&a.gt[0]) - 0.2);
    assert_eq!(a.gt[0].get(0, 0, 2), 1.0);
}
