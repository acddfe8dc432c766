use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use serde_json::Value;

use wait_core::config::{Variant, VariantConfig};
use wait_core::metrics::{write_flo, FlowDir};
use wait_core::warping_ops::FlowField;

fn wait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wait")).args(args).output().expect("spawn wait")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_file(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn frame(t: u32, size: u32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| Rgb([(x * 6 + t * 9) as u8, (y * 6) as u8, ((x + y + t) * 3) as u8]))
}

fn write_frames(dir: &Path, prefix: &str, n: u32, size: u32) {
    fs::create_dir_all(dir).unwrap();
    for t in 0..n {
        frame(t, size).save(dir.join(format!("{prefix}{t:04}.png"))).unwrap();
    }
}

/// Source clip of `n` frames, 6 target images, prepared under `<tmp>/data`.
fn dataset(tmp: &Path, n: u32) -> PathBuf {
    write_frames(&tmp.join("src/clip"), "f", n, 32);
    let tgt = tmp.join("tgt");
    fs::create_dir_all(&tgt).unwrap();
    for i in 0..6u8 {
        RgbImage::from_fn(32, 32, |x, _| Rgb([i * 40, (x * 8) as u8, 90])).save(tgt.join(format!("t{i}.png"))).unwrap();
    }
    let root = tmp.join("data");
    let src = tmp.join("src");
    let o = wait(&[
        "prepare", "--source", s(&src), "--target", s(&tgt), "--test-source", s(&src), "--test-target", s(&tgt),
        "--out", s(&root),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    root
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = VariantConfig::new(Variant::Wait);
    c.image_size = 32;
    c.base_channels = 4;
    c.residual_blocks = 1;
    c.disc_channels = 4;
    c.predictor_channels = 4;
    c.offset_depth = 1;
    c.warping_layers = 2;
    c.batch_size = 2;
    c.epochs = 1;
    c.iterations_per_epoch = Some(1);
    c.sample_frames = 0;
    c.data.root = Some("data".into());
    let p = dir.join("tiny.toml");
    c.save(&p).unwrap();
    p
}

fn trained(tmp: &Path) -> PathBuf {
    dataset(tmp, 6);
    let cfg = tiny_config(tmp);
    let run = tmp.join("run");
    let o = wait(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run.join("checkpoints/latest.ckpt")
}

#[test]
fn prepare_keeps_every_frame_at_stride_one_and_counts_splits() {
    let tmp = tempfile::tempdir().unwrap();
    write_frames(&tmp.path().join("movie"), "shot_", 10, 16);
    write_frames(&tmp.path().join("art"), "a", 3, 16);
    let out = tmp.path().join("ds");
    let movie = tmp.path().join("movie");
    let art = tmp.path().join("art");
    let o = wait(&["prepare", "--source", s(&movie), "--target", s(&art), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let counts: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(counts["trainA"]["frames"], 10);
    assert_eq!(counts["trainA"]["clips"], 1);
    assert_eq!(counts["trainB"]["frames"], 3);
    assert_eq!(fs::read_dir(out.join("trainA")).unwrap().count(), 10);
    let m = json_file(&out.join("run_manifest.json"));
    assert_eq!(m["command"], "prepare");
    assert_eq!(m["digests"]["dataset"].as_str().unwrap().len(), 64);

    // A second run into the same root refuses unless forced.
    let o = wait(&["prepare", "--source", s(&movie), "--target", s(&art), "--out", s(&out), "--stride", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("exists"), "{}", stderr(&o));
    let o = wait(&["prepare", "--source", s(&movie), "--target", s(&art), "--out", s(&out), "--stride", "3", "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let counts: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(counts["trainA"]["frames"], 4);
    assert_eq!(fs::read_dir(out.join("trainA")).unwrap().count(), 4);
}

#[test]
fn empty_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    write_frames(&tmp.path().join("art"), "a", 2, 16);
    let out = tmp.path().join("ds");
    let o = wait(&["prepare", "--source", s(&empty), "--target", s(&tmp.path().join("art")), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn configuration_problems_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "variant = \"cyclegann\"\n").unwrap();
    let o = wait(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("recyclegan"), "{}", stderr(&o));

    let typo = tmp.path().join("typo.toml");
    fs::write(&typo, "variant = \"wait\"\noffset_dept = 6\n").unwrap();
    let o = wait(&["train", "--config", s(&typo), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = wait(&["ablate", "--device", "cuda", "--out", s(&tmp.path().join("a"))]);
    assert_eq!(code(&o), 2);
    let o = wait(&["ablate"]);
    assert_eq!(code(&o), 2);
    let o = wait(&["frobnicate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_writes_one_config_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let o = wait(&["ablate", "--out", s(&out), "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let plan = json_file(&out.join("plan.json"));
    assert_eq!(plan.as_array().unwrap().len(), 13);
    let c = VariantConfig::load(&out.join("offset_depth_10/config.toml")).unwrap();
    assert_eq!((c.offset_depth, c.seed, c.epochs, c.batch_size), (10, 11, 300, 8));
    let c = VariantConfig::load(&out.join("warping_layers_3/config.toml")).unwrap();
    assert_eq!(c.resolved_dilations(), vec![3, 6, 12]);

    let sweep = tmp.path().join("sweep.toml");
    fs::write(&sweep, "offset_depth = [6, 8, 10]\n").unwrap();
    let o = wait(&["ablate", "--sweep", s(&sweep), "--out", s(&tmp.path().join("abl2"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    fs::write(&sweep, "offset_depht = [6]\n").unwrap();
    let o = wait(&["ablate", "--sweep", s(&sweep), "--out", s(&tmp.path().join("abl3"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("valid axes"), "{}", stderr(&o));
}

#[test]
fn train_then_stylize_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained(tmp.path());
    let run = ckpt.parent().unwrap().parent().unwrap();
    let m = json_file(&run.join("run_manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["variant"], "wait");
    assert!(m["digests"]["dataset"].is_string());
    assert!(run.join("checkpoints/epoch_001.ckpt").is_file());

    // Mixed input sizes, with names that do not sort numerically by string.
    let frames = tmp.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    for (t, size) in [(1u32, 32u32), (2, 40), (10, 32), (3, 24)] {
        frame(t, size).save(frames.join(format!("x{t}.png"))).unwrap();
    }
    let out = tmp.path().join("styl");
    let o = wait(&["stylize", "--checkpoint", s(&ckpt), "--frames", s(&frames), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names = ["x1.png", "x2.png", "x3.png", "x10.png"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    let img = image::open(out.join("x2.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    let m = json_file(&out.join("run_manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 4);
    assert!(m["notes"][0].as_str().unwrap().contains("resized to 32x32"));

    let o = wait(&["stylize", "--checkpoint", s(&ckpt), "--frames", s(&frames), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let o = wait(&["stylize", "--checkpoint", s(&ckpt), "--frames", s(&frames), "--out", s(&out), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for (n, want) in names.iter().zip(&first) {
        assert_eq!(&fs::read(out.join(n)).unwrap(), want, "{n}");
    }

    // A truncated checkpoint is rejected as a configuration problem.
    let broken = tmp.path().join("broken.ckpt");
    fs::write(&broken, &fs::read(&ckpt).unwrap()[..100]).unwrap();
    let o = wait(&["stylize", "--checkpoint", s(&broken), "--frames", s(&frames), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // Resuming a finished run is a no-op that still records a manifest.
    let cfg = tmp.path().join("tiny.toml");
    let o = wait(&["train", "--config", s(&cfg), "--out", s(run), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = wait(&["train", "--config", s(&cfg), "--out", s(run)]);
    assert_eq!(code(&o), 2);
}

fn write_flows(root: &Path, flows: &Path, skip: usize) {
    let ds = wait_core::data_pipeline::Dataset::open(root).unwrap();
    let dir = FlowDir::new(flows);
    fs::create_dir_all(flows).unwrap();
    let mut k = 0;
    for clip in ds.clips("testA").unwrap() {
        for (from, to) in wait_core::evaluation::required_flows(&clip).unwrap() {
            k += 1;
            if k != skip {
                write_flo(&dir.path(&from, &to), &FlowField::constant(32, 32, 0.0, 0.0)).unwrap();
            }
        }
    }
}

#[test]
fn evaluate_identity_reports_zero_mse() {
    let tmp = tempfile::tempdir().unwrap();
    let root = dataset(tmp.path(), 5);
    let flows = tmp.path().join("flows");
    write_flows(&root, &flows, 3);
    let out = tmp.path().join("eval");
    let args = |out: &Path| -> Vec<String> {
        [
            "evaluate", "--checkpoint", "identity", "--image-size", "32", "--data", s(&root), "--flows", s(&flows),
            "--out", s(out),
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    };
    let run = |a: Vec<String>| wait(&a.iter().map(String::as_str).collect::<Vec<_>>());

    let o = run(args(&out));
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("1 flow file(s) missing"), "{}", stderr(&o));
    assert!(stderr(&o).contains(".flo"));

    write_flows(&root, &flows, 0);
    let o = run(args(&out));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json_file(&out.join("report.json"));
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["fid", "fwe", "mse", "per_clip"]);
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["per_clip"]["clip"]["frames"], 5);
    assert!(report["fid"].as_f64().unwrap() >= 0.0);
    // The frames move, so a zero flow leaves a warping error.
    assert!(report["fwe"].as_f64().unwrap() > 0.0);

    let again = tmp.path().join("eval2");
    let o = run(args(&again));
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());

    // Statistics of the stylized frames can stand in for the target split.
    let mut a = args(&tmp.path().join("eval3"));
    a.extend(["--real-stats".into(), s(&out.join("fake_stats.json")).into()]);
    let o = run(a);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json_file(&tmp.path().join("eval3/report.json"));
    assert!(r["fid"].as_f64().unwrap().abs() < 1e-6);

    // Asymmetric covariance is a numerical failure.
    let stats = json_file(&out.join("fake_stats.json"));
    let mut bad = stats.clone();
    bad["covariance"][1] = Value::from(stats["covariance"][1].as_f64().unwrap() + 1.0);
    let bad_path = tmp.path().join("bad_stats.json");
    fs::write(&bad_path, bad.to_string()).unwrap();
    let mut a = args(&tmp.path().join("eval4"));
    a.extend(["--real-stats".into(), s(&bad_path).into()]);
    let o = run(a);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let mut a = args(&tmp.path().join("eval5"));
    a.extend(["--extractor".into(), "inception".into()]);
    assert_eq!(code(&run(a)), 3);
}
