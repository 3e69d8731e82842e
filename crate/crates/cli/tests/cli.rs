use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smokebench_core::imaging::{load_image, save_image, save_raw_map, save_scalar_field};
use smokebench_core::model::{ModelConfig, ToyModel};
use smokebench_core::scene::tissue_scene;
use smokebench_core::synth::{composite_smoke, gen_smoke_map, manifest_to_string, PairRecord, SmokeParams};
use smokebench_core::{ColorField, Image, ScalarField};

fn smokebench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smokebench"))
        .args(args)
        .env_remove("SMOKEBENCH_THREADS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn clean_dir(root: &Path, n: usize) -> PathBuf {
    let dir = root.join("clean");
    fs::create_dir_all(&dir).unwrap();
    for k in 0..n {
        save_image(tissue_scene(48, 60, k as u64).field(), dir.join(format!("c{k}.png"))).unwrap();
    }
    dir
}

fn synth(root: &Path, clean: &Path, out: &str, count: usize, extra: &[&str]) -> Output {
    let out = root.join(out);
    let count = count.to_string();
    let mut args = vec!["synth", "--clean-dir", s(clean), "--out", s(&out), "--count", &count, "--height", "32", "--width", "40"];
    args.extend_from_slice(extra);
    smokebench(&args)
}

fn manifest_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_writes_records_and_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 3);
    let o = synth(tmp.path(), &clean, "o", 10, &["--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = manifest_lines(&tmp.path().join("o/manifest.jsonl"));
    assert_eq!(records.len(), 10);
    let resolved = fs::read_to_string(tmp.path().join("o/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 7"), "{resolved}");
    assert!(resolved.contains("count = 10"));
    assert!(stderr(&o).contains("resolved config"));
}

#[test]
fn synth_count_zero_and_missing_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 1);
    let o = synth(tmp.path(), &clean, "o", 0, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(tmp.path().join("o/manifest.jsonl")).unwrap(), "");

    let o = synth(tmp.path(), &tmp.path().join("absent"), "p", 3, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 2);
    for out in ["a", "b"] {
        let o = synth(tmp.path(), &clean, out, 4, &["--seed", "3", "--deterministic"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for entry in ["manifest.jsonl", "smoky/000000.png", "smoke_map/000003.png", "clean/src_00001.png"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(entry)).unwrap(),
            fs::read(tmp.path().join("b").join(entry)).unwrap(),
            "{entry}"
        );
    }
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 1);
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 11\n[synth]\nclean_dir = {:?}\nout = {:?}\ncount = 5\nheight = 16\nwidth = 24\n",
            s(&clean),
            s(&tmp.path().join("o"))
        ),
    )
    .unwrap();
    let o = smokebench(&["--config", s(&cfg), "synth", "--count", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = manifest_lines(&tmp.path().join("o/manifest.jsonl"));
    assert_eq!(records.len(), 2);
    let img = load_image(tmp.path().join("o/smoky/000001.png")).unwrap();
    assert_eq!(img.dims(), (16, 24));
    let resolved = fs::read_to_string(tmp.path().join("o/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 11"));

    fs::write(&cfg, "[synth]\nbogus = 1\n").unwrap();
    let o = smokebench(&["--config", s(&cfg), "synth"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(smokebench(&["desmoke", "--method", "magic"]).status.code(), Some(1));
    assert_eq!(smokebench(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(smokebench(&[]).status.code(), Some(1));
    let help = smokebench(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("train-toy"));
    assert_eq!(smokebench(&["--version"]).status.code(), Some(0));
    assert_eq!(smokebench(&["synth", "--count", "1"]).status.code(), Some(1));
}

#[test]
fn learned_desmoking_needs_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 1);
    let o = smokebench(&["desmoke", "--method", "learned", "--input", s(&clean), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"));
}

#[test]
fn dcp_leaves_smoke_free_images_nearly_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 2);
    let out = tmp.path().join("dcp");
    let o = smokebench(&["desmoke", "--method", "dcp", "--input", s(&clean), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..2 {
        let input = load_image(clean.join(format!("c{k}.png"))).unwrap();
        let output = load_image(out.join(format!("c{k}.png"))).unwrap();
        let mad = input.as_slice().iter().zip(output.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>()
            / input.as_slice().len() as f64;
        assert!(mad < 0.08, "image {k}: {mad}");
        assert!(out.join(format!("c{k}_smoke.png")).exists());
    }
}

/// A pair whose smoky image is exactly representable in 8 bits is not needed:
/// light smoke keeps the inverted error below half a quantization step almost
/// everywhere, so re-quantizing the restoration recovers the clean bytes.
#[test]
fn invert_oracle_recovers_light_smoke_through_8_bit_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    for d in ["clean", "smoky", "smoke_map"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    let mut records = Vec::new();
    for i in 0..3u64 {
        let clean = tissue_scene(64, 80, 40 + i).quantized();
        let params = SmokeParams {
            density: 0.05,
            color: [0.9, 0.85, 0.95],
            ..SmokeParams::neutral(900 + i, 0.05)
        };
        let alpha = gen_smoke_map(64, 80, &params).unwrap();
        let (smoky, map) = composite_smoke(&clean, &alpha, &params).unwrap();
        let rec = PairRecord {
            clean_path: format!("clean/{i}.png").into(),
            smoky_path: format!("smoky/{i}.png").into(),
            smoke_map_path: format!("smoke_map/{i}.png").into(),
            params,
        };
        save_image(clean.field(), root.join(&rec.clean_path)).unwrap();
        save_image(smoky.field(), root.join(&rec.smoky_path)).unwrap();
        save_scalar_field(&map, root.join(&rec.smoke_map_path)).unwrap();
        records.push(rec);
    }
    let manifest = root.join("manifest.jsonl");
    fs::write(&manifest, manifest_to_string(&records).unwrap()).unwrap();

    let pred = tmp.path().join("pred");
    let o = smokebench(&["desmoke", "--method", "invert-oracle", "--manifest", s(&manifest), "--out", s(&pred)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report_dir = tmp.path().join("report");
    let o = smokebench(&["eval", "--manifest", s(&manifest), "--pred-dir", s(&pred), "--out", s(&report_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    let mean = report["psnr"]["mean"].as_f64().unwrap();
    assert!(mean >= 60.0, "oracle PSNR {mean}");

    let o = smokebench(&["desmoke", "--method", "invert-oracle", "--input", s(&root.join("smoky")), "--out", s(&pred)]);
    assert_eq!(o.status.code(), Some(1));
}

fn write_eval_fixture(root: &Path) -> PathBuf {
    fs::create_dir_all(root).unwrap();
    let reference = Image::zeros(16, 16);
    save_image(reference.field(), root.join("ref.png")).unwrap();
    // 51/255 = 0.2 everywhere and 255/255 = 1.0 everywhere.
    save_image(&ColorField::filled(16, 16, [0.2; 3]), root.join("p1.png")).unwrap();
    save_image(&ColorField::filled(16, 16, [1.0; 3]), root.join("p2.png")).unwrap();
    let depth_gt = ScalarField::filled(16, 16, [100.0]);
    let depth_pred = ScalarField::from_fn(16, 16, |_, x| [if x < 8 { 100.0 } else { 110.0 }]);
    save_raw_map(&depth_gt, root.join("gt_depth.png")).unwrap();
    save_raw_map(&depth_pred, root.join("pred_depth.png")).unwrap();
    let gt_mask = ScalarField::from_fn(16, 16, |_, x| [if x < 8 { 1.0 } else { 0.0 }]);
    let pred_mask = ScalarField::from_fn(16, 16, |_, x| [if x < 4 { 1.0 } else { 0.0 }]);
    save_scalar_field(&gt_mask, root.join("gt_mask.png")).unwrap();
    save_scalar_field(&pred_mask, root.join("pred_mask.png")).unwrap();
    let manifest = root.join("eval.jsonl");
    fs::write(
        &manifest,
        concat!(
            r#"{"id":"one","prediction":"p1.png","reference":"ref.png","pred_depth":"pred_depth.png","gt_depth":"gt_depth.png","pred_mask":"pred_mask.png","gt_mask":"gt_mask.png"}"#,
            "\n",
            r#"{"id":"two","prediction":"p2.png","reference":"ref.png","pred_depth":"gt_depth.png","gt_depth":"gt_depth.png","pred_mask":"gt_mask.png","gt_mask":"gt_mask.png"}"#,
            "\n"
        ),
    )
    .unwrap();
    manifest
}

#[test]
fn eval_two_pair_fixture_matches_hand_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_eval_fixture(&tmp.path().join("fx"));
    let out = tmp.path().join("report");
    let o = smokebench(&["eval", "--manifest", s(&manifest), "--out", s(&out), "--strips"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let p1 = 10.0 * (1.0f64 / 0.04).log10();
    let (mean, std) = (p1 / 2.0, p1 / 2f64.sqrt());
    let text = stdout(&o);
    assert!(text.contains(&format!("PSNR  {mean:.2} ± {std:.2}")), "{text}");
    assert!(text.contains("depth MAE 2.50 ± 3.54"), "{text}");
    assert!(text.contains("IoU   0.75 ± 0.35"), "{text}");

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("id,psnr,ssim,depth_mae,iou\n"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((report["psnr"]["mean"].as_f64().unwrap() - mean).abs() < 1e-9);
    assert_eq!(report["std_convention"], "sample");
    let strip = load_image(out.join("strips/one.png")).unwrap();
    assert_eq!(strip.dims(), (16, 48));
}

#[test]
fn eval_identical_predictions_report_perfect_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 2);
    let o = synth(tmp.path(), &clean, "data", 3, &[]);
    assert!(o.status.success());
    let manifest = tmp.path().join("data/manifest.jsonl");
    let preds = tmp.path().join("preds");
    fs::create_dir_all(&preds).unwrap();
    for (i, line) in manifest_lines(&manifest).iter().enumerate() {
        let src = tmp.path().join("data").join(line["clean_path"].as_str().unwrap());
        fs::copy(src, preds.join(format!("{i:06}.png"))).unwrap();
    }
    let o = smokebench(&["eval", "--manifest", s(&manifest), "--pred-dir", s(&preds), "--out", s(&tmp.path().join("r"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("SSIM  1.00 ± 0.00"), "{}", stdout(&o));
    assert!(stdout(&o).contains("PSNR  100.00 ± 0.00"));
}

#[test]
fn eval_names_the_record_with_a_missing_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = write_eval_fixture(&tmp.path().join("fx"));
    fs::remove_file(tmp.path().join("fx/p2.png")).unwrap();
    let o = smokebench(&["eval", "--manifest", s(&manifest), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("two"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = smokebench(&["gradcheck", "--probes", "4", "--sweep", "1e-2,1e-3,1e-4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["probes"].as_array().unwrap().len(), 4);
    assert_eq!(report["passed"], true);

    let o = smokebench(&["gradcheck", "--probes", "2", "--corrupt"]);
    assert_eq!(o.status.code(), Some(3));
}

fn tiny_train_config(root: &Path) -> PathBuf {
    let cfg = root.join("train.toml");
    fs::write(&cfg, "[train_toy]\nbatch_size = 2\n[train_toy.model]\nheight = 32\nwidth = 40\nenc1 = 4\nenc2 = 6\ndec = 4\n").unwrap();
    cfg
}

#[test]
fn train_with_zero_steps_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 2);
    assert!(synth(tmp.path(), &clean, "data", 3, &[]).status.success());
    let cfg = tiny_train_config(tmp.path());
    let out = tmp.path().join("run");
    let manifest = tmp.path().join("data/manifest.jsonl");
    let o = smokebench(&["--config", s(&cfg), "--seed", "5", "train-toy", "--manifest", s(&manifest), "--out", s(&out), "--steps", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let expected = ToyModel::new(ModelConfig { height: 32, width: 40, enc1: 4, enc2: 6, dec: 4 }, 5).unwrap();
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), expected.to_bytes());
    assert_eq!(fs::read_to_string(out.join("loss.csv")).unwrap().lines().count(), 1);
}

#[test]
fn train_is_reproducible_and_checkpoint_drives_desmoke() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 2);
    assert!(synth(tmp.path(), &clean, "data", 4, &[]).status.success());
    let cfg = tiny_train_config(tmp.path());
    let manifest = tmp.path().join("data/manifest.jsonl");
    for run in ["r1", "r2"] {
        let o = smokebench(&[
            "--config", s(&cfg), "--deterministic", "train-toy", "--manifest", s(&manifest), "--out",
            s(&tmp.path().join(run)), "--steps", "12",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["model.ckpt", "loss.csv"] {
        assert_eq!(fs::read(tmp.path().join("r1").join(f)).unwrap(), fs::read(tmp.path().join("r2").join(f)).unwrap());
    }
    assert_eq!(fs::read_to_string(tmp.path().join("r1/loss.csv")).unwrap().lines().count(), 13);

    let out = tmp.path().join("learned");
    let o = smokebench(&[
        "desmoke", "--method", "learned", "--checkpoint", s(&tmp.path().join("r1/model.ckpt")), "--manifest", s(&manifest),
        "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let j = load_image(out.join("000002.png")).unwrap();
    assert_eq!(j.dims(), (32, 40));
    assert!(out.join("000002_smoke.png").exists());
}

#[test]
fn train_rejects_tiny_manifests_and_diverging_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 1);
    let cfg = tiny_train_config(tmp.path());
    assert!(synth(tmp.path(), &clean, "one", 1, &[]).status.success());
    let o = smokebench(&["--config", s(&cfg), "train-toy", "--manifest", s(&tmp.path().join("one/manifest.jsonl")), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));

    assert!(synth(tmp.path(), &clean, "two", 2, &[]).status.success());
    let o = smokebench(&[
        "--config", s(&cfg), "train-toy", "--manifest", s(&tmp.path().join("two/manifest.jsonl")), "--out",
        s(&tmp.path().join("y")), "--steps", "5", "--lr-max", "1e300", "--lr-min", "1e300",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = clean_dir(tmp.path(), 1);
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_smokebench"))
        .args(["synth", "--clean-dir", s(&clean), "--out", s(&out), "--count", "1", "--height", "16", "--width", "16"])
        .env("SMOKEBENCH_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("resolved_config.toml")).unwrap().contains("threads = 2"));
}
