use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcdncnn::network::save_model;
use mcdncnn::phantom::phantom;
use mcdncnn::volume::{read_volume, write_volume};
use mcdncnn::{build_model, ModelConfig};

fn mcdncnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcdncnn")).args(args).output().expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom_file(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_volume(&phantom([24, 24, 8], seed).unwrap(), &path).unwrap();
    path
}

#[test]
fn add_noise_is_seeded_and_validates_level() {
    let dir = tempfile::tempdir().unwrap();
    let clean = phantom_file(dir.path(), "clean.nii", 1);
    let (a, b) = (dir.path().join("a.nii"), dir.path().join("b.nii"));
    for out in [&a, &b] {
        let o = mcdncnn(&["add-noise", "--in", s(&clean), "--out", s(out), "--level", "9", "--seed", "4"]);
        assert!(o.status.success(), "{}", text(&o));
        assert!(text(&o).contains("sigma = 22.95"), "{}", text(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&clean).unwrap());

    for level in ["0", "-3", "100.5"] {
        let o = mcdncnn(&["add-noise", "--in", s(&clean), "--out", s(&a), "--level", level]);
        assert_eq!(o.status.code(), Some(2), "level {level}: {}", text(&o));
    }
}

#[test]
fn evaluate_writes_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let clean = phantom_file(dir.path(), "clean.nii", 2);
    let noisy = dir.path().join("noisy.nii");
    assert!(mcdncnn(&["add-noise", "--in", s(&clean), "--out", s(&noisy), "--level", "9"]).status.success());
    let csv = dir.path().join("report.csv");
    let o = mcdncnn(&[
        "evaluate",
        "--clean",
        s(&clean),
        "--test",
        &format!("self={}", s(&clean)),
        "--test",
        &format!("noisy={}", s(&noisy)),
        "--csv",
        s(&csv),
        "--level",
        "9",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let report = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "name,level_percent,psnr_db,ssim_global");
    assert_eq!(lines[1], "self,9,inf,1.000000");
    let noisy_row: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(noisy_row[0], "noisy");
    let psnr: f64 = noisy_row[2].parse().unwrap();
    assert!(psnr > 10.0 && psnr < 40.0, "{psnr}");
    assert!(noisy_row[3].parse::<f64>().unwrap() < 1.0);
}

#[test]
fn evaluate_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let clean = phantom_file(dir.path(), "clean.nii", 3);
    let other = dir.path().join("other.nii");
    write_volume(&phantom([24, 24, 9], 3).unwrap(), &other).unwrap();
    let o = mcdncnn(&[
        "evaluate",
        "--clean",
        s(&clean),
        "--test",
        &format!("x={}", s(&other)),
        "--csv",
        s(&dir.path().join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn train_then_denoise() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    phantom_file(&data, "a.nii", 4);
    phantom_file(&data, "b.json", 5);
    let model = dir.path().join("m.mcdn");
    let o = mcdncnn(&[
        "train", "--data", s(&data), "--regime", "general:5,9", "--out", s(&model), "--epochs", "2", "--batch", "4",
        "--lr-start", "1e-3", "--lr-end", "1e-4", "--width", "4", "--depth", "3", "--patch", "16", "--stride", "8",
        "--patches", "12", "--seed", "1",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let log = std::fs::read_to_string(format!("{}.loss.csv", s(&model))).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,lr,mean_loss"));
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().nth(2).unwrap().starts_with("1,0.0001,"));

    let noisy = dir.path().join("noisy.nii");
    assert!(mcdncnn(&["add-noise", "--in", s(&data.join("a.nii")), "--out", s(&noisy), "--level", "9"]).status.success());
    let out = dir.path().join("den.nii");
    let o = mcdncnn(&["denoise", "--in", s(&noisy), "--model", s(&model), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(read_volume(&out).unwrap().dims(), [24, 24, 8]);
}

#[test]
fn train_rejects_empty_directory_and_bad_regime() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.mcdn");
    let o = mcdncnn(&["train", "--data", s(dir.path()), "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("no .nii"));
    phantom_file(dir.path(), "a.nii", 1);
    let o = mcdncnn(&["train", "--data", s(dir.path()), "--out", s(&model), "--regime", "blind"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_residual_model_leaves_volume_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = build_model(
        ModelConfig {
            width: 4,
            depth: 3,
            ..ModelConfig::default()
        },
        1,
    )
    .unwrap();
    let last = model.layers_mut().last_mut().unwrap();
    last.conv.kernels = mcdncnn::Tensor::zeros(last.conv.kernels.shape());
    let model_path = dir.path().join("zero.mcdn");
    save_model(&model, &model_path).unwrap();
    let input = phantom_file(dir.path(), "in.nii", 6);
    let out = dir.path().join("out.nii");
    let o = mcdncnn(&["denoise", "--in", s(&input), "--model", s(&model_path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let (a, b) = (read_volume(&input).unwrap(), read_volume(&out).unwrap());
    assert_eq!(a.dims(), b.dims());
    assert!(a.voxels().iter().zip(b.voxels()).all(|(p, q)| (p - q).abs() <= 1e-5));

    let wrong = build_model(
        ModelConfig {
            in_channels: 3,
            width: 2,
            depth: 3,
            out_channels: 1,
        },
        1,
    )
    .unwrap();
    save_model(&wrong, &model_path).unwrap();
    let o = mcdncnn(&["denoise", "--in", s(&input), "--model", s(&model_path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_detects_corruption() {
    let o = mcdncnn(&["selfcheck", "--cases", "20"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(!text(&o).contains("FAIL"));
    let o = mcdncnn(&["selfcheck", "--cases", "3", "--corrupt-conv-grad"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("FAIL conv2d_mc gradients"));
}

#[test]
fn phantom_command_writes_a_volume() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.nii");
    let o = mcdncnn(&["phantom", "--out", s(&out), "--dims", "16,12,10", "--seed", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let v = read_volume(&out).unwrap();
    assert_eq!(v.dims(), [16, 12, 10]);
    assert_eq!(v.min_max().1, 255.0);
    assert_eq!(mcdncnn(&["phantom", "--out", s(&out), "--dims", "4,4"]).status.code(), Some(2));
}
