use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use uvmakeup_core::io::{self, Container};
use uvmakeup_core::morphable::{FittedFace, MorphableBasis};
use uvmakeup_core::trainer::dataset::dataset_from_container;
use uvmakeup_core::trainer::{checkpoint_path, generate_dataset, manifest_path, DatasetSpec};
use uvmakeup_core::uv::{masked_psnr, RasterPlan, Region, UvContext};
use uvmakeup_tensor::Tensor;

const TINY: &str = "\
[uv_pipeline]
resolution = 32
image_size = 48

[transfer_net]
feature_channels = 16
res_blocks = 1
disc_channels = 8

[data]
n_makeup = 3
n_plain = 3

[trainer]
steps = 3
";

fn uvmakeup(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvmakeup"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = uvmakeup(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A dataset and a short training run shared by the transfer and eval tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        ok(&[
            "synth",
            "--out",
            s(&data),
            "--n-makeup",
            "4",
            "--n-plain",
            "3",
            "--seed",
            "2",
            "--config",
            s(&config),
        ]);
        let run = root.join("run");
        ok(&["train", "--config", s(&config), "--out", s(&run)]);
        Fixture {
            _dir: dir,
            ckpt: checkpoint_path(&run, 3),
            root,
        }
    })
}

fn image(name: &str) -> PathBuf {
    fixture().root.join("data/images").join(name)
}

fn transfer(tag: &str, extra: &[&str]) -> Container {
    let f = fixture();
    let out = f.root.join(format!("transfer_{tag}"));
    let src = image("sample_0004.png");
    let reference = image("sample_0000.png");
    let mut args = vec![
        "transfer",
        "--ckpt",
        s(&f.ckpt),
        "--src",
        s(&src),
        "--ref",
        s(&reference),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    Container::read(&out.join("result.uvt1")).unwrap()
}

#[test]
fn synth_is_deterministic_and_counts_match_the_flags() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--out",
            s(out),
            "--n-makeup",
            "2",
            "--n-plain",
            "3",
            "--seed",
            "5",
        ]);
    }
    for name in ["dataset.uvt1", "manifest.toml", "images/sample_0004.png"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest: toml::Table = fs::read_to_string(a.join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["count"].as_integer(), Some(5));
    let pngs = fs::read_dir(a.join("images"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "png")
        })
        .count();
    assert_eq!(pngs, 5);
}

#[test]
fn synth_sample_zero_loads_back_as_generated() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "synth",
        "--out",
        s(dir.path()),
        "--n-makeup",
        "2",
        "--n-plain",
        "1",
        "--seed",
        "8",
    ]);
    let loaded =
        dataset_from_container(&Container::read(&dir.path().join("dataset.uvt1")).unwrap())
            .unwrap();

    let cfg = uvmakeup_core::trainer::Config::default();
    let uv = cfg.uv_pipeline;
    let basis = MorphableBasis::synthetic(uv.basis_seed);
    let ctx = UvContext::new(&basis, uv.resolution).unwrap();
    let mut spec = DatasetSpec::new(2, 1, 8, uv.image_size);
    spec.contamination_rate = cfg.data.contamination_rate;
    spec.max_yaw = cfg.data.max_yaw;
    spec.max_pitch = cfg.data.max_pitch;
    let generated = generate_dataset(&basis, &ctx, &spec).unwrap();
    assert_eq!(loaded.len(), 3);
    assert_eq!(loaded[0], generated[0]);
}

#[test]
fn unknown_config_key_is_named_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[trainer]\nlearning_rate = 0.1\n").unwrap();
    let out = uvmakeup(&["train", "--config", s(&config), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn fam_off_is_recorded_and_the_log_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&run),
        "--fam-off",
        "--steps",
        "2",
    ]);
    let manifest: toml::Table = fs::read_to_string(manifest_path(&checkpoint_path(&run, 2)))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["checkpoint"]["fam_off"].as_bool(), Some(true));
    assert_eq!(
        manifest["config"]["trainer"]["fam_off"].as_bool(),
        Some(true)
    );
    let csv = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);

    // resuming appends the remaining step
    ok(&[
        "train",
        "--resume",
        s(&checkpoint_path(&run, 2)),
        "--steps",
        "3",
    ]);
    let csv = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn zero_shade_matches_the_no_makeup_path_bitwise() {
    let zero = transfer("w0", &["--w", "0"]);
    let none = transfer("none", &["--region", "none"]);
    for name in ["texture", "image"] {
        assert_eq!(
            zero.tensor(name).unwrap(),
            none.tensor(name).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn lips_transfer_leaves_eye_pixels_at_the_baseline() {
    let lips = transfer("lips", &["--region", "lips"]);
    let none = transfer("none_eye", &["--region", "none"]);
    let (a, b) = (lips.tensor("image").unwrap(), none.tensor("image").unwrap());

    let basis = MorphableBasis::synthetic(7);
    let ctx = UvContext::new(&basis, 32).unwrap();
    let coeffs =
        io::coefficients_from_text(&fs::read_to_string(image("sample_0004.txt")).unwrap()).unwrap();
    let face = FittedFace::from_coefficients(&basis, &coeffs).unwrap();
    let masks = RasterPlan::new(&face, (48, 48), 32)
        .region_masks(&ctx.regions)
        .unwrap();
    assert!(masks.count(Region::Eye) > 0 && masks.count(Region::Lips) > 0);
    let plane = 48 * 48;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if masks.eye[i % plane] {
            assert!((x - y).abs() <= 1e-3, "eye pixel {i}: {x} vs {y}");
        }
    }
    // the lips themselves do change
    let moved = (0..a.numel())
        .filter(|&i| masks.lips[i % plane])
        .map(|i| (a.data()[i] - b.data()[i]).abs())
        .fold(0.0, f64::max);
    assert!(moved > 0.0);
}

#[test]
fn interpolation_weight_one_is_plain_transfer() {
    let second = image("sample_0001.png");
    let plain = transfer("plain", &[]);
    let interp = transfer("interp", &["--interp-ref2", s(&second), "--interp-w", "1"]);
    for name in ["texture", "image", "fam_mask"] {
        assert_eq!(
            plain.tensor(name).unwrap(),
            interp.tensor(name).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn out_of_range_shade_is_rejected() {
    let f = fixture();
    let out = uvmakeup(&[
        "transfer",
        "--ckpt",
        s(&f.ckpt),
        "--src",
        s(&image("sample_0004.png")),
        "--ref",
        s(&image("sample_0000.png")),
        "--w",
        "1.5",
        "--out",
        s(&f.root.join("bad")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--w"));
    assert!(!f.root.join("bad").exists());
}

#[test]
fn eval_report_has_the_metrics_and_a_recomputable_psnr() {
    let f = fixture();
    let report = f.root.join("eval/report.toml");
    let again = f.root.join("eval/again.toml");
    for r in [&report, &again] {
        ok(&[
            "eval",
            "--ckpt",
            s(&f.ckpt),
            "--dataset",
            s(&f.root.join("data")),
            "--report",
            s(r),
        ]);
    }
    let text = fs::read_to_string(&report).unwrap();
    let table: toml::Table = text.parse().unwrap();
    for key in [
        "mask_separation",
        "repair_l1_full",
        "cycle_l1",
        "self_transfer_l1",
        "uv_roundtrip_psnr_db",
    ] {
        assert!(
            table[key].as_float().is_some(),
            "{key} missing from\n{text}"
        );
    }
    let strip = |t: &str| {
        t.lines()
            .filter(|l| !l.contains("uv_roundtrip_file"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&text), strip(&fs::read_to_string(&again).unwrap()));

    let saved = Container::read(Path::new(table["uv_roundtrip_file"].as_str().unwrap())).unwrap();
    let valid: Vec<bool> = saved
        .require("valid")
        .unwrap()
        .data
        .to_f64()
        .iter()
        .map(|&v| v != 0.0)
        .collect();
    let recomputed = psnr(
        &saved.tensor("extracted").unwrap(),
        &saved.tensor("original").unwrap(),
        &valid,
    );
    assert!((recomputed - table["uv_roundtrip_psnr_db"].as_float().unwrap()).abs() <= 1e-9);
    assert!(
        (recomputed
            - masked_psnr(
                &saved.tensor("extracted").unwrap(),
                &saved.tensor("original").unwrap(),
                &valid
            )
            .unwrap())
        .abs()
            <= 1e-9
    );
}

/// PSNR over valid texels for signals in [0, 1].
fn psnr(a: &Tensor, b: &Tensor, valid: &[bool]) -> f64 {
    let plane = valid.len();
    let (mut se, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if valid[i % plane] {
            se += (x - y) * (x - y);
            n += 1;
        }
    }
    -10.0 * (se / n as f64).log10()
}
