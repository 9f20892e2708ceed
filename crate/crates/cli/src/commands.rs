use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uvmakeup_core::io::{self, Container};
use uvmakeup_core::morphable::{FittedFace, MorphableBasis};
use uvmakeup_core::net::{Interpolation, TransferConfig};
use uvmakeup_core::trainer::dataset::{dataset_from_container, dataset_to_container};
use uvmakeup_core::trainer::eval::{cycle_l1, self_transfer_l1};
use uvmakeup_core::trainer::{
    checkpoint_path, evaluate_repair, generate_dataset, observed_texture, transfer_image, Config,
    Domain, FaceInput, Model, RepairPair, SyntheticSample, TrainState, Trainer,
};
use uvmakeup_core::uv::{
    extract_uv_texture, masked_psnr, ExtractOptions, RasterPlan, Region, UvContext,
};
use uvmakeup_core::{Error, Result};
use uvmakeup_tensor::Tensor;

use crate::{EvalArgs, RegionArg, SynthArgs, TrainArgs, TransferArgs};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    count: usize,
    n_makeup: usize,
    n_plain: usize,
    seed: u64,
    resolution: usize,
    image_size: usize,
    basis_seed: u64,
    contamination_rate: f64,
    max_yaw: f64,
    max_pitch: f64,
    background: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// The image a camera would see for a sample: its contaminated texture
/// rendered at its pose.
fn observed_image(
    basis: &MorphableBasis,
    s: &SyntheticSample,
    size: usize,
    background: f64,
) -> Result<Tensor> {
    let face = FittedFace::from_coefficients(basis, &s.coefficients)?;
    let plan = RasterPlan::new(&face, (size, size), s.contaminated_texture.resolution());
    plan.render(s.contaminated_texture.pixels(), background)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.data.n_makeup = a.n_makeup;
    cfg.data.n_plain = a.n_plain;
    cfg.data.seed = a.seed;
    cfg.validate()?;
    let uv = cfg.uv_pipeline;
    let basis = MorphableBasis::synthetic(uv.basis_seed);
    let ctx = UvContext::new(&basis, uv.resolution)?;
    let mut spec =
        uvmakeup_core::trainer::DatasetSpec::new(a.n_makeup, a.n_plain, a.seed, uv.image_size);
    spec.contamination_rate = cfg.data.contamination_rate;
    spec.max_yaw = cfg.data.max_yaw;
    spec.max_pitch = cfg.data.max_pitch;
    let samples = generate_dataset(&basis, &ctx, &spec)?;

    create_dir(&a.out)?;
    dataset_to_container(&samples)?.write(&a.out.join("dataset.uvt1"))?;
    io::basis_to_container(&basis)?.write(&a.out.join("basis.uvt1"))?;
    let images = a.out.join("images");
    create_dir(&images)?;
    for (i, s) in samples.iter().enumerate() {
        let img = observed_image(&basis, s, uv.image_size, uv.background)?;
        io::save_png(&images.join(format!("sample_{i:04}.png")), &img)?;
        io::write_text(
            &images.join(format!("sample_{i:04}.txt")),
            &io::coefficients_to_text(&s.coefficients),
        )?;
    }
    let manifest = DatasetManifest {
        count: samples.len(),
        n_makeup: a.n_makeup,
        n_plain: a.n_plain,
        seed: a.seed,
        resolution: uv.resolution,
        image_size: uv.image_size,
        basis_seed: uv.basis_seed,
        contamination_rate: spec.contamination_rate,
        max_yaw: spec.max_yaw,
        max_pitch: spec.max_pitch,
        background: uv.background,
    };
    io::write_text(
        &a.out.join("manifest.toml"),
        &toml::to_string(&manifest).expect("manifest serializes"),
    )?;
    eprintln!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let (state, saved) = TrainState::load(ckpt)?;
            let mut cfg = match &a.config {
                Some(p) => Config::load(p)?,
                None => saved,
            };
            if (a.fam_off && !state.fam_off) || (a.mtm_off && !state.mtm_off) {
                return Err(Error::Config(
                    "ablation flags differ from the resumed checkpoint".into(),
                ));
            }
            cfg.trainer.fam_off = state.fam_off;
            cfg.trainer.mtm_off = state.mtm_off;
            apply_overrides(&mut cfg, a);
            Trainer::with_state(cfg, state)?
        }
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            cfg.trainer.fam_off |= a.fam_off;
            cfg.trainer.mtm_off |= a.mtm_off;
            apply_overrides(&mut cfg, a);
            Trainer::new(cfg)?
        }
    };
    let out = trainer
        .config
        .trainer
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("trainer.out_dir is not set; pass --out".into()))?;
    let remaining = trainer
        .config
        .trainer
        .steps
        .saturating_sub(trainer.state.step);
    trainer.run(remaining)?;
    if !checkpoint_path(&out, trainer.state.step).exists() {
        trainer.checkpoint(&out)?;
    }
    eprintln!(
        "trained to step {}; checkpoint {}",
        trainer.state.step,
        checkpoint_path(&out, trainer.state.step).display()
    );
    Ok(())
}

fn apply_overrides(cfg: &mut Config, a: &TrainArgs) {
    if let Some(s) = a.steps {
        cfg.trainer.steps = s;
    }
    if let Some(o) = &a.out {
        cfg.trainer.out_dir = Some(o.clone());
    }
}

/// Reads a face from a PNG plus its coefficients file, or renders one
/// from coefficients alone.
fn load_face(
    path: &Path,
    basis: &MorphableBasis,
    ctx: &UvContext,
    cfg: &Config,
) -> Result<FaceInput> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let coeff_path: PathBuf = if is_png {
        path.with_extension("txt")
    } else {
        path.to_path_buf()
    };
    let coefficients = io::coefficients_from_text(&io::read_text(&coeff_path)?)?;
    if is_png {
        Ok(FaceInput {
            image: io::load_png(path)?,
            coefficients,
        })
    } else {
        let uv = &cfg.uv_pipeline;
        FaceInput::from_coefficients(basis, ctx, coefficients, uv.image_size, uv.background)
    }
}

fn load_model(ckpt: &Path) -> Result<(Model, Config)> {
    let (state, cfg) = TrainState::load(ckpt)?;
    Ok((Model::from_state(&state, &cfg.transfer_net), cfg))
}

pub fn transfer(a: &TransferArgs) -> Result<()> {
    for (name, w) in [("--w", a.w), ("--interp-w", a.interp_w)] {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Contract(format!(
                "{name} must lie in [0, 1], got {w}"
            )));
        }
    }
    let (model, cfg) = load_model(&a.ckpt)?;
    let basis = MorphableBasis::synthetic(cfg.uv_pipeline.basis_seed);
    let ctx = UvContext::new(&basis, cfg.uv_pipeline.resolution)?;
    let opts = ExtractOptions {
        z_eps: cfg.uv_pipeline.z_eps,
    };
    let src = load_face(&a.src, &basis, &ctx, &cfg)?;
    let reference = load_face(&a.reference, &basis, &ctx, &cfg)?;
    let r = ctx.resolution();
    let region = match a.region {
        RegionArg::All => None,
        RegionArg::None => Some(Tensor::zeros(&[1, r, r])),
        RegionArg::Lips => Some(ctx.regions.get(Region::Lips).clone()),
        RegionArg::Eye => Some(ctx.regions.get(Region::Eye).clone()),
        RegionArg::Face => Some(ctx.regions.get(Region::Face).clone()),
    };
    let interpolation = match &a.interp_ref2 {
        Some(p) => {
            let second = load_face(p, &basis, &ctx, &cfg)?;
            let face = FittedFace::from_coefficients(&basis, &second.coefficients)?;
            let tex = extract_uv_texture(&second.image, &face, &ctx, opts)?;
            Some(Interpolation {
                reference: tex.into_pixels(),
                weight: a.interp_w,
            })
        }
        None => None,
    };
    let tcfg = TransferConfig {
        shade: a.w,
        region,
        interpolation,
        ..model.transfer_config()
    };
    let out = transfer_image(&model, &basis, &ctx, &src, &reference, &tcfg, opts)?;

    create_dir(&a.out)?;
    io::save_png(&a.out.join("result.png"), &out.image.pixels)?;
    io::save_png(&a.out.join("fam_mask.png"), &out.generated.mask)?;
    let mut c = Container::new();
    c.push_tensor("texture", out.generated.texture.pixels())?;
    c.push_tensor("fam_mask", &out.generated.mask)?;
    c.push_tensor("image", &out.image.pixels)?;
    c.write(&a.out.join("result.uvt1"))?;
    io::write_text(
        &a.out.join("attention.txt"),
        &attention_summary(out.generated.attention.as_ref()),
    )?;
    eprintln!("wrote transfer outputs to {}", a.out.display());
    Ok(())
}

/// Row count, mean row entropy and mean row maximum of the attention map.
fn attention_summary(a: Option<&Tensor>) -> String {
    let Some(a) = a else {
        return "attention = \"off\"\n".into();
    };
    let n = a.shape()[0];
    let (mut entropy, mut peak) = (0.0, 0.0);
    for row in a.data().chunks_exact(a.shape()[1]) {
        entropy -= row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        peak += row.iter().cloned().fold(0.0, f64::max);
    }
    format!(
        "attention = \"on\"\nrows = {n}\nmean_row_entropy = {}\nuniform_entropy = {}\nmean_row_max = {}\n",
        entropy / n as f64,
        (a.shape()[1] as f64).ln(),
        peak / n as f64
    )
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt)?;
    let manifest: DatasetManifest =
        toml::from_str(&io::read_text(&a.dataset.join("manifest.toml"))?).map_err(|e| {
            Error::Format {
                what: "dataset manifest",
                detail: e.message().to_string(),
            }
        })?;
    let basis = io::basis_from_container(&Container::read(&a.dataset.join("basis.uvt1"))?)?;
    if manifest.resolution != cfg.uv_pipeline.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} differs from the checkpoint's {}",
            manifest.resolution, cfg.uv_pipeline.resolution
        )));
    }
    let ctx = UvContext::new(&basis, manifest.resolution)?;
    let samples = dataset_from_container(&Container::read(&a.dataset.join("dataset.uvt1"))?)?;
    let opts = ExtractOptions {
        z_eps: cfg.uv_pipeline.z_eps,
    };
    let plain: Vec<&SyntheticSample> = samples
        .iter()
        .filter(|s| s.domain == Domain::Plain)
        .collect();
    let makeup: Vec<&SyntheticSample> = samples
        .iter()
        .filter(|s| s.domain == Domain::Makeup)
        .collect();
    if plain.is_empty() || makeup.is_empty() {
        return Err(Error::Config(
            "evaluation needs plain and makeup samples".into(),
        ));
    }

    let mut report = String::new();
    let mut line = |k: &str, v: String| writeln!(report, "{k} = {v}").expect("string write");
    line("checkpoint", format!("{:?}", a.ckpt.display().to_string()));
    line("samples", samples.len().to_string());

    // every texture as the network sees it: rendered at the sample's pose
    // and extracted back
    let seen = |s: &SyntheticSample, t: &Tensor| {
        observed_texture(
            &basis,
            &ctx,
            &s.coefficients,
            t,
            manifest.image_size,
            manifest.background,
            opts,
        )
    };
    let plain_tex = plain
        .iter()
        .map(|s| seen(s, s.clean_texture.pixels()))
        .collect::<Result<Vec<_>>>()?;
    let pairs = makeup
        .iter()
        .filter(|s| s.is_contaminated())
        .enumerate()
        .map(|(i, r)| {
            Ok(RepairPair {
                source: plain_tex[i % plain.len()].clone(),
                clean_reference: seen(r, r.clean_texture.pixels())?,
                contaminated_reference: seen(r, r.contaminated_texture.pixels())?,
                contamination_mask: r.contamination_mask.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    line("repair_pairs", pairs.len().to_string());
    if !pairs.is_empty() {
        let fam_off = match &a.fam_off_ckpt {
            Some(p) => Some(load_model(p)?.0),
            None => None,
        };
        let m = evaluate_repair(&model, fam_off.as_ref(), &pairs, &ctx)?;
        line("mask_separation", m.mask_separation.to_string());
        line("repair_l1_full", m.mean_full_l1().to_string());
        if let (Some(off), Some(win)) = (m.mean_fam_off_l1(), m.win_fraction) {
            line("repair_l1_fam_off", off.to_string());
            line("repair_win_fraction", win.to_string());
        }
    }

    let cycle_pairs = makeup
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok((
                plain_tex[i % plain.len()].clone(),
                seen(r, r.contaminated_texture.pixels())?,
            ))
        })
        .collect::<Result<Vec<(Tensor, Tensor)>>>()?;
    line("cycle_l1", cycle_l1(&model, &cycle_pairs)?.to_string());

    let inputs = plain
        .iter()
        .map(|s| {
            Ok(FaceInput {
                image: observed_image(&basis, s, manifest.image_size, manifest.background)?,
                coefficients: s.coefficients.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    line(
        "self_transfer_l1",
        self_transfer_l1(&model, &basis, &ctx, &inputs, opts)?.to_string(),
    );

    // UV round trip of the first sample, with its inputs saved for
    // independent recomputation
    let s0 = &samples[0];
    let face = FittedFace::from_coefficients(&basis, &s0.coefficients)?;
    let img = RasterPlan::new(
        &face,
        (manifest.image_size, manifest.image_size),
        ctx.resolution(),
    )
    .render(s0.clean_texture.pixels(), manifest.background)?;
    let tex = extract_uv_texture(&img, &face, &ctx, opts)?;
    let psnr =
        masked_psnr(tex.pixels(), s0.clean_texture.pixels(), tex.validity()).unwrap_or(f64::NAN);
    line("uv_roundtrip_psnr_db", psnr.to_string());
    let mut c = Container::new();
    c.push_tensor("original", s0.clean_texture.pixels())?;
    c.push_tensor("extracted", tex.pixels())?;
    let r = ctx.resolution();
    c.push_u8(
        "valid",
        &[r, r],
        tex.validity().iter().map(|&v| v as u8).collect(),
    )?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let roundtrip = a.report.with_extension("roundtrip.uvt1");
    c.write(&roundtrip)?;
    line(
        "uv_roundtrip_file",
        format!("{:?}", roundtrip.display().to_string()),
    );

    io::write_text(&a.report, &report)?;
    eprint!("{report}");
    Ok(())
}
