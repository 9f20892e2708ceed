//! Synthetic data, the adversarial training loop, checkpoints and
//! evaluation.
//!
//! One iteration draws an unpaired (plain source, makeup reference) pair,
//! runs the generator both ways plus both cycle passes on one tape, and
//! updates the generator against frozen discriminators. The discriminators
//! are then updated on detached copies of the same fakes.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uvmakeup_tensor::{ParamStore, Tape, Tensor};

use crate::error::{io_err, Error, Result};
use crate::io::Container;
use crate::morphable::{FittedFace, MorphableBasis};
use crate::net::{
    discriminator_on_tape, generator_on_tape, init_discriminators, init_generator, Discriminator,
    FamMode, TransferConfig,
};
use crate::objectives::{
    cycle_loss_on_tape, generator_adv_on_tape, makeup_loss_on_tape, neg_log1m_mean_on_tape,
    neg_log_mean_on_tape, perceptual_loss_on_tape, LossComponents, RandomConvExtractor,
};
use crate::uv::{extract_uv_texture, ExtractOptions, ImageRegionMasks, RasterPlan, UvContext};

pub use config::{Config, DataConfig, ObjectivesConfig, TrainerConfig, UvPipelineConfig};
pub use dataset::{generate_dataset, DatasetSpec, Domain, SyntheticSample};
pub use eval::{
    evaluate_repair, observed_texture, transfer_image, FaceInput, Model, RepairMetrics, RepairPair,
    TransferOutput,
};
pub use optim::{Adam, AdamConfig};

/// Immutable pieces shared by every step: the basis, the UV context and
/// the perceptual feature extractor.
pub struct Environment {
    pub basis: MorphableBasis,
    pub ctx: UvContext,
    pub extractor: RandomConvExtractor,
}

impl Environment {
    pub fn new(cfg: &Config) -> Result<Self> {
        let basis = MorphableBasis::synthetic(cfg.uv_pipeline.basis_seed);
        let ctx = UvContext::new(&basis, cfg.uv_pipeline.resolution)?;
        Ok(Self {
            basis,
            ctx,
            extractor: RandomConvExtractor::new(cfg.objectives.extractor_seed),
        })
    }

    pub fn dataset_spec(&self, cfg: &Config, data: &DataConfig) -> DatasetSpec {
        DatasetSpec {
            n_makeup: data.n_makeup,
            n_plain: data.n_plain,
            seed: data.seed,
            contamination_rate: data.contamination_rate,
            image_size: cfg.uv_pipeline.image_size,
            max_yaw: data.max_yaw,
            max_pitch: data.max_pitch,
        }
    }
}

/// A sample as the network sees it: the observed image, the UV texture
/// extracted from it, and the raster plan for its pose.
#[derive(Clone)]
pub struct PreparedSample {
    pub domain: Domain,
    pub image: Tensor,
    pub texture: Tensor,
    pub plan: Arc<RasterPlan>,
    pub masks: ImageRegionMasks,
}

/// Renders the contaminated texture at the sample's pose and extracts the
/// UV texture back from that image.
pub fn prepare_sample(
    env: &Environment,
    cfg: &Config,
    sample: &SyntheticSample,
) -> Result<PreparedSample> {
    let size = cfg.uv_pipeline.image_size;
    let face = FittedFace::from_coefficients(&env.basis, &sample.coefficients)?;
    let plan = RasterPlan::new(&face, (size, size), env.ctx.resolution());
    let image = plan.render(
        sample.contaminated_texture.pixels(),
        cfg.uv_pipeline.background,
    )?;
    let opts = ExtractOptions {
        z_eps: cfg.uv_pipeline.z_eps,
    };
    let texture = extract_uv_texture(&image, &face, &env.ctx, opts)?.into_pixels();
    let masks = plan.region_masks(&env.ctx.regions)?;
    Ok(PreparedSample {
        domain: sample.domain,
        image,
        texture,
        plan: Arc::new(plan),
        masks,
    })
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: ParamStore,
    pub discriminators: ParamStore,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub step: u64,
    pub seed: u64,
    pub fam_off: bool,
    pub mtm_off: bool,
}

impl TrainState {
    pub fn init(cfg: &Config) -> Self {
        let t = &cfg.trainer;
        let generator = init_generator(&cfg.transfer_net, t.seed);
        let discriminators = init_discriminators(&cfg.transfer_net, t.seed.wrapping_add(1));
        Self {
            adam_g: Adam::new(t.adam(), &generator),
            adam_d: Adam::new(t.adam(), &discriminators),
            generator,
            discriminators,
            step: 0,
            seed: t.seed,
            fam_off: t.fam_off,
            mtm_off: t.mtm_off,
        }
    }

    pub fn transfer_config(&self) -> TransferConfig {
        TransferConfig {
            fam: if self.fam_off {
                FamMode::Off
            } else {
                FamMode::Learned
            },
            mtm_off: self.mtm_off,
            ..TransferConfig::default()
        }
    }

    fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let stores = [
            ("g", &self.generator),
            ("d", &self.discriminators),
            ("adam_g/m", &self.adam_g.m),
            ("adam_g/v", &self.adam_g.v),
            ("adam_d/m", &self.adam_d.m),
            ("adam_d/v", &self.adam_d.v),
        ];
        for (prefix, store) in stores {
            for (name, t) in store.iter() {
                c.push_tensor(format!("{prefix}/{name}"), t)?;
            }
        }
        Ok(c)
    }

    /// Writes `<stem>.uvt1` and its `<stem>.toml` manifest.
    pub fn save(&self, uvt1: &Path, cfg: &Config) -> Result<()> {
        self.to_container()?.write(uvt1)?;
        let manifest = CheckpointManifest {
            checkpoint: CheckpointInfo {
                step: self.step,
                seed: self.seed,
                fam_off: self.fam_off,
                mtm_off: self.mtm_off,
                adam_g_t: self.adam_g.t,
                adam_d_t: self.adam_d.t,
            },
            config: cfg.clone(),
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        crate::io::write_text(&manifest_path(uvt1), &text)
    }

    /// Loads a checkpoint and the configuration it was trained with.
    pub fn load(uvt1: &Path) -> Result<(Self, Config)> {
        let mpath = manifest_path(uvt1);
        let text = crate::io::read_text(&mpath)?;
        let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::Format {
            what: "checkpoint manifest",
            detail: e.message().to_string(),
        })?;
        let cfg = manifest.config;
        let info = manifest.checkpoint;
        let c = Container::read(uvt1)?;
        let read_store = |prefix: &str| -> Result<ParamStore> {
            let p = format!("{prefix}/");
            c.records()
                .iter()
                .filter(|r| r.name.starts_with(&p) && !r.name[p.len()..].contains('/'))
                .map(|r| {
                    Ok((
                        r.name[p.len()..].to_string(),
                        Tensor::new(&r.dims, r.data.to_f64())?,
                    ))
                })
                .collect()
        };
        let generator = read_store("g")?;
        let discriminators = read_store("d")?;
        let expect = |store: &ParamStore, shapes: Vec<(String, Vec<usize>)>| -> Result<()> {
            for (name, shape) in shapes {
                match store.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!(
                            "parameter {name} missing or misshapen for the manifest architecture"
                        ),
                    }),
                }
            }
            Ok(())
        };
        expect(&generator, cfg.transfer_net.generator_shapes())?;
        let adam = cfg.trainer.adam();
        let state = Self {
            adam_g: Adam {
                config: adam,
                t: info.adam_g_t,
                m: read_store("adam_g/m")?,
                v: read_store("adam_g/v")?,
            },
            adam_d: Adam {
                config: adam,
                t: info.adam_d_t,
                m: read_store("adam_d/m")?,
                v: read_store("adam_d/v")?,
            },
            generator,
            discriminators,
            step: info.step,
            seed: info.seed,
            fam_off: info.fam_off,
            mtm_off: info.mtm_off,
        };
        Ok((state, cfg))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointInfo {
    step: u64,
    seed: u64,
    fam_off: bool,
    mtm_off: bool,
    adam_g_t: u64,
    adam_d_t: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    checkpoint: CheckpointInfo,
    config: Config,
}

pub fn manifest_path(uvt1: &Path) -> PathBuf {
    uvt1.with_extension("toml")
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:07}.uvt1"))
}

/// Checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "uvt1")
                && p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("ckpt_"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Logged values of one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub components: LossComponents,
    pub loss_g: f64,
    pub loss_d: f64,
}

pub const LOG_HEADER: &str =
    "step,makeup,perceptual,cycle,adv_g_tex,adv_g_img,adv_d_tex,adv_d_img,loss_g,loss_d";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let c = &self.components;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            c.makeup,
            c.perceptual,
            c.cycle,
            c.adv_g_tex,
            c.adv_g_img,
            c.adv_d_tex,
            c.adv_d_img,
            self.loss_g,
            self.loss_d
        )
    }
}

/// The training loop over a prepared dataset.
pub struct Trainer {
    pub config: Config,
    pub env: Arc<Environment>,
    pub samples: Vec<PreparedSample>,
    makeup: Vec<usize>,
    plain: Vec<usize>,
    pub state: TrainState,
}

impl Trainer {
    /// Generates and prepares the configured dataset and initializes a
    /// fresh state.
    pub fn new(config: Config) -> Result<Self> {
        let state = TrainState::init(&config);
        Self::with_state(config, state)
    }

    pub fn with_state(config: Config, state: TrainState) -> Result<Self> {
        config.validate()?;
        let env = Arc::new(Environment::new(&config)?);
        let spec = env.dataset_spec(&config, &config.data);
        let samples = generate_dataset(&env.basis, &env.ctx, &spec)?
            .iter()
            .map(|s| prepare_sample(&env, &config, s))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(config, env, samples, state)
    }

    pub fn from_parts(
        config: Config,
        env: Arc<Environment>,
        samples: Vec<PreparedSample>,
        state: TrainState,
    ) -> Result<Self> {
        let makeup: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].domain == Domain::Makeup)
            .collect();
        let plain: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].domain == Domain::Plain)
            .collect();
        if makeup.is_empty() || plain.is_empty() {
            return Err(Error::Config(
                "training needs at least one makeup and one plain sample".into(),
            ));
        }
        Ok(Self {
            config,
            env,
            samples,
            makeup,
            plain,
            state,
        })
    }

    /// Resumes from a checkpoint written by [`TrainState::save`].
    pub fn resume(uvt1: &Path) -> Result<Self> {
        let (state, config) = TrainState::load(uvt1)?;
        Self::with_state(config, state)
    }

    pub fn model(&self) -> Model {
        Model::from_state(&self.state, &self.config.transfer_net)
    }

    /// The (source, reference) sample indices drawn for micro-batch `k` of
    /// iteration `step`.
    pub fn draw(&self, step: u64, k: usize) -> (usize, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(step);
        let mut pair = (0, 0);
        for _ in 0..=k {
            pair = (
                self.plain[rng.random_range(0..self.plain.len())],
                self.makeup[rng.random_range(0..self.makeup.len())],
            );
        }
        pair
    }

    /// One iteration: generator update then discriminator update(s).
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.state.step;
        let accum = self.config.trainer.grad_accum;
        let mut g_grads: Option<std::collections::BTreeMap<String, Tensor>> = None;
        let mut d_grads: Option<std::collections::BTreeMap<String, Tensor>> = None;
        let mut total = LossComponents::default();
        let (mut loss_g, mut loss_d) = (0.0, 0.0);
        for k in 0..accum {
            let (si, ri) = self.draw(step, k);
            let mb = self.micro_batch(si, ri)?;
            if !(mb.loss_g.is_finite() && mb.loss_d.is_finite()) {
                return Err(self.non_finite(step, si, ri, &mb));
            }
            add_into(&mut g_grads, mb.g_grads);
            add_into(&mut d_grads, mb.d_grads);
            let c = &mb.components;
            total.makeup += c.makeup / accum as f64;
            total.perceptual += c.perceptual / accum as f64;
            total.cycle += c.cycle / accum as f64;
            total.adv_g_tex += c.adv_g_tex / accum as f64;
            total.adv_g_img += c.adv_g_img / accum as f64;
            total.adv_d_tex += c.adv_d_tex / accum as f64;
            total.adv_d_img += c.adv_d_img / accum as f64;
            loss_g += mb.loss_g / accum as f64;
            loss_d += mb.loss_d / accum as f64;
            if k + 1 == accum {
                // extra discriminator updates reuse the last fakes
                let scale = 1.0 / accum as f64;
                let g = g_grads
                    .take()
                    .expect("accumulated")
                    .into_iter()
                    .map(|(n, t)| (n, t.scale(scale)))
                    .collect();
                let d = d_grads
                    .take()
                    .expect("accumulated")
                    .into_iter()
                    .map(|(n, t)| (n, t.scale(scale)))
                    .collect();
                self.state.adam_g.step(&mut self.state.generator, &g);
                self.state.adam_d.step(&mut self.state.discriminators, &d);
                for _ in 1..self.config.trainer.d_steps_per_g {
                    let (_, grads) = self.discriminator_pass(si, ri, &mb.fakes)?;
                    self.state
                        .adam_d
                        .step(&mut self.state.discriminators, &grads);
                }
            }
        }
        self.state.step += 1;
        Ok(StepLog {
            step,
            components: total,
            loss_g,
            loss_d,
        })
    }

    fn micro_batch(&self, si: usize, ri: usize) -> Result<MicroBatch> {
        let cfg = &self.config;
        let weights = cfg.objectives.weights();
        let (src, reference) = (&self.samples[si], &self.samples[ri]);
        let tcfg = self.state.transfer_config();
        let net = &cfg.transfer_net;
        let params = &self.state.generator;
        let bg = cfg.uv_pipeline.background;
        let form = cfg.objectives.adv_form;

        let mut tape = Tape::new();
        let ts = tape.constant(src.texture.clone());
        let tr = tape.constant(reference.texture.clone());
        let made_up = generator_on_tape(&mut tape, params, net, true, ts, tr, &tcfg)?.output;
        let removed = generator_on_tape(&mut tape, params, net, true, tr, ts, &tcfg)?.output;
        let rec_s = generator_on_tape(&mut tape, params, net, true, made_up, ts, &tcfg)?.output;
        let rec_r = generator_on_tape(&mut tape, params, net, true, removed, tr, &tcfg)?.output;
        let cycle = cycle_loss_on_tape(&mut tape, rec_s, ts, rec_r, tr);
        let per = perceptual_loss_on_tape(&mut tape, &self.env.extractor, made_up, ts);
        let i_t = src.plan.render_var(&mut tape, made_up, bg)?;
        let i_removed = reference.plan.render_var(&mut tape, removed, bg)?;
        let (makeup, _) = makeup_loss_on_tape(
            &mut tape,
            i_t,
            &reference.image,
            &src.masks,
            &reference.masks,
            &weights,
            &cfg.objectives.histogram(),
            cfg.objectives.makeup_norm,
        )?;
        let dp = &self.state.discriminators;
        let s_fake =
            discriminator_on_tape(&mut tape, dp, net, Discriminator::TextureS, false, removed)?;
        let r_fake =
            discriminator_on_tape(&mut tape, dp, net, Discriminator::TextureR, false, made_up)?;
        let img_t = discriminator_on_tape(&mut tape, dp, net, Discriminator::Image, false, i_t)?;
        let img_removed =
            discriminator_on_tape(&mut tape, dp, net, Discriminator::Image, false, i_removed)?;
        let a = generator_adv_on_tape(&mut tape, s_fake, form);
        let b = generator_adv_on_tape(&mut tape, r_fake, form);
        let g_tex = tape.add(a, b);
        let a = generator_adv_on_tape(&mut tape, img_t, form);
        let b = generator_adv_on_tape(&mut tape, img_removed, form);
        let g_img = tape.add(a, b);

        let adv = tape.add(g_tex, g_img);
        let adv = tape.scale(adv, weights.lambda_a);
        let m = tape.scale(makeup, weights.lambda_m);
        let c = tape.scale(cycle, weights.lambda_c);
        let p = tape.scale(per, weights.lambda_p);
        let sum = tape.add(adv, m);
        let sum = tape.add(sum, c);
        let l_g = tape.add(sum, p);
        let g_grads = tape.param_grads(&tape.backward(l_g));

        let fakes = Fakes {
            made_up: tape.value(made_up).clone(),
            removed: tape.value(removed).clone(),
            i_t: tape.value(i_t).clone(),
            i_removed: tape.value(i_removed).clone(),
        };
        let ((d_tex, d_img), d_grads) = self.discriminator_pass(si, ri, &fakes)?;
        let components = LossComponents {
            makeup: tape.value(makeup).item(),
            perceptual: tape.value(per).item(),
            cycle: tape.value(cycle).item(),
            adv_g_tex: tape.value(g_tex).item(),
            adv_g_img: tape.value(g_img).item(),
            adv_d_tex: d_tex,
            adv_d_img: d_img,
        };
        let (loss_g, loss_d) = crate::objectives::total_loss(&components, &weights);
        Ok(MicroBatch {
            components,
            loss_g,
            loss_d,
            g_grads,
            d_grads,
            fakes,
        })
    }

    /// Discriminator loss terms `(L_D_tex, L_D_img)` and gradients of
    /// `L_D` on detached fakes.
    fn discriminator_pass(
        &self,
        si: usize,
        ri: usize,
        fakes: &Fakes,
    ) -> Result<((f64, f64), std::collections::BTreeMap<String, Tensor>)> {
        let cfg = &self.config;
        let net = &cfg.transfer_net;
        let dp = &self.state.discriminators;
        let (src, reference) = (&self.samples[si], &self.samples[ri]);
        let mut tape = Tape::new();
        let d = |tape: &mut Tape, which, x: &Tensor| -> Result<_> {
            let v = tape.constant(x.clone());
            discriminator_on_tape(tape, dp, net, which, true, v)
        };
        let s_real = d(&mut tape, Discriminator::TextureS, &src.texture)?;
        let r_real = d(&mut tape, Discriminator::TextureR, &reference.texture)?;
        let s_fake = d(&mut tape, Discriminator::TextureS, &fakes.removed)?;
        let r_fake = d(&mut tape, Discriminator::TextureR, &fakes.made_up)?;
        let i_src = d(&mut tape, Discriminator::Image, &src.image)?;
        let i_ref = d(&mut tape, Discriminator::Image, &reference.image)?;
        let i_t = d(&mut tape, Discriminator::Image, &fakes.i_t)?;
        let i_removed = d(&mut tape, Discriminator::Image, &fakes.i_removed)?;

        let sum4 = |tape: &mut Tape, r1, r2, f1, f2| {
            let a = neg_log_mean_on_tape(tape, r1);
            let b = neg_log_mean_on_tape(tape, r2);
            let c = neg_log1m_mean_on_tape(tape, f1);
            let e = neg_log1m_mean_on_tape(tape, f2);
            let ab = tape.add(a, b);
            let ce = tape.add(c, e);
            tape.add(ab, ce)
        };
        let d_tex = sum4(&mut tape, s_real, r_real, s_fake, r_fake);
        let d_img = sum4(&mut tape, i_src, i_ref, i_t, i_removed);
        let both = tape.add(d_tex, d_img);
        let l_d = tape.scale(both, cfg.objectives.weights().lambda_a);
        let grads = tape.param_grads(&tape.backward(l_d));
        Ok(((tape.value(d_tex).item(), tape.value(d_img).item()), grads))
    }

    fn non_finite(&self, step: u64, si: usize, ri: usize, mb: &MicroBatch) -> Error {
        let mut detail = format!(
            "source sample {si}, reference sample {ri}, components {:?}, loss_g {}, loss_d {}",
            mb.components, mb.loss_g, mb.loss_d
        );
        if let Some(dir) = &self.config.trainer.out_dir {
            let path = dir.join(format!("nonfinite_step{step}.uvt1"));
            let mut c = Container::new();
            let (s, r) = (&self.samples[si], &self.samples[ri]);
            let written = c
                .push_tensor("src_texture", &s.texture)
                .and_then(|_| c.push_tensor("ref_texture", &r.texture))
                .and_then(|_| c.push_tensor("src_image", &s.image))
                .and_then(|_| c.push_tensor("ref_image", &r.image))
                .and_then(|_| c.push_i32("sample_indices", &[2], vec![si as i32, ri as i32]))
                .and_then(|_| c.write(&path));
            match written {
                Ok(()) => detail.push_str(&format!("; batch dumped to {}", path.display())),
                Err(e) => detail.push_str(&format!("; batch dump failed: {e}")),
            }
        }
        log::error!("non-finite loss at step {step}: {detail}");
        Error::NonFinite { step, detail }
    }

    /// Runs `steps` iterations. With an output directory configured, rows
    /// are appended to `loss_log.csv` as they complete and a checkpoint is
    /// written every `checkpoint_every` steps, keeping the newest few.
    pub fn run(&mut self, steps: u64) -> Result<Vec<StepLog>> {
        let out_dir = self.config.trainer.out_dir.clone();
        let mut log_file = match &out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join("loss_log.csv");
                let fresh = !path.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let mut logs = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let log = self.step()?;
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", log.csv_row()).map_err(io_err(path.as_path()))?;
            }
            if log.step % 100 == 0 {
                log::info!(
                    "step {} loss_g {:.4} loss_d {:.4} makeup {:.4}",
                    log.step,
                    log.loss_g,
                    log.loss_d,
                    log.components.makeup
                );
            }
            logs.push(log);
            if let Some(dir) = &out_dir {
                if self.state.step % self.config.trainer.checkpoint_every == 0 {
                    self.checkpoint(dir)?;
                }
            }
        }
        Ok(logs)
    }

    /// Saves the current state into `dir` and prunes older checkpoints.
    pub fn checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let path = checkpoint_path(dir, self.state.step);
        self.state.save(&path, &self.config)?;
        let all = list_checkpoints(dir)?;
        let keep = self.config.trainer.keep_checkpoints;
        for old in &all[..all.len().saturating_sub(keep)] {
            fs::remove_file(old).map_err(io_err(old))?;
            let m = manifest_path(old);
            if m.exists() {
                fs::remove_file(&m).map_err(io_err(&m))?;
            }
        }
        Ok(path)
    }
}

struct Fakes {
    made_up: Tensor,
    removed: Tensor,
    i_t: Tensor,
    i_removed: Tensor,
}

struct MicroBatch {
    components: LossComponents,
    loss_g: f64,
    loss_d: f64,
    g_grads: std::collections::BTreeMap<String, Tensor>,
    d_grads: std::collections::BTreeMap<String, Tensor>,
    fakes: Fakes,
}

fn add_into(
    acc: &mut Option<std::collections::BTreeMap<String, Tensor>>,
    g: std::collections::BTreeMap<String, Tensor>,
) {
    match acc {
        Some(a) => {
            for (k, t) in g {
                match a.get_mut(&k) {
                    Some(x) => x.add_assign(&t),
                    None => {
                        a.insert(k, t);
                    }
                }
            }
        }
        None => *acc = Some(g),
    }
}
