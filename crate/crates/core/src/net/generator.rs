use uvmakeup_tensor::{gemm, ParamStore, Tape, Tensor, Var};

use super::NetConfig;
use crate::error::{contract, Error, Result};
use crate::uv::regions::{downsample_mask, upsample_nearest};
use crate::uv::UvTexture;

/// How the flip-attention module produces its confidence mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FamMode {
    Learned,
    /// Bypass: the repaired feature is the reference feature itself.
    Off,
    /// A constant mask value, for probing the blend limits.
    Forced(f64),
}

/// Second reference for makeup interpolation; `weight` goes to the first.
#[derive(Clone, Debug)]
pub struct Interpolation {
    pub reference: Tensor,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct TransferConfig {
    /// Shade weight applied to the transferred makeup feature.
    pub shade: f64,
    /// Optional `[1, R, R]` UV mask restricting where makeup is transferred.
    pub region: Option<Tensor>,
    pub fam: FamMode,
    pub mtm_off: bool,
    pub interpolation: Option<Interpolation>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            shade: 1.0,
            region: None,
            fam: FamMode::Learned,
            mtm_off: false,
            interpolation: None,
        }
    }
}

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(contract(format!("{name} must lie in [0, 1], got {w}")));
    }
    Ok(())
}

struct Binder<'a> {
    params: &'a ParamStore,
    trainable: bool,
    slope: f64,
}

impl Binder<'_> {
    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let w = tape.param(self.params, &format!("{name}.w"), self.trainable);
        let b = tape.param(self.params, &format!("{name}.b"), self.trainable);
        tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_act(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize) -> Var {
        let y = self.conv(tape, x, name, stride, pad);
        tape.leaky_relu(y, self.slope)
    }

    fn encode(&self, tape: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.conv_act(tape, x, &format!("g.{prefix}.c1"), 2, 1);
        self.conv_act(tape, h, &format!("g.{prefix}.c2"), 2, 1)
    }

    /// `F̂ = M ⊗ F + (1 − M) ⊗ flip(F)`.
    fn fam(&self, tape: &mut Tape, f: Var, mode: FamMode) -> Result<(Var, Var)> {
        let (_, h, w) = tape.value(f).dims3()?;
        if w % 2 != 0 {
            return Err(contract(format!(
                "flip attention needs an even feature width, got {w}"
            )));
        }
        let mask = match mode {
            FamMode::Learned => {
                let hidden = self.conv_act(tape, f, "g.fam.c1", 1, 1);
                let logits = self.conv(tape, hidden, "g.fam.c2", 1, 1);
                tape.sigmoid(logits)
            }
            FamMode::Forced(m) => tape.constant(Tensor::full(&[1, h, w], m)),
            FamMode::Off => {
                let ones = tape.constant(Tensor::full(&[1, h, w], 1.0));
                return Ok((f, ones));
            }
        };
        let flipped = tape.flip_w(f);
        let kept = tape.mul_broadcast(f, mask);
        let inverse = tape.one_minus(mask);
        let borrowed = tape.mul_broadcast(flipped, inverse);
        Ok((tape.add(kept, borrowed), mask))
    }

    /// Row-softmax attention from the source feature, `[N, N]` with
    /// `N = h·w`.
    fn attention(&self, tape: &mut Tape, f_src: Var) -> Result<Var> {
        let (_, h, w) = tape.value(f_src).dims3()?;
        let p = self.conv(tape, f_src, "g.mtm.p", 1, 0);
        let q = self.conv(tape, f_src, "g.mtm.q", 1, 0);
        let c8 = tape.value(p).shape()[0];
        let p = tape.reshape(p, &[c8, h * w]);
        let q = tape.reshape(q, &[c8, h * w]);
        let pt = tape.transpose(p);
        let logits = tape.matmul(pt, q);
        Ok(tape.softmax_rows(logits))
    }
}

/// `F_a ⊗ F̂`: every output position is the attention-weighted average of
/// the feature over all positions.
fn attend(tape: &mut Tape, attention: Var, f_hat: Var) -> Result<Var> {
    let (c, h, w) = tape.value(f_hat).dims3()?;
    let flat = tape.reshape(f_hat, &[c, h * w]);
    let at = tape.transpose(attention);
    let mixed = tape.matmul(flat, at);
    Ok(tape.reshape(mixed, &[c, h, w]))
}

/// Every intermediate of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GenNodes {
    pub output: Var,
    pub f_src: Var,
    pub f_ref: Var,
    pub f_hat: Var,
    /// FAM mask at feature resolution (all ones when FAM is off).
    pub mask: Var,
    pub attention: Option<Var>,
    pub f_m: Var,
}

/// Records `G(src, reference)` on `tape`. With `trainable`, every generator
/// parameter is bound as a trainable leaf.
pub fn generator_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    net: &NetConfig,
    trainable: bool,
    src: Var,
    reference: Var,
    cfg: &TransferConfig,
) -> Result<GenNodes> {
    check_weight("shade weight", cfg.shade)?;
    let src_shape = tape.value(src).shape().to_vec();
    if tape.value(reference).shape() != src_shape.as_slice() {
        return Err(Error::DimensionMismatch {
            axis: "reference texture resolution",
            expected: src_shape.get(1).copied().unwrap_or(0),
            actual: tape.value(reference).shape().get(1).copied().unwrap_or(0),
        });
    }
    let (c, r, rw) = tape.value(src).dims3()?;
    if c != 3 || r != rw || r % 4 != 0 {
        return Err(contract(format!(
            "generator input must be [3, R, R] with R divisible by 4, got {src_shape:?}"
        )));
    }
    let b = Binder {
        params,
        trainable,
        slope: net.leaky_slope,
    };
    let f_src = b.encode(tape, src, "enc_src");
    let f_ref = b.encode(tape, reference, "enc_ref");
    let (f_hat, mask) = b.fam(tape, f_ref, cfg.fam)?;

    let (mut f_m, attention) = if cfg.mtm_off {
        (f_hat, None)
    } else {
        let a = b.attention(tape, f_src)?;
        let mixed = attend(tape, a, f_hat)?;
        (mixed, Some(a))
    };
    if let Some(interp) = &cfg.interpolation {
        check_weight("interpolation weight", interp.weight)?;
        if interp.reference.shape() != src_shape.as_slice() {
            return Err(contract(
                "interpolation reference resolution differs from source",
            ));
        }
        let ref2 = tape.constant(interp.reference.clone());
        let f_ref2 = b.encode(tape, ref2, "enc_ref");
        let (f_hat2, _) = b.fam(tape, f_ref2, cfg.fam)?;
        let second = match attention {
            Some(a) => attend(tape, a, f_hat2)?,
            None => f_hat2,
        };
        let first = tape.scale(f_m, interp.weight);
        let second = tape.scale(second, 1.0 - interp.weight);
        f_m = tape.add(first, second);
    }
    f_m = tape.scale(f_m, cfg.shade);
    if let Some(region) = &cfg.region {
        if region.shape() != [1, r, r] {
            return Err(contract(format!(
                "region mask must be [1, {r}, {r}], got {:?}",
                region.shape()
            )));
        }
        let pooled = tape.constant(downsample_mask(region, 4)?);
        f_m = tape.mul_broadcast(f_m, pooled);
    }

    let joined = tape.concat(&[f_src, f_m]);
    let mut x = b.conv_act(tape, joined, "g.bott.in", 1, 1);
    for i in 0..net.res_blocks {
        let h = b.conv_act(tape, x, &format!("g.bott.res{i}.c1"), 1, 1);
        let h = b.conv(tape, h, &format!("g.bott.res{i}.c2"), 1, 1);
        x = tape.add(x, h);
    }
    let x = tape.upsample2(x);
    let x = b.conv_act(tape, x, "g.dec.up1", 1, 1);
    let x = tape.upsample2(x);
    let x = b.conv_act(tape, x, "g.dec.up2", 1, 1);
    let logits = b.conv(tape, x, "g.dec.out", 1, 1);
    let total = if net.source_skip {
        // residual in logit space around the source texture
        let clamped = tape.clamp(src, 0.01, 0.99);
        let log_p = tape.log(clamped);
        let complement = tape.one_minus(clamped);
        let log_q = tape.log(complement);
        let skip = tape.sub(log_p, log_q);
        tape.add(logits, skip)
    } else {
        logits
    };
    let output = tape.sigmoid(total);
    Ok(GenNodes {
        output,
        f_src,
        f_ref,
        f_hat,
        mask,
        attention,
        f_m,
    })
}

/// Inference result of the generator.
#[derive(Clone, Debug)]
pub struct Generated {
    pub texture: UvTexture,
    /// FAM mask upsampled to UV resolution, `[1, R, R]`.
    pub mask: Tensor,
    /// Attention map `[N, N]`, absent when MTM is off.
    pub attention: Option<Tensor>,
}

/// `T_t = G(T_src, T_ref)` on frozen parameters. With a region mask, the
/// output outside the region is taken from the zero-makeup pass, so texels
/// away from the region do not see makeup leaking through the decoder's
/// receptive field.
pub fn generate(
    src: &Tensor,
    reference: &Tensor,
    params: &ParamStore,
    net: &NetConfig,
    cfg: &TransferConfig,
) -> Result<Generated> {
    let mut tape = Tape::new();
    let s = tape.constant(src.clone());
    let r = tape.constant(reference.clone());
    let nodes = generator_on_tape(&mut tape, params, net, false, s, r, cfg)?;
    let mut out = tape.value(nodes.output).clone();
    if let Some(region) = &cfg.region {
        let baseline_cfg = TransferConfig {
            shade: 0.0,
            region: None,
            interpolation: None,
            ..cfg.clone()
        };
        let base_nodes = generator_on_tape(&mut tape, params, net, false, s, r, &baseline_cfg)?;
        let base = tape.value(base_nodes.output);
        let plane = region.numel();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let m = region.data()[i % plane];
            *v = m * *v + (1.0 - m) * base.data()[i];
        }
    }
    let mask = upsample_nearest(tape.value(nodes.mask), 4)?;
    Ok(Generated {
        texture: UvTexture::from_pixels(out)?,
        mask,
        attention: nodes.attention.map(|a| tape.value(a).clone()),
    })
}

fn run_encoder(
    params: &ParamStore,
    net: &NetConfig,
    texture: &Tensor,
    prefix: &str,
) -> Result<Tensor> {
    let (c, h, w) = texture.dims3()?;
    if c != 3 || h % 4 != 0 || w % 4 != 0 {
        return Err(contract(format!(
            "encoder input must be [3, H, W] with sides divisible by 4, got {:?}",
            texture.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(texture.clone());
    let b = Binder {
        params,
        trainable: false,
        slope: net.leaky_slope,
    };
    let f = b.encode(&mut tape, x, prefix);
    Ok(tape.value(f).clone())
}

pub fn encode_source(texture: &Tensor, params: &ParamStore, net: &NetConfig) -> Result<Tensor> {
    run_encoder(params, net, texture, "enc_src")
}

pub fn encode_reference(texture: &Tensor, params: &ParamStore, net: &NetConfig) -> Result<Tensor> {
    run_encoder(params, net, texture, "enc_ref")
}

/// Returns `(F̂_ref, M)`.
pub fn fam_repair(
    f_ref: &Tensor,
    params: &ParamStore,
    net: &NetConfig,
    mode: FamMode,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.constant(f_ref.clone());
    let b = Binder {
        params,
        trainable: false,
        slope: net.leaky_slope,
    };
    let (f_hat, mask) = b.fam(&mut tape, f, mode)?;
    Ok((tape.value(f_hat).clone(), tape.value(mask).clone()))
}

/// Returns `(F_m, F_a)` with `F_m = w · F_a ⊗ F̂_ref`, optionally restricted
/// to a `[1, h, w]` feature-resolution region mask.
pub fn mtm_transfer(
    f_src: &Tensor,
    f_hat: &Tensor,
    params: &ParamStore,
    net: &NetConfig,
    w: f64,
    region: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    check_weight("shade weight", w)?;
    f_src.check_same(f_hat)?;
    let mut tape = Tape::new();
    let s = tape.constant(f_src.clone());
    let h = tape.constant(f_hat.clone());
    let b = Binder {
        params,
        trainable: false,
        slope: net.leaky_slope,
    };
    let a = b.attention(&mut tape, s)?;
    let mixed = attend(&mut tape, a, h)?;
    let mut f_m = tape.scale(mixed, w);
    if let Some(region) = region {
        let m = tape.constant(region.clone());
        f_m = tape.mul_broadcast(f_m, m);
    }
    Ok((tape.value(f_m).clone(), tape.value(a).clone()))
}

/// `w · F_a ⊗ F̂₁ + (1 − w) · F_a ⊗ F̂₂`.
pub fn interpolate_makeup(
    attention: &Tensor,
    f_hat1: &Tensor,
    f_hat2: &Tensor,
    w: f64,
) -> Result<Tensor> {
    check_weight("interpolation weight", w)?;
    f_hat1.check_same(f_hat2)?;
    let (c, h, wd) = f_hat1.dims3()?;
    let n = h * wd;
    if attention.shape() != [n, n] {
        return Err(contract(format!(
            "attention must be [{n}, {n}], got {:?}",
            attention.shape()
        )));
    }
    let apply = |f: &Tensor| {
        let mut out = vec![0.0; c * n];
        gemm(
            c,
            n,
            n,
            f.data(),
            false,
            attention.data(),
            true,
            &mut out,
            0.0,
        );
        out
    };
    let (a, b) = (apply(f_hat1), apply(f_hat2));
    let data = a
        .iter()
        .zip(&b)
        .map(|(x, y)| w * x + (1.0 - w) * y)
        .collect();
    Ok(Tensor::new(&[c, h, wd], data)?)
}
