//! The UV texture generator and the three patch discriminators.
//!
//! Parameters live in a [`ParamStore`] under fixed names: `g.*` for the
//! generator and `d_tex_s.*`, `d_tex_r.*`, `d_img.*` for the discriminators.
//! Convolution weights are `[C_out, C_in, k, k]` with a bias `[C_out]`.

mod discriminator;
mod generator;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use uvmakeup_tensor::{ParamStore, Tensor};

use crate::error::{contract, Result};

pub use discriminator::{discriminate, discriminator_on_tape, Discriminator};
pub use generator::{
    encode_reference, encode_source, fam_repair, generate, generator_on_tape, interpolate_makeup,
    mtm_transfer, FamMode, GenNodes, Generated, Interpolation, TransferConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub feature_channels: usize,
    pub res_blocks: usize,
    pub disc_channels: usize,
    pub leaky_slope: f64,
    /// Add the decoder output to the source texture in logit space instead
    /// of decoding the texture directly.
    pub source_skip: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            res_blocks: 3,
            disc_channels: 32,
            leaky_slope: 0.2,
            source_skip: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 8 || self.feature_channels % 8 != 0 {
            return Err(contract(format!(
                "feature_channels must be a positive multiple of 8, got {}",
                self.feature_channels
            )));
        }
        if self.disc_channels == 0 {
            return Err(contract("disc_channels must be positive"));
        }
        Ok(())
    }

    /// Shapes of every generator parameter.
    pub fn generator_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.feature_channels;
        let mut out = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            out.push((format!("g.{name}.w"), vec![o, i, k, k]));
            out.push((format!("g.{name}.b"), vec![o]));
        };
        for enc in ["enc_src", "enc_ref"] {
            conv(&format!("{enc}.c1"), c / 2, 3, 4);
            conv(&format!("{enc}.c2"), c, c / 2, 4);
        }
        conv("fam.c1", c / 2, c, 3);
        conv("fam.c2", 1, c / 2, 3);
        conv("mtm.p", c / 8, c, 1);
        conv("mtm.q", c / 8, c, 1);
        conv("bott.in", c, 2 * c, 3);
        for b in 0..self.res_blocks {
            conv(&format!("bott.res{b}.c1"), c, c, 3);
            conv(&format!("bott.res{b}.c2"), c, c, 3);
        }
        conv("dec.up1", c / 2, c, 3);
        conv("dec.up2", c / 4, c / 2, 3);
        conv("dec.out", 3, c / 4, 3);
        out
    }

    /// Shapes of one discriminator's parameters under `prefix`.
    pub fn discriminator_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let d = self.disc_channels;
        let mut out = Vec::new();
        for (name, o, i, k) in [("c1", d, 3, 4), ("c2", 2 * d, d, 4), ("out", 1, 2 * d, 3)] {
            out.push((format!("{prefix}.{name}.w"), vec![o, i, k, k]));
            out.push((format!("{prefix}.{name}.b"), vec![o]));
        }
        out
    }
}

/// Names of the three discriminators.
pub const DISCRIMINATORS: [&str; 3] = ["d_tex_s", "d_tex_r", "d_img"];

/// He-normal weights and zero biases, with two exceptions: the FAM output
/// layer starts near zero so that `M ≈ 0.5`, and the decoder output layer
/// starts near zero so that the untrained output is mid-gray, or the source
/// texture itself with `source_skip`.
fn init_store(shapes: Vec<(String, Vec<usize>)>, rng: &mut ChaCha8Rng) -> ParamStore {
    shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let tensor = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let mut std = (2.0 / fan_in as f64).sqrt();
                if name.starts_with("g.fam.c2") || name.starts_with("g.dec.out") {
                    std *= 1e-2;
                }
                let normal = Normal::new(0.0, std).unwrap();
                Tensor::new(&shape, (0..n).map(|_| normal.sample(rng)).collect()).unwrap()
            };
            (name, tensor)
        })
        .collect()
}

pub fn init_generator(cfg: &NetConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_store(cfg.generator_shapes(), &mut rng)
}

pub fn init_discriminators(cfg: &NetConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let shapes = DISCRIMINATORS
        .iter()
        .flat_map(|p| cfg.discriminator_shapes(p))
        .collect();
    init_store(shapes, &mut rng)
}

/// Averages every kernel with its left-right mirror, for the parameters
/// whose names start with `prefix`. Convolutions with such kernels commute
/// with a horizontal flip when their padding is symmetric.
pub fn symmetrize_kernels(store: &mut ParamStore, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if !name.starts_with(prefix) || !name.ends_with(".w") {
            continue;
        }
        let k = t.shape()[3];
        for row in t.data_mut().chunks_mut(k) {
            for x in 0..k / 2 {
                let avg = 0.5 * (row[x] + row[k - 1 - x]);
                row[x] = avg;
                row[k - 1 - x] = avg;
            }
        }
    }
}

/// Sets every bias under `prefix` to zero.
pub fn zero_biases(store: &mut ParamStore, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) && name.ends_with(".b") {
            t.data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = NetConfig::default();
        let g = init_generator(&cfg, 3);
        assert_eq!(g, init_generator(&cfg, 3));
        assert_ne!(g, init_generator(&cfg, 4));
        assert_eq!(g.len(), cfg.generator_shapes().len());
        let d = init_discriminators(&cfg, 3);
        assert_eq!(d.len(), 18);
        assert!(g.names().all(|n| n.starts_with("g.")));
    }

    #[test]
    fn encoders_do_not_share_values() {
        let g = init_generator(&NetConfig::default(), 0);
        assert_eq!(
            g.expect("g.enc_src.c1.w").shape(),
            g.expect("g.enc_ref.c1.w").shape()
        );
        assert_ne!(g.expect("g.enc_src.c1.w"), g.expect("g.enc_ref.c1.w"));
    }

    #[test]
    fn symmetrized_kernels_are_mirror_symmetric() {
        let mut g = init_generator(&NetConfig::default(), 0);
        symmetrize_kernels(&mut g, "g.enc_src");
        let w = g.expect("g.enc_src.c2.w");
        assert_eq!(w, &w.flip_last());
        assert_ne!(
            g.expect("g.enc_ref.c2.w"),
            &g.expect("g.enc_ref.c2.w").flip_last()
        );
    }

    #[test]
    fn bad_channel_counts_are_rejected() {
        let cfg = NetConfig {
            feature_channels: 12,
            ..NetConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
