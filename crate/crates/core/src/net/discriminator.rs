use uvmakeup_tensor::{ParamStore, Tape, Tensor, Var};

use super::NetConfig;
use crate::error::{contract, Result};

/// Which of the three discriminators to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discriminator {
    /// Texture domain discriminator for source-style (non-makeup) textures.
    TextureS,
    /// Texture domain discriminator for reference-style (makeup) textures.
    TextureR,
    /// Real/fake discriminator on rendered images.
    Image,
}

impl Discriminator {
    pub fn prefix(self) -> &'static str {
        match self {
            Discriminator::TextureS => "d_tex_s",
            Discriminator::TextureR => "d_tex_r",
            Discriminator::Image => "d_img",
        }
    }
}

/// Patch scores in `(0, 1)`: two stride-2 4×4 convolutions with leaky ReLU,
/// then a 3×3 convolution to one channel and a sigmoid. A `[3, H, W]` input
/// gives an `[1, H/4, W/4]` score map.
pub fn discriminator_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    net: &NetConfig,
    which: Discriminator,
    trainable: bool,
    x: Var,
) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3()?;
    if c != 3 || h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
        return Err(contract(format!(
            "discriminator input must be [3, H, W] with H, W ≥ 16 and divisible by 4, got {:?}",
            tape.value(x).shape()
        )));
    }
    let prefix = which.prefix();
    let conv = |tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize| {
        let wv = tape.param(params, &format!("{prefix}.{name}.w"), trainable);
        let bv = tape.param(params, &format!("{prefix}.{name}.b"), trainable);
        tape.conv2d(x, wv, Some(bv), stride, pad)
    };
    let h1 = conv(tape, x, "c1", 2, 1);
    let h1 = tape.leaky_relu(h1, net.leaky_slope);
    let h2 = conv(tape, h1, "c2", 2, 1);
    let h2 = tape.leaky_relu(h2, net.leaky_slope);
    let logits = conv(tape, h2, "out", 1, 1);
    Ok(tape.sigmoid(logits))
}

pub fn discriminate(
    input: &Tensor,
    which: Discriminator,
    params: &ParamStore,
    net: &NetConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let s = discriminator_on_tape(&mut tape, params, net, which, false, x)?;
    Ok(tape.value(s).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_discriminators;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[3, 32, 32],
            (0..3 * 1024).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn scores_are_probabilities_on_a_patch_grid() {
        let net = NetConfig::default();
        let p = init_discriminators(&net, 0);
        for which in [
            Discriminator::TextureS,
            Discriminator::TextureR,
            Discriminator::Image,
        ] {
            let s = discriminate(&rand_image(1), which, &p, &net).unwrap();
            assert_eq!(s.shape(), &[1, 8, 8]);
            assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(discriminate(&Tensor::zeros(&[3, 8, 8]), Discriminator::Image, &p, &net).is_err());
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let net = NetConfig::default();
        let p = init_discriminators(&net, 0);
        let s = discriminate(
            &Tensor::full(&[3, 64, 64], 0.4),
            Discriminator::Image,
            &p,
            &net,
        )
        .unwrap();
        let interior: Vec<f64> = (2..14)
            .flat_map(|y| (2..14).map(move |x| (y, x)))
            .map(|(y, x)| s.data()[y * 16 + x])
            .collect();
        for v in &interior {
            assert!((v - interior[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = NetConfig::default();
        let p = init_discriminators(&net, 4);
        let img = rand_image(9);
        let mut tape = Tape::new();
        let x = tape.leaf(img.clone());
        let s =
            discriminator_on_tape(&mut tape, &p, &net, Discriminator::TextureR, false, x).unwrap();
        let m = tape.mean(s);
        let g = tape.backward(m).get(x).unwrap().clone();
        let f = |t: &Tensor| {
            discriminate(t, Discriminator::TextureR, &p, &net)
                .unwrap()
                .mean()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let i = rng.random_range(0..img.numel());
            let h = 1e-5;
            let (mut a, mut b) = (img.clone(), img.clone());
            a.data_mut()[i] += h;
            b.data_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-3, "coordinate {i}: {fd} vs {}", g.data()[i]);
        }
    }
}
