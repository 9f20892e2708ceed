use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uvmakeup_tensor::{ParamStore, Tape, Tensor, Var};

/// A frozen feature map used by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    /// Records the features of a `[3, H, W]` input on `tape`. Extractor
    /// weights are bound as constants.
    fn features_on_tape(&self, tape: &mut Tape, x: Var) -> Var;

    fn features(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = self.features_on_tape(&mut tape, v);
        tape.value(f).clone()
    }
}

/// Seeded random ReLU convolution stack with three stride-2 stages and a
/// final 1×1 projection: 512 channels at 1/8 resolution.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    params: ParamStore,
}

const STAGES: [(&str, usize, usize, usize, usize); 4] = [
    ("c1", 3, 64, 3, 2),
    ("c2", 64, 128, 3, 2),
    ("c3", 128, 256, 3, 2),
    ("c4", 256, 512, 1, 1),
];

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, cin, cout, k, _) in STAGES {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let w = (0..cout * cin * k * k)
                .map(|_| normal.sample(&mut rng))
                .collect();
            params.insert(
                format!("{name}.w"),
                Tensor::new(&[cout, cin, k, k], w).unwrap(),
            );
            params.insert(format!("{name}.b"), Tensor::full(&[cout], 0.01));
        }
        Self { params }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0x5eed)
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features_on_tape(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for (name, _, _, k, stride) in STAGES {
            let w = tape.param(&self.params, &format!("{name}.w"), false);
            let b = tape.param(&self.params, &format!("{name}.b"), false);
            let y = tape.conv2d(h, w, Some(b), stride, k / 2);
            h = tape.relu(y);
        }
        h
    }
}

/// Mean squared feature distance.
pub fn perceptual_loss_on_tape(
    tape: &mut Tape,
    extractor: &dyn FeatureExtractor,
    a: Var,
    b: Var,
) -> Var {
    let fa = extractor.features_on_tape(tape, a);
    let fb = extractor.features_on_tape(tape, b);
    let d = tape.sub(fa, fb);
    let sq = tape.square(d);
    tape.mean(sq)
}

pub fn perceptual_loss(a: &Tensor, b: &Tensor, extractor: &dyn FeatureExtractor) -> f64 {
    let (fa, fb) = (extractor.features(a), extractor.features(b));
    fa.data()
        .iter()
        .zip(fb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / fa.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn texture(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[3, 32, 32],
            (0..3 * 1024).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tap_shape_matches_interface() {
        let f = RandomConvExtractor::default().features(&texture(0));
        assert_eq!(f.shape(), &[512, 4, 4]);
    }

    #[test]
    fn equal_inputs_give_zero_and_loss_is_symmetric() {
        let e = RandomConvExtractor::default();
        let (a, b) = (texture(1), texture(2));
        assert_eq!(perceptual_loss(&a, &a, &e), 0.0);
        assert_eq!(perceptual_loss(&a, &b, &e), perceptual_loss(&b, &a, &e));
        assert!(perceptual_loss(&a, &b, &e) > 0.0);
    }

    #[test]
    fn loss_grows_along_a_path_away_from_the_source() {
        let e = RandomConvExtractor::default();
        let (src, other) = (texture(3), texture(4));
        let mut last = 0.0;
        for step in 1..=5 {
            let t = step as f64 / 5.0;
            let mix = src.zip_map(&other, |a, b| (1.0 - t) * a + t * b).unwrap();
            let l = perceptual_loss(&mix, &src, &e);
            assert!(l > last, "step {step}: {l} ≤ {last}");
            last = l;
        }
    }

    #[test]
    fn tape_and_direct_agree() {
        let e = RandomConvExtractor::default();
        let (a, b) = (texture(5), texture(6));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let l = perceptual_loss_on_tape(&mut tape, &e, va, vb);
        assert!((tape.value(l).item() - perceptual_loss(&a, &b, &e)).abs() < 1e-12);
    }
}
