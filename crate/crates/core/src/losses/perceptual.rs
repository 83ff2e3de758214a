use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Params};
use crate::tensor::Scalar;

const STAGES: [(usize, usize, usize); 3] = [(1, 8, 1), (8, 16, 2), (16, 32, 2)];
const FIXED_SEED: u64 = 0x5EED_F00D;
const NORM_EPS: f64 = 1e-10;

/// Frozen, seed-fixed convolutional feature pyramid standing in for a
/// pre-trained network. Its weights are graph constants and never trained.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<F> {
    params: Params<F>,
    convs: Vec<Conv2d>,
}

impl<F: Scalar> PerceptualExtractor<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::default();
        let convs = STAGES
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Conv2d::new(&mut params, &mut rng, &format!("per.stage{i}"), cin, cout, 3, stride)
            })
            .collect();
        Self { params, convs }
    }

    /// The extractor used by the training objective.
    pub fn fixed() -> Self {
        Self::new(FIXED_SEED)
    }

    /// Per-stage feature maps of a `[B, 1, H, W]` batch.
    pub fn features(&self, g: &mut Graph<F>, x: Var) -> Vec<Var> {
        let p = self.params.bind(g, false);
        let mut h = x;
        self.convs
            .iter()
            .map(|conv| {
                h = conv.forward(g, &p, h);
                h = g.silu(h);
                h
            })
            .collect()
    }

    /// Mean L1 distance of channel-normalised features, summed over stages.
    pub fn loss_in_graph(&self, g: &mut Graph<F>, a: Var, b: Var) -> Var {
        let bsz = g.shape(a)[0];
        let both = g.concat(&[a, b]);
        let feats = self.features(g, both);
        let mut total = None;
        for f in feats {
            let rows = g.to_rows(f);
            let n = g.shape(rows)[0] / 2;
            debug_assert_eq!(n % bsz, 0);
            let rows = g.normalize_rows(rows, NORM_EPS);
            let fa = g.slice(rows, 0, n);
            let fb = g.slice(rows, n, n);
            let d = g.sub(fa, fb);
            let d = g.abs(d);
            let m = g.mean(d);
            total = Some(match total {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        total.expect("extractor has stages")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::losses::perceptual_loss;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn phantom_like(rng: &mut ChaCha8Rng) -> Image {
        let (cy, cx) = (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0));
        let px = (0..32 * 32)
            .map(|i| {
                let (y, x) = ((i / 32) as f64, (i % 32) as f64);
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                if r < 9.0 { 0.3 + 0.05 * r as f32 } else { 0.0 }
            })
            .collect();
        Image::new(32, 32, px).unwrap()
    }

    fn noisy(a: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
        let n = Normal::new(0.0, sigma).unwrap();
        let px = a
            .pixels()
            .iter()
            .map(|&v| (v as f64 + n.sample(rng)) as f32)
            .collect();
        Image::new(a.height(), a.width(), px).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero() {
        let ex = PerceptualExtractor::<f64>::fixed();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = phantom_like(&mut rng);
        assert_eq!(perceptual_loss(&a, &a, &ex).unwrap(), 0.0);
    }

    #[test]
    fn fixed_extractor_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = phantom_like(&mut rng);
        let b = phantom_like(&mut rng);
        let x = perceptual_loss(&a, &b, &PerceptualExtractor::fixed()).unwrap();
        let y = perceptual_loss(&a, &b, &PerceptualExtractor::fixed()).unwrap();
        assert_eq!(x.to_bits(), y.to_bits());
    }

    #[test]
    fn stronger_noise_costs_more_on_average() {
        let ex = PerceptualExtractor::<f64>::fixed();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut lo, mut hi) = (0.0, 0.0);
        for _ in 0..20 {
            let a = phantom_like(&mut rng);
            let weak = noisy(&a, 0.05, &mut rng);
            let strong = noisy(&a, 0.2, &mut rng);
            lo += perceptual_loss(&a, &weak, &ex).unwrap();
            hi += perceptual_loss(&a, &strong, &ex).unwrap();
        }
        assert!(hi > lo, "strong {hi} vs weak {lo}");
    }
}
