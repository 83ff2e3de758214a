//! Reconstruction (L1 + SSIM + perceptual), latent consistency (MSE +
//! symmetric InfoNCE) and the full training objective.
//!
//! Every loss is a mean over elements. The graph builders work on batches;
//! the `*_loss` functions evaluate single pairs in `f64`.

mod perceptual;
mod total;

pub use perceptual::PerceptualExtractor;
pub use total::{total_loss, LossLog, TotalLoss, TrainInputs};

use rand::seq::index::sample;
use rand::Rng;

use crate::codebook::{mean_sq_norm, LatentGrid};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::image::Image;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_in_graph<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// Window used for `h x w` maps: 11, or the largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) { m - 1 } else { m }
}

/// Valid-window Gaussian blur of `[B, 1, H, W]` maps.
fn blur<F: Scalar>(g: &mut Graph<F>, x: Var) -> Var {
    let s = g.shape(x);
    let win = ssim_window(s[2], s[3]);
    let taps: Vec<F> = gaussian_taps(win, SSIM_SIGMA)
        .into_iter()
        .map(F::from_f64)
        .collect();
    let kh = g.constant(Tensor::from_vec(&[1, 1, 1, win], taps.clone()).expect("taps"));
    let kv = g.constant(Tensor::from_vec(&[1, 1, win, 1], taps).expect("taps"));
    let h = g.conv2d(x, kh, None, ConvSpec::valid());
    g.conv2d(h, kv, None, ConvSpec::valid())
}

/// Mean SSIM over all valid 11x11 windows of a `[B, 1, H, W]` batch pair
/// (data range 1). Maps smaller than 11 use [`ssim_window`].
pub fn ssim_in_graph<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let bsz = g.shape(a)[0];
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let stacked = g.concat(&[a, b, aa, bb, ab]);
    let blurred = blur(g, stacked);
    let mu_a = g.slice(blurred, 0, bsz);
    let mu_b = g.slice(blurred, bsz, bsz);
    let e_aa = g.slice(blurred, 2 * bsz, bsz);
    let e_bb = g.slice(blurred, 3 * bsz, bsz);
    let e_ab = g.slice(blurred, 4 * bsz, bsz);

    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, c2);
    let num = g.mul(l_num, c_num);
    let l_den = g.add(mu_aa, mu_bb);
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(var_a, var_b);
    let c_den = g.add_scalar(c_den, c2);
    let den = g.mul(l_den, c_den);
    let map = g.div(num, den);
    g.mean(map)
}

/// Loss components for a batch of reconstructions, each a mean over the
/// batch.
#[derive(Debug, Clone, Copy)]
pub struct RecVars {
    pub l1: Var,
    pub ssim: Var,
    pub per: Var,
    pub total: Var,
}

/// `λ1·L1 + λ2·(1 − SSIM) + λ3·perceptual` for `[B, 1, H, W]` batches.
pub fn rec_in_graph<F: Scalar>(
    g: &mut Graph<F>,
    xhat: Var,
    x: Var,
    w: &LossWeights,
    extractor: &PerceptualExtractor<F>,
) -> RecVars {
    let l1 = l1_in_graph(g, xhat, x);
    let s = ssim_in_graph(g, xhat, x);
    let neg = g.scale(s, -1.0);
    let ssim = g.add_scalar(neg, 1.0);
    let per = extractor.loss_in_graph(g, xhat, x);
    let a = g.scale(l1, w.lambda_l1);
    let b = g.scale(ssim, w.lambda_ssim);
    let c = g.scale(per, w.lambda_per);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    RecVars {
        l1,
        ssim,
        per,
        total,
    }
}

fn pair_graph(a: &Image, b: &Image) -> Result<(Graph<f64>, Var, Var)> {
    a.same_shape(b)?;
    let mut g = Graph::new();
    let av = g.constant(a.to_tensor());
    let bv = g.constant(b.to_tensor());
    Ok((g, av, bv))
}

pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    let (mut g, av, bv) = pair_graph(a, b)?;
    let l = l1_in_graph(&mut g, av, bv);
    Ok(g.value(l).item())
}

fn check_ssim_size(a: &Image) -> Result<()> {
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Mean SSIM of two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim_size(a)?;
    let (mut g, av, bv) = pair_graph(a, b)?;
    let s = ssim_in_graph(&mut g, av, bv);
    Ok(g.value(s).item())
}

/// `1 − SSIM(a, b)`.
pub fn ssim_loss(a: &Image, b: &Image) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

pub fn perceptual_loss(a: &Image, b: &Image, extractor: &PerceptualExtractor<f64>) -> Result<f64> {
    let (mut g, av, bv) = pair_graph(a, b)?;
    let l = extractor.loss_in_graph(&mut g, av, bv);
    Ok(g.value(l).item())
}

/// Reconstruction loss and its unweighted components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecComponents {
    pub l1: f64,
    pub ssim: f64,
    pub per: f64,
    pub total: f64,
}

impl RecComponents {
    pub fn combine(l1: f64, ssim: f64, per: f64, w: &LossWeights) -> Self {
        Self {
            l1,
            ssim,
            per,
            total: w.lambda_l1 * l1 + w.lambda_ssim * ssim + w.lambda_per * per,
        }
    }
}

pub fn rec_loss(
    xhat: &Image,
    x: &Image,
    w: &LossWeights,
    extractor: &PerceptualExtractor<f64>,
) -> Result<RecComponents> {
    Ok(RecComponents::combine(
        l1_loss(xhat, x)?,
        ssim_loss(xhat, x)?,
        perceptual_loss(xhat, x, extractor)?,
        w,
    ))
}

/// Handles for the two consistency terms of one latent pair.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyVars {
    pub mse: Var,
    /// `None` when fewer than two foreground anchors exist.
    pub nce: Option<Var>,
}

/// Foreground anchor positions, subsampled to at most `max_anchors` with
/// `rng` (kept in ascending order).
pub fn select_anchors<R: Rng + ?Sized>(mask: &[bool], max_anchors: usize, rng: &mut R) -> Vec<usize> {
    let fg: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    if fg.len() <= max_anchors {
        return fg;
    }
    let mut picked: Vec<usize> = sample(rng, fg.len(), max_anchors)
        .into_iter()
        .map(|i| fg[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Symmetric InfoNCE over the anchor rows of two `[P, D]` latents.
pub fn info_nce_in_graph<F: Scalar>(
    g: &mut Graph<F>,
    z1: Var,
    z2: Var,
    anchors: &[usize],
    tau: f64,
) -> Var {
    let a = g.gather_rows(z1, anchors);
    let b = g.gather_rows(z2, anchors);
    let a = g.normalize_rows(a, 0.0);
    let b = g.normalize_rows(b, 0.0);
    let logits = g.matmul_nt(a, b);
    let logits = g.scale(logits, 1.0 / tau);
    let logits_t = g.transpose(logits);
    let fwd = g.log_softmax_rows(logits);
    let bwd = g.log_softmax_rows(logits_t);
    let fwd = g.diag(fwd);
    let bwd = g.diag(bwd);
    let fwd = g.mean(fwd);
    let bwd = g.mean(bwd);
    let s = g.add(fwd, bwd);
    g.scale(s, -1.0)
}

/// `|sg[z1] − z2|² + |sg[z2] − z1|²` (mean over positions) plus the
/// contrastive term over `anchors`.
pub fn consistency_in_graph<F: Scalar>(
    g: &mut Graph<F>,
    z1: Var,
    z2: Var,
    anchors: &[usize],
    tau: f64,
) -> ConsistencyVars {
    let z1_sg = g.detach(z1);
    let z2_sg = g.detach(z2);
    let a = mean_sq_norm(g, z1_sg, z2);
    let b = mean_sq_norm(g, z2_sg, z1);
    let mse = g.add(a, b);
    let nce = (anchors.len() >= 2).then(|| info_nce_in_graph(g, z1, z2, anchors, tau));
    ConsistencyVars { mse, nce }
}

/// Evaluated consistency loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyValue {
    pub mse: f64,
    pub nce: Option<f64>,
}

impl ConsistencyValue {
    pub fn total(&self) -> f64 {
        self.mse + self.nce.unwrap_or(0.0)
    }
}

/// Consistency loss between two latent grids with a latent-resolution
/// foreground mask. All masked positions are used as anchors.
pub fn consistency_loss<F: Scalar>(
    z1: &LatentGrid<F>,
    z2: &LatentGrid<F>,
    mask: &[bool],
    tau: f64,
) -> Result<ConsistencyValue> {
    if (z1.height(), z1.width(), z1.dim()) != (z2.height(), z2.width(), z2.dim()) {
        return Err(Error::Shape("consistency: latent grids differ in shape".into()));
    }
    if mask.len() != z1.positions() {
        return Err(Error::Shape(format!(
            "consistency: mask has {} entries for {} positions",
            mask.len(),
            z1.positions()
        )));
    }
    let shape = [z1.positions(), z1.dim()];
    let to64 = |z: &LatentGrid<F>| z.values().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(&shape, to64(z1))?);
    let b = g.constant(Tensor::from_vec(&shape, to64(z2))?);
    let anchors: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    let c = consistency_in_graph(&mut g, a, b, &anchors, tau);
    Ok(ConsistencyValue {
        mse: g.value(c.mse).item(),
        nce: c.nce.map(|v| g.value(v).item()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn l1_identities() {
        let a = random_image(1, 16, 16);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let zero = Image::filled(16, 16, 0.0);
        let one = Image::filled(16, 16, 1.0);
        assert_eq!(l1_loss(&zero, &one).unwrap(), 1.0);
        assert!(l1_loss(&zero, &Image::filled(8, 16, 0.0)).is_err());
    }

    #[test]
    fn l1_matches_direct_sum() {
        let a = random_image(2, 16, 12);
        let b = random_image(3, 16, 12);
        let direct: f64 = a
            .pixels()
            .iter()
            .zip(b.pixels())
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .sum::<f64>()
            / (16.0 * 12.0);
        assert!((l1_loss(&a, &b).unwrap() - direct).abs() < 1e-7);
    }

    #[test]
    fn gaussian_taps_are_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn ssim_identity_and_size_guard() {
        let a = random_image(4, 16, 16);
        assert!(ssim_loss(&a, &a).unwrap().abs() < 1e-12);
        let small = random_image(5, 10, 16);
        assert!(matches!(ssim(&small, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_of_constants_is_the_luminance_term() {
        let (ma, mb) = (0.3f32, 0.7f32);
        let a = Image::filled(16, 16, ma);
        let b = Image::filled(16, 16, mb);
        let (ma, mb) = (ma as f64, mb as f64);
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let px = (0..32 * 32)
            .map(|i| if ((i / 32) / 4 + (i % 32) / 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let a = Image::new(32, 32, px).unwrap();
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim_loss(&a, &inv).unwrap() > 1.0);
    }

    #[test]
    fn rec_loss_weights() {
        let w = LossWeights::default();
        let c = RecComponents::combine(0.1, 0.2, 0.3, &w);
        assert!((c.total - 1.23).abs() < 1e-12);
        let ex = PerceptualExtractor::<f64>::fixed();
        let a = random_image(6, 16, 16);
        assert_eq!(rec_loss(&a, &a, &w, &ex).unwrap().total, 0.0);
    }

    fn grid(values: Vec<f64>, positions: usize, d: usize) -> LatentGrid<f64> {
        LatentGrid::continuous(1, positions, d, values).unwrap()
    }

    #[test]
    fn consistency_orthogonal_closed_form() {
        let tau = 0.07;
        let z = grid(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let c = consistency_loss(&z, &z, &[true, true], tau).unwrap();
        assert_eq!(c.mse, 0.0);
        let e = (1.0f64 / tau).exp();
        let expected = 2.0 * -(e / (e + 1.0)).ln();
        assert!((c.nce.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn consistency_skips_contrastive_with_one_anchor() {
        let z1 = grid(vec![1.0, 0.0, 0.5, 0.5], 2, 2);
        let z2 = grid(vec![0.0, 1.0, 0.5, 0.5], 2, 2);
        let c = consistency_loss(&z1, &z2, &[true, false], 0.07).unwrap();
        assert!(c.nce.is_none());
        // 2 * mean_p |z1 - z2|² = 2 * (2 / 2)
        assert!((c.mse - 2.0).abs() < 1e-12);
    }

    #[test]
    fn anchors_are_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = vec![true; 1000];
        let a = select_anchors(&mask, 256, &mut rng);
        assert_eq!(a.len(), 256);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let mask = [true, false, true];
        assert_eq!(select_anchors(&mask, 256, &mut rng), vec![0, 2]);
    }

    #[test]
    fn mse_term_routes_gradient_through_the_non_detached_side() {
        let mut g = Graph::<f64>::new();
        let z1 = g.param(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let z2 = g.param(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let c = consistency_in_graph(&mut g, z1, z2, &[0], 0.07);
        let grads = g.backward(c.mse);
        // Only |sg[z2] - z1|² reaches z1: d/dz1 = 2 (z1 - z2).
        assert_eq!(grads.get(z1).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(grads.get(z2).unwrap().data(), &[-2.0, -4.0]);
    }
}
