//! Common latent space: per-position Gaussian statistics of the quantized
//! latents across a subject's available sequences, reparameterised sampling
//! and the foreground mask used by the consistency loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::codebook::LatentGrid;
use crate::config::ScaleMode;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::{Scalar, Tensor};

/// Pixel intensity above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f32 = 0.01;

/// A subject's images, one optional slot per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    images: Vec<Option<Image>>,
}

impl SequenceSet {
    pub fn new(images: Vec<Option<Image>>) -> Result<Self> {
        let mut present = images.iter().flatten();
        let first = present
            .next()
            .ok_or_else(|| Error::InvalidArgument("sequence set has no available image".into()))?;
        for im in present {
            first.same_shape(im)?;
        }
        Ok(Self { images })
    }

    pub fn num_sequences(&self) -> usize {
        self.images.len()
    }

    pub fn flags(&self) -> Vec<bool> {
        self.images.iter().map(Option::is_some).collect()
    }

    /// Indices of available sequences, ascending.
    pub fn available(&self) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.images[i].is_some()).collect()
    }

    pub fn get(&self, i: usize) -> Option<&Image> {
        self.images.get(i).and_then(Option::as_ref)
    }

    pub fn images(&self) -> &[Option<Image>] {
        &self.images
    }

    /// Shape `(H, W)` shared by all images.
    pub fn image_shape(&self) -> (usize, usize) {
        let im = self.images.iter().flatten().next().expect("non-empty set");
        (im.height(), im.width())
    }
}

/// Per-position mean and sample variance of quantized latents.
#[derive(Debug, Clone, PartialEq)]
pub struct VqcStats {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Mean and sample variance (denominator `count − 1`, zero when
/// `count = 1`) of `latents`.
pub fn estimate_vqc<F: Scalar>(latents: &[&LatentGrid<F>]) -> Result<VqcStats> {
    let first = latents
        .first()
        .ok_or_else(|| Error::InvalidArgument("estimate_vqc: no latents".into()))?;
    let shape = (first.height(), first.width(), first.dim());
    if latents
        .iter()
        .any(|z| (z.height(), z.width(), z.dim()) != shape)
    {
        return Err(Error::Shape("estimate_vqc: latents differ in shape".into()));
    }
    let n = latents.len();
    let len = first.values().len();
    let mut mu = vec![0.0; len];
    for z in latents {
        for (m, v) in mu.iter_mut().zip(z.values()) {
            *m += v.as_f64();
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; len];
    if n > 1 {
        for z in latents {
            for ((s, v), m) in var.iter_mut().zip(z.values()).zip(&mu) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    }
    Ok(VqcStats {
        height: shape.0,
        width: shape.1,
        dim: shape.2,
        mu,
        var,
        count: n,
    })
}

/// `n` standard normal draws.
pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<F> {
    (0..n)
        .map(|_| F::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

fn noise_scale(var: f64, mode: ScaleMode) -> f64 {
    match mode {
        ScaleMode::Variance => var,
        ScaleMode::Std => var.sqrt(),
    }
}

/// `z_s = mu + eps * var` (or `* sqrt(var)` in std mode).
pub fn sample_vqc<R: Rng + ?Sized>(
    stats: &VqcStats,
    rng: &mut R,
    mode: ScaleMode,
) -> Result<LatentGrid<f64>> {
    let eps: Vec<f64> = standard_normal(rng, stats.mu.len());
    let values = stats
        .mu
        .iter()
        .zip(&stats.var)
        .zip(eps)
        .map(|((&m, &v), e)| m + e * noise_scale(v, mode))
        .collect();
    LatentGrid::continuous(stats.height, stats.width, stats.dim, values)
}

/// Graph form of [`estimate_vqc`] over equally shaped latent nodes.
/// Returns `(mu, var)`; `var` is `None` for a single latent.
pub fn stats_in_graph<F: Scalar>(g: &mut Graph<F>, latents: &[Var]) -> (Var, Option<Var>) {
    let n = latents.len();
    assert!(n >= 1);
    let mut sum = latents[0];
    for &z in &latents[1..] {
        sum = g.add(sum, z);
    }
    let mu = g.scale(sum, 1.0 / n as f64);
    if n == 1 {
        return (mu, None);
    }
    let mut acc = None;
    for &z in latents {
        let d = g.sub(z, mu);
        let d = g.square(d);
        acc = Some(match acc {
            Some(a) => g.add(a, d),
            None => d,
        });
    }
    let var = g.scale(acc.expect("n >= 2"), 1.0 / (n - 1) as f64);
    (mu, Some(var))
}

/// Graph form of [`sample_vqc`] with externally drawn `eps`.
pub fn sample_in_graph<F: Scalar>(
    g: &mut Graph<F>,
    mu: Var,
    var: Option<Var>,
    eps: Tensor<F>,
    mode: ScaleMode,
) -> Var {
    let Some(var) = var else { return mu };
    let scale = match mode {
        ScaleMode::Variance => var,
        ScaleMode::Std => g.sqrt(var),
    };
    let e = g.constant(eps);
    let noise = g.mul(e, scale);
    g.add(mu, noise)
}

/// `x > 0.01` max-pooled to an `h x w` grid (row-major).
pub fn foreground_mask(x: &Image, h: usize, w: usize) -> Result<Vec<bool>> {
    if h == 0 || w == 0 || !x.height().is_multiple_of(h) || !x.width().is_multiple_of(w) {
        return Err(Error::Shape(format!(
            "cannot pool a {}x{} image to {h}x{w}",
            x.height(),
            x.width()
        )));
    }
    let (fy, fx) = (x.height() / h, x.width() / w);
    let mut mask = vec![false; h * w];
    for y in 0..x.height() {
        for xx in 0..x.width() {
            if x.get(y, xx) > FOREGROUND_THRESHOLD {
                mask[(y / fy) * w + xx / fx] = true;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(values: Vec<f64>) -> LatentGrid<f64> {
        let n = values.len();
        LatentGrid::continuous(1, 1, n, values).unwrap()
    }

    #[test]
    fn two_latent_hand_example() {
        let (a, b) = (grid(vec![1.0]), grid(vec![3.0]));
        let s = estimate_vqc(&[&a, &b]).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert_eq!(s.var, vec![2.0]);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn identical_and_single_latents_have_zero_variance() {
        let a = grid(vec![0.5, -1.0]);
        assert_eq!(estimate_vqc(&[&a, &a, &a]).unwrap().var, vec![0.0, 0.0]);
        assert_eq!(estimate_vqc(&[&a]).unwrap().var, vec![0.0, 0.0]);
        assert!(estimate_vqc::<f64>(&[]).is_err());
        let b = grid(vec![1.0]);
        assert!(matches!(estimate_vqc(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_variance_sampling_returns_mu() {
        let a = grid(vec![0.25, 0.75]);
        let s = estimate_vqc(&[&a]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for mode in [ScaleMode::Variance, ScaleMode::Std] {
            assert_eq!(sample_vqc(&s, &mut rng, mode).unwrap().values(), a.values());
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = estimate_vqc(&[&grid(vec![0.0, 1.0]), &grid(vec![2.0, -1.0])]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_vqc(&s, &mut rng, ScaleMode::Variance).unwrap()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn foreground_mask_pools_by_max() {
        assert!(foreground_mask(&Image::filled(8, 8, 0.0), 2, 2)
            .unwrap()
            .iter()
            .all(|&m| !m));
        assert!(foreground_mask(&Image::filled(8, 8, 1.0), 2, 2)
            .unwrap()
            .iter()
            .all(|&m| m));
        let mut im = Image::filled(8, 8, 0.0);
        im.pixels_mut()[3 * 8 + 5] = 0.5;
        assert_eq!(
            foreground_mask(&im, 2, 2).unwrap(),
            vec![false, true, false, false]
        );
        assert!(foreground_mask(&im, 3, 2).is_err());
    }

    #[test]
    fn graph_stats_match_direct_estimate() {
        let zs = [vec![1.0, 2.0], vec![3.0, -2.0], vec![0.5, 0.0]];
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = zs
            .iter()
            .map(|z| g.constant(Tensor::from_vec(&[1, 2], z.clone()).unwrap()))
            .collect();
        let (mu, var) = stats_in_graph(&mut g, &vars);
        let grids: Vec<_> = zs.iter().map(|z| grid(z.clone())).collect();
        let refs: Vec<_> = grids.iter().collect();
        let s = estimate_vqc(&refs).unwrap();
        for (a, b) in g.value(mu).data().iter().zip(&s.mu) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(var.unwrap()).data().iter().zip(&s.var) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
