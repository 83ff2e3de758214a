//! Random domain augmentation: intensity transforms (gamma, Gaussian noise,
//! polynomial bias field) and model-based translation to another sequence
//! or to a random point of the style space.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{LatentMode, StyleCode, VqcModel};
use crate::tensor::Scalar;

/// Degree of the bias-field polynomial.
pub const BIAS_DEGREE: usize = 3;

/// `x^gamma`, clipped to `[0, 1]`.
pub fn gamma_transform(x: &Image, gamma: f64) -> Result<Image> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be > 0, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.map(|v| (v.max(0.0) as f64).powf(gamma).clamp(0.0, 1.0) as f32))
}

/// Add `N(0, sigma²)` noise per pixel and clip to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(x: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let px = x
        .pixels()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Image::new(x.height(), x.width(), px)
}

/// Bivariate polynomial `P(u, v) = Σ_{a+b≤3} c_ab u^a v^b` over
/// `u, v ∈ [−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    /// Coefficients in `(a, b)` order with `a + b ≤ 3`, `a` outer.
    pub coefficients: Vec<f64>,
}

fn monomials() -> impl Iterator<Item = (i32, i32)> {
    (0..=BIAS_DEGREE as i32).flat_map(|a| (0..=BIAS_DEGREE as i32 - a).map(move |b| (a, b)))
}

fn unit_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

impl BiasField {
    /// Coefficients drawn from `U(−scale, scale)`.
    pub fn sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Self {
        let coefficients = monomials()
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Self { coefficients }
    }

    pub fn polynomial(&self, u: f64, v: f64) -> f64 {
        monomials()
            .zip(&self.coefficients)
            .map(|((a, b), c)| c * u.powi(a) * v.powi(b))
            .sum()
    }

    /// Multiplicative field `exp(alpha · P)` on an `h x w` grid.
    pub fn field(&self, h: usize, w: usize, alpha: f64) -> Vec<f64> {
        (0..h)
            .flat_map(|y| {
                (0..w).map(move |x| (y, x))
            })
            .map(|(y, x)| (alpha * self.polynomial(unit_coord(x, w), unit_coord(y, h))).exp())
            .collect()
    }

    /// Upper bound on `|∂P/∂u| + |∂P/∂v|` over the unit square.
    pub fn gradient_bound(&self) -> f64 {
        monomials()
            .zip(&self.coefficients)
            .map(|((a, b), c)| c.abs() * (a + b) as f64)
            .sum()
    }

    pub fn apply(&self, x: &Image, alpha: f64) -> Image {
        let f = self.field(x.height(), x.width(), alpha);
        let px = x
            .pixels()
            .iter()
            .zip(f)
            .map(|(&v, m)| (v as f64 * m).clamp(0.0, 1.0) as f32)
            .collect();
        Image::new(x.height(), x.width(), px).expect("same shape")
    }
}

/// Multiply by a random smooth bias field `exp(alpha · P(u, v))`, clip to
/// `[0, 1]`.
pub fn bias_field<R: Rng + ?Sized>(x: &Image, alpha: f64, scale: f64, rng: &mut R) -> Result<Image> {
    if !(alpha >= 0.0) || !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bias field needs alpha >= 0 and scale >= 0, got {alpha} / {scale}"
        )));
    }
    let field = BiasField::sample(scale, rng);
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    Ok(field.apply(x, alpha))
}

fn uniform<R: Rng + ?Sized>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Gamma, noise and bias field in that order, each with parameters drawn
/// from `cfg`.
pub fn intensity_composite<R: Rng + ?Sized>(
    x: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Image> {
    let gamma = uniform(cfg.gamma_range, rng);
    let sigma = uniform(cfg.noise_sigma_range, rng);
    let alpha = uniform(cfg.bias_alpha_range, rng);
    let y = gamma_transform(x, gamma)?;
    let y = add_noise(&y, sigma, rng)?;
    bias_field(&y, alpha, cfg.bias_scale, rng)
}

/// Translate `x` (sequence `source`) to a uniformly chosen other sequence.
pub fn augment_cross_sequence<F: Scalar, R: Rng + ?Sized>(
    x: &Image,
    source: usize,
    model: &VqcModel<F>,
    rng: &mut R,
) -> Result<Image> {
    let n = model.config().num_sequences;
    if n < 2 || source >= n {
        return Err(Error::InvalidArgument(format!(
            "cross-sequence augmentation needs N >= 2 and source < N (N={n}, source={source})"
        )));
    }
    let mut target = rng.random_range(0..n - 1);
    if target >= source {
        target += 1;
    }
    Ok(model.translate(x, source, target, LatentMode::Quantized)?.clamp01())
}

/// A style code with entries drawn from `U(0, 1)`.
pub fn random_style<R: Rng + ?Sized>(n: usize, rng: &mut R) -> StyleCode {
    StyleCode::new((0..n).map(|_| rng.random_range(0.0..=1.0)).collect()).expect("entries in [0, 1]")
}

/// Decode `x`'s quantized latent with a random style code.
pub fn augment_random_domain<F: Scalar, R: Rng + ?Sized>(
    x: &Image,
    model: &VqcModel<F>,
    rng: &mut R,
) -> Result<Image> {
    let code = random_style(model.config().num_sequences, rng);
    let z = model.latent_for(x, LatentMode::Quantized)?;
    Ok(model.decode(&z, &code)?.clamp01())
}

/// Which augmentation [`maybe_augment`] applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentBranch {
    Identity,
    Intensity,
    CrossSequence,
    RandomDomain,
}

/// With probability `1 − replace_probability` return `x`; otherwise apply
/// one of the intensity composite, cross-sequence or random-domain
/// augmentations, chosen uniformly.
pub fn maybe_augment<F: Scalar, R: Rng + ?Sized>(
    x: &Image,
    source: usize,
    model: &VqcModel<F>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, AugmentBranch)> {
    let p = cfg.replace_probability;
    if p <= 0.0 || rng.random::<f64>() >= p {
        return Ok((x.clone(), AugmentBranch::Identity));
    }
    match rng.random_range(0..3) {
        0 => Ok((intensity_composite(x, cfg, rng)?, AugmentBranch::Intensity)),
        1 => Ok((
            augment_cross_sequence(x, source, model, rng)?,
            AugmentBranch::CrossSequence,
        )),
        _ => Ok((augment_random_domain(x, model, rng)?, AugmentBranch::RandomDomain)),
    }
}
