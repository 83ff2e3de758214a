use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Single-channel 2-D intensity image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// `[1, 1, H, W]` tensor in precision `F`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self.pixels.iter().map(|&v| F::from_f64(v as f64)).collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).expect("image tensor")
    }

    /// Stack images into `[B, 1, H, W]`.
    pub fn stack<F: Scalar>(images: &[&Image]) -> Result<Tensor<F>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image stack".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.pixels.len());
        for im in images {
            first.same_shape(im)?;
            data.extend(im.pixels.iter().map(|&v| F::from_f64(v as f64)));
        }
        Tensor::from_vec(&[images.len(), 1, first.height, first.width], data)
    }

    /// Split a `[B, 1, H, W]` tensor into images.
    pub fn unstack<F: Scalar>(t: &Tensor<F>) -> Vec<Image> {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1], 1);
        let (h, w) = (s[2], s[3]);
        t.data()
            .chunks(h * w)
            .map(|c| Image {
                height: h,
                width: w,
                pixels: c.iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }
}
