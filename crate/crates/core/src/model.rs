//! Encoder, style-conditioned decoder and the translation operation
//! `G(z_q(E(X_i)), c_j)`.
//!
//! Encoder: input conv, `s` stride-2 downsampling convs, two residual blocks,
//! 1x1 projection to `D` channels. Decoder: 1x1 lift, two residual blocks,
//! `s` nearest-upsample + conv stages, linear output conv. The style code
//! drives a two-layer mapping network whose heads produce a per-channel
//! scale and shift for the lifted latent and for every upsampling stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{nearest_codes, Codebook, LatentGrid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{nchw_to_rows, rows_to_nchw, Graph, Var};
use crate::image::Image;
use crate::nn::{Bound, Conv2d, Linear, ParamId, Params, ResBlock};
use crate::tensor::{Scalar, Tensor};

pub const CODEBOOK_PARAM: &str = "codebook.embeddings";

/// Target-domain code fed to the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    values: Vec<f64>,
}

impl StyleCode {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "style code entries must lie in [0, 1]: {values:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn one_hot(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::InvalidArgument(format!(
                "sequence index {index} out of range for N={n}"
            )));
        }
        let mut values = vec![0.0; n];
        values[index] = 1.0;
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stack codes into a `[B, N]` tensor.
    pub fn stack<F: Scalar>(codes: &[&StyleCode]) -> Tensor<F> {
        let n = codes.first().map_or(0, |c| c.len());
        let data = codes
            .iter()
            .flat_map(|c| c.values.iter().map(|&v| F::from_f64(v)))
            .collect();
        Tensor::from_vec(&[codes.len(), n], data).expect("style code stack")
    }
}

/// Which latent the decoder sees during translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Decode the continuous encoder output (ablation).
    ContinuousBypass,
    /// Decode the quantized latent.
    Quantized,
}

#[derive(Debug, Clone)]
struct Modulation {
    scale: Linear,
    shift: Linear,
}

#[derive(Debug, Clone)]
struct Arch {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_res: [ResBlock; 2],
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_res: [ResBlock; 2],
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    map_in: Linear,
    mods: Vec<Modulation>,
    codebook: ParamId,
}

impl Arch {
    fn build<F: Scalar>(cfg: &ModelConfig, params: &mut Params<F>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.base_channels;
        let s = cfg.downsample_stages;
        let enc_in = Conv2d::new(params, &mut rng, "enc.in", 1, c, 3, 1);
        let enc_down = (0..s)
            .map(|i| Conv2d::new(params, &mut rng, &format!("enc.down{i}"), c, c, 3, 2))
            .collect();
        let enc_res = [
            ResBlock::new(params, &mut rng, "enc.res0", c),
            ResBlock::new(params, &mut rng, "enc.res1", c),
        ];
        let enc_out = Conv2d::new(params, &mut rng, "enc.out", c, cfg.latent_dim, 1, 1);
        let dec_in = Conv2d::new(params, &mut rng, "dec.in", cfg.latent_dim, c, 1, 1);
        let dec_res = [
            ResBlock::new(params, &mut rng, "dec.res0", c),
            ResBlock::new(params, &mut rng, "dec.res1", c),
        ];
        let dec_up = (0..s)
            .map(|i| Conv2d::new(params, &mut rng, &format!("dec.up{i}"), c, c, 3, 1))
            .collect();
        let dec_out = Conv2d::new(params, &mut rng, "dec.out", c, 1, 3, 1);
        let map_in = Linear::new(params, &mut rng, "map.in", cfg.num_sequences, cfg.mapping_hidden);
        let mods = (0..=s)
            .map(|i| Modulation {
                scale: Linear::new(params, &mut rng, &format!("map.scale{i}"), cfg.mapping_hidden, c),
                shift: Linear::new(params, &mut rng, &format!("map.shift{i}"), cfg.mapping_hidden, c),
            })
            .collect();
        let codebook = params.push(
            CODEBOOK_PARAM,
            Codebook::<F>::init(cfg.num_codes, cfg.latent_dim, cfg.seed ^ 0xC0DE_B00C)?
                .into_embeddings(),
        );
        Ok(Self {
            enc_in,
            enc_down,
            enc_res,
            enc_out,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
            map_in,
            mods,
            codebook,
        })
    }
}

/// Encoder, decoder and codebook with their parameters.
#[derive(Debug, Clone)]
pub struct VqcModel<F> {
    config: ModelConfig,
    params: Params<F>,
    arch: Arch,
}

impl<F: Scalar> VqcModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = Params::default();
        let arch = Arch::build(&config, &mut params)?;
        Ok(Self {
            config,
            params,
            arch,
        })
    }

    /// Model with externally supplied parameters, which must match the
    /// names and shapes `config` produces.
    pub fn from_params(config: ModelConfig, params: Params<F>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if model.params.names() != params.names() {
            return Err(Error::InvalidArgument(
                "parameter names do not match the model configuration".into(),
            ));
        }
        for ((name, a), b) in model.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn codebook_param(&self) -> ParamId {
        self.arch.codebook
    }

    pub fn codebook(&self) -> Codebook<F> {
        Codebook::new(self.params.get(self.arch.codebook).clone()).expect("valid codebook")
    }

    pub fn cast<G: Scalar>(&self) -> VqcModel<G> {
        VqcModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Spatial size of the latent grid for an `h x w` input.
    pub fn latent_shape(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = 1usize << self.config.downsample_stages;
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} is not divisible by 2^{} = {f}",
                self.config.downsample_stages
            )));
        }
        Ok((h / f, w / f))
    }

    /// `[B, 1, H, W]` → `[B, D, H/2^s, W/2^s]`.
    pub fn encode_graph(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        let a = &self.arch;
        let mut h = a.enc_in.forward(g, p, x);
        h = g.silu(h);
        for conv in &a.enc_down {
            h = conv.forward(g, p, h);
            h = g.silu(h);
        }
        for block in &a.enc_res {
            h = block.forward(g, p, h);
        }
        h = g.silu(h);
        a.enc_out.forward(g, p, h)
    }

    /// `z: [B, D, h, w]`, `codes: [B, N]` → `[B, 1, h*2^s, w*2^s]`.
    pub fn decode_graph(&self, g: &mut Graph<F>, p: &Bound, z: Var, codes: Var) -> Var {
        let a = &self.arch;
        let style = a.map_in.forward(g, p, codes);
        let style = g.silu(style);
        let mods: Vec<(Var, Var)> = a
            .mods
            .iter()
            .map(|m| (m.scale.forward(g, p, style), m.shift.forward(g, p, style)))
            .collect();

        let mut h = a.dec_in.forward(g, p, z);
        h = g.modulate(h, mods[0].0, mods[0].1);
        for block in &a.dec_res {
            h = block.forward(g, p, h);
        }
        for (conv, &(scale, shift)) in a.dec_up.iter().zip(&mods[1..]) {
            h = g.upsample2x(h);
            h = conv.forward(g, p, h);
            h = g.modulate(h, scale, shift);
            h = g.silu(h);
        }
        a.dec_out.forward(g, p, h)
    }

    fn check_image(&self, x: &Image) -> Result<(usize, usize)> {
        self.latent_shape(x.height(), x.width())
    }

    fn check_code(&self, c: &StyleCode) -> Result<()> {
        if c.len() != self.config.num_sequences {
            return Err(Error::InvalidArgument(format!(
                "style code has length {}, model expects N={}",
                c.len(),
                self.config.num_sequences
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, i: usize) -> Result<()> {
        if i >= self.config.num_sequences {
            return Err(Error::InvalidArgument(format!(
                "sequence index {i} out of range for N={}",
                self.config.num_sequences
            )));
        }
        Ok(())
    }

    /// Continuous latents `z_e` for a batch of images.
    pub fn encode_batch(&self, xs: &[&Image]) -> Result<Vec<LatentGrid<F>>> {
        let (h, w) = match xs.first() {
            Some(x) => self.check_image(x)?,
            None => return Ok(Vec::new()),
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Image::stack(xs)?);
        let z = self.encode_graph(&mut g, &p, x);
        let d = self.config.latent_dim;
        let rows = nchw_to_rows(g.value(z).data(), xs.len(), d, h, w);
        rows.chunks(h * w * d)
            .map(|c| LatentGrid::continuous(h, w, d, c.to_vec()))
            .collect()
    }

    pub fn encode(&self, x: &Image) -> Result<LatentGrid<F>> {
        Ok(self.encode_batch(&[x])?.remove(0))
    }

    /// Nearest-code quantization against the model's codebook.
    pub fn quantize(&self, z: &LatentGrid<F>) -> Result<LatentGrid<F>> {
        crate::codebook::quantize(z, &self.codebook())
    }

    pub fn decode_batch(&self, zs: &[&LatentGrid<F>], codes: &[&StyleCode]) -> Result<Vec<Image>> {
        if zs.len() != codes.len() {
            return Err(Error::InvalidArgument(
                "decode needs one style code per latent".into(),
            ));
        }
        let Some(first) = zs.first() else {
            return Ok(Vec::new());
        };
        let (h, w, d) = (first.height(), first.width(), first.dim());
        if d != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent dimension {d} does not match model D={}",
                self.config.latent_dim
            )));
        }
        let mut rows = Vec::with_capacity(zs.len() * h * w * d);
        for z in zs {
            if (z.height(), z.width(), z.dim()) != (h, w, d) {
                return Err(Error::Shape("decode batch latents differ in shape".into()));
            }
            rows.extend_from_slice(z.values());
        }
        for c in codes {
            self.check_code(c)?;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zt = Tensor::from_vec(&[zs.len(), d, h, w], rows_to_nchw(&rows, zs.len(), d, h, w))?;
        let z = g.constant(zt);
        let c = g.constant(StyleCode::stack(codes));
        let out = self.decode_graph(&mut g, &p, z, c);
        Ok(Image::unstack(g.value(out)))
    }

    pub fn decode(&self, z: &LatentGrid<F>, c: &StyleCode) -> Result<Image> {
        Ok(self.decode_batch(&[z], &[c])?.remove(0))
    }

    /// Latent handed to the decoder for `x` under `mode`.
    pub fn latent_for(&self, x: &Image, mode: LatentMode) -> Result<LatentGrid<F>> {
        let z = self.encode(x)?;
        match mode {
            LatentMode::ContinuousBypass => Ok(z),
            LatentMode::Quantized => self.quantize(&z),
        }
    }

    /// `G(z_q(E(x)), one_hot(target))`, or `G(E(x), ...)` in bypass mode.
    pub fn translate(
        &self,
        x: &Image,
        source: usize,
        target: usize,
        mode: LatentMode,
    ) -> Result<Image> {
        self.check_sequence(source)?;
        self.check_sequence(target)?;
        let z = self.latent_for(x, mode)?;
        self.decode(&z, &StyleCode::one_hot(target, self.config.num_sequences)?)
    }

    /// Translate along `chain[0] → chain[1] → …`, feeding each output back in.
    pub fn translate_chain(&self, x: &Image, chain: &[usize], mode: LatentMode) -> Result<Image> {
        let Some(&first) = chain.first() else {
            return Err(Error::InvalidArgument("empty translation chain".into()));
        };
        self.check_sequence(first)?;
        if chain.len() == 1 {
            return self.translate(x, first, first, mode);
        }
        let mut cur = x.clone();
        for pair in chain.windows(2) {
            cur = self.translate(&cur, pair[0], pair[1], mode)?;
        }
        Ok(cur)
    }

    /// Code indices of `x`'s quantized latent.
    pub fn code_indices(&self, x: &Image) -> Result<(usize, usize, Vec<usize>)> {
        let z = self.encode(x)?;
        let idx = nearest_codes(z.values(), z.dim(), self.params.get(self.arch.codebook).data());
        Ok((z.height(), z.width(), idx))
    }
}
