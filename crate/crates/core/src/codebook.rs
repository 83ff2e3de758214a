//! Discrete latent vocabulary: nearest-code quantization, the
//! straight-through estimator and the codebook/commitment loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Default commitment weight.
pub const DEFAULT_BETA: f64 = 0.25;

/// `K x D` table of code vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    embeddings: Tensor<F>,
}

impl<F: Scalar> Codebook<F> {
    pub fn new(embeddings: Tensor<F>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("codebook must be K x D, got {s:?}")));
        }
        if s[0] < 2 || s[1] < 1 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs K >= 2 and D >= 1, got K={} D={}",
                s[0], s[1]
            )));
        }
        if !embeddings.all_finite() {
            return Err(Error::InvalidArgument("non-finite codebook entry".into()));
        }
        Ok(Self { embeddings })
    }

    /// Entries uniform on `[-1/K, 1/K]`, deterministic in `(k, d, seed)`.
    pub fn init(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k < 2 || d < 1 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs K >= 2 and D >= 1, got K={k} D={d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / k as f64;
        let data = (0..k * d)
            .map(|_| F::from_f64(rng.random_range(-bound..=bound)))
            .collect();
        Self::new(Tensor::from_vec(&[k, d], data)?)
    }

    pub fn num_codes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    pub fn embeddings(&self) -> &Tensor<F> {
        &self.embeddings
    }

    pub fn into_embeddings(self) -> Tensor<F> {
        self.embeddings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    Continuous,
    Quantized,
}

/// `h x w` grid of `D`-dimensional latent vectors, stored position-major
/// (`values[(y * w + x) * D + c]`). Quantized grids carry their code indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<F> {
    h: usize,
    w: usize,
    d: usize,
    values: Vec<F>,
    indices: Option<Vec<usize>>,
}

impl<F: Scalar> LatentGrid<F> {
    pub fn continuous(h: usize, w: usize, d: usize, values: Vec<F>) -> Result<Self> {
        if values.len() != h * w * d {
            return Err(Error::Shape(format!(
                "latent grid {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite latent value".into()));
        }
        Ok(Self {
            h,
            w,
            d,
            values,
            indices: None,
        })
    }

    /// Quantized grid built from code indices; values are copied from `cb`.
    pub fn from_indices(h: usize, w: usize, indices: Vec<usize>, cb: &Codebook<F>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::Shape(format!(
                "{h}x{w} grid needs {} indices, got {}",
                h * w,
                indices.len()
            )));
        }
        let k = cb.num_codes();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::InvalidArgument(format!(
                "code index {bad} out of range for K={k}"
            )));
        }
        let values = indices.iter().flat_map(|&i| cb.row(i).iter().copied()).collect();
        Ok(Self {
            h,
            w,
            d: cb.dim(),
            values,
            indices: Some(indices),
        })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn kind(&self) -> LatentKind {
        if self.indices.is_some() {
            LatentKind::Quantized
        } else {
            LatentKind::Continuous
        }
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn indices(&self) -> Option<&[usize]> {
        self.indices.as_deref()
    }

    pub fn vector(&self, p: usize) -> &[F] {
        &self.values[p * self.d..(p + 1) * self.d]
    }

    /// The same values viewed as a continuous grid.
    pub fn to_continuous(&self) -> Self {
        Self {
            indices: None,
            ..self.clone()
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.h, self.w, self.d) != (other.h, other.w, other.d) {
            return Err(Error::Shape(format!(
                "latent grids differ: {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.d, other.h, other.w, other.d
            )));
        }
        Ok(())
    }
}

/// Index of the nearest table row (squared Euclidean) for every `d`-vector in
/// `vectors`; ties go to the lowest index.
pub fn nearest_codes<F: Scalar>(vectors: &[F], d: usize, table: &[F]) -> Vec<usize> {
    vectors
        .chunks_exact(d)
        .map(|v| {
            let mut best = 0;
            let mut best_dist = F::infinity();
            for (i, e) in table.chunks_exact(d).enumerate() {
                let mut dist = F::ZERO;
                for (&a, &b) in v.iter().zip(e) {
                    let t = a - b;
                    dist += t * t;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Snap every latent vector to its nearest code.
pub fn quantize<F: Scalar>(z_e: &LatentGrid<F>, cb: &Codebook<F>) -> Result<LatentGrid<F>> {
    if z_e.d != cb.dim() {
        return Err(Error::Shape(format!(
            "latent dimension {} does not match codebook dimension {}",
            z_e.d,
            cb.dim()
        )));
    }
    let idx = nearest_codes(&z_e.values, z_e.d, cb.embeddings().data());
    LatentGrid::from_indices(z_e.h, z_e.w, idx, cb)
}

/// Forward value of `z_e + sg[z_q - z_e]`, which is exactly `z_q`. The
/// gradient routing lives in [`Graph::straight_through`].
pub fn straight_through<F: Scalar>(
    z_e: &LatentGrid<F>,
    z_q: &LatentGrid<F>,
) -> Result<LatentGrid<F>> {
    z_e.same_shape(z_q)?;
    Ok(z_q.clone())
}

/// `mean_p |sg[z_e] - z_q|² + beta * mean_p |sg[z_q] - z_e|²`, evaluated.
pub fn vq_loss<F: Scalar>(z_e: &LatentGrid<F>, z_q: &LatentGrid<F>, beta: f64) -> Result<f64> {
    z_e.same_shape(z_q)?;
    let sq: f64 = z_e
        .values
        .iter()
        .zip(&z_q.values)
        .map(|(&a, &b)| {
            let t = (a - b).as_f64();
            t * t
        })
        .sum();
    let per_pos = sq / z_e.positions() as f64;
    Ok(per_pos + beta * per_pos)
}

/// Graph handles produced by [`quantize_in_graph`].
pub struct QuantizedVars {
    /// Straight-through output: value `z_q`, gradient to the encoder rows.
    pub straight_through: Var,
    /// Code rows gathered from the codebook: gradient to the codebook.
    pub codes: Var,
    pub indices: Vec<usize>,
}

/// Quantize the `[P, D]` latent rows `rows` against the `[K, D]` codebook
/// node `codebook`.
pub fn quantize_in_graph<F: Scalar>(g: &mut Graph<F>, rows: Var, codebook: Var) -> QuantizedVars {
    let d = g.shape(rows)[1];
    assert_eq!(g.shape(codebook)[1], d, "latent/codebook dimension mismatch");
    let indices = nearest_codes(g.value(rows).data(), d, g.value(codebook).data());
    let codes = g.gather_rows(codebook, &indices);
    let value = g.value(codes).clone();
    let straight_through = g.straight_through(rows, value);
    QuantizedVars {
        straight_through,
        codes,
        indices,
    }
}

/// Sum over the trailing dimension, mean over rows, of `(a - b)²`.
pub(crate) fn mean_sq_norm<F: Scalar>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let rows = g.shape(a)[0] as f64;
    let diff = g.sub(a, b);
    let sq = g.square(diff);
    let s = g.sum(sq);
    g.scale(s, 1.0 / rows)
}

/// Codebook term (gradient to `codes` only) plus `beta` times the commitment
/// term (gradient to `rows` only).
pub fn vq_loss_in_graph<F: Scalar>(g: &mut Graph<F>, rows: Var, codes: Var, beta: f64) -> Var {
    let rows_sg = g.detach(rows);
    let codes_sg = g.detach(codes);
    let codebook_term = mean_sq_norm(g, rows_sg, codes);
    let commit = mean_sq_norm(g, codes_sg, rows);
    let commit = g.scale(commit, beta);
    g.add(codebook_term, commit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[[f64; 2]]) -> Codebook<f64> {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::new(Tensor::from_vec(&[rows.len(), 2], data).unwrap()).unwrap()
    }

    #[test]
    fn picks_nearest_of_two() {
        let cb = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = LatentGrid::continuous(1, 1, 2, vec![0.2, 0.1]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices().unwrap(), &[0]);
        assert_eq!(q.values(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_code_maps_to_itself() {
        let cb = cb(&[[0.0, 0.0], [1.0, 1.0], [2.0, -1.0], [0.5, 0.25]]);
        let z = LatentGrid::continuous(1, 1, 2, vec![0.5, 0.25]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices().unwrap(), &[3]);
        assert_eq!(q.values(), cb.row(3));
        assert_eq!(vq_loss(&z, &q, DEFAULT_BETA).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = cb(&[[1.0, 0.0], [-1.0, 0.0]]);
        let z = LatentGrid::continuous(1, 1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&z, &cb).unwrap().indices().unwrap(), &[0]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let cb = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = LatentGrid::continuous(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(quantize(&z, &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn vq_loss_hand_value() {
        let cb = cb(&[[0.0, 0.0], [5.0, 5.0]]);
        let z_e = LatentGrid::continuous(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let z_q = LatentGrid::from_indices(1, 1, vec![0], &cb).unwrap();
        assert!((vq_loss(&z_e, &z_q, 0.25).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Codebook::<f64>::init(8, 2, 7).unwrap();
        let b = Codebook::<f64>::init(8, 2, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.embeddings().data().iter().all(|v| v.abs() <= 1.0 / 8.0));
        let big = Codebook::<f32>::init(256, 3, 0).unwrap();
        assert_eq!(big.embeddings().shape(), &[256, 3]);
        assert!(Codebook::<f64>::init(1, 2, 0).is_err());
        assert!(Codebook::<f64>::init(4, 0, 0).is_err());
    }

    #[test]
    fn straight_through_forward_is_zq_and_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let rows = g.param(Tensor::from_vec(&[1, 2], vec![0.2, 0.1]).unwrap());
        let table = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let q = quantize_in_graph(&mut g, rows, table);
        assert_eq!(g.value(q.straight_through).data(), &[0.0, 0.0]);
        let loss = g.sum(q.straight_through);
        let grads = g.backward(loss);
        assert_eq!(grads.get(rows).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn vq_graph_routes_gradients() {
        // d/d rows of the commitment term is 2*beta*(rows - codes)/P and the
        // codebook term contributes nothing to the rows.
        let mut g = Graph::<f64>::new();
        let rows = g.param(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let table = g.param(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap());
        let q = quantize_in_graph(&mut g, rows, table);
        let loss = vq_loss_in_graph(&mut g, rows, q.codes, 0.25);
        assert!((g.value(loss).item() - 1.25).abs() < 1e-15);
        let grads = g.backward(loss);
        assert_eq!(grads.get(rows).unwrap().data(), &[0.5, 0.0]);
        assert_eq!(grads.get(table).unwrap().data(), &[-2.0, 0.0, 0.0, 0.0]);
    }
}
