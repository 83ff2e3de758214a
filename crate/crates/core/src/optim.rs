//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(params: &Params<F>, lr: f64, betas: [f64; 2], weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            betas,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` is `None` for parameters that received no
    /// gradient; their moments still decay.
    pub fn step(&mut self, params: &mut Params<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let [b1, b2] = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = F::from_f64(1.0 - self.lr * self.weight_decay);
        let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
        let (gb1, gb2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let step = F::from_f64(self.lr / bc1);
        let sqrt_bc2 = F::from_f64(bc2.sqrt());
        let eps = F::from_f64(ADAM_EPS);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_ref().map(Tensor::data);
            if let Some(g) = g {
                if g.len() != m.len() {
                    return Err(Error::Shape(format!("gradient {i} has the wrong size")));
                }
            }
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(F::ZERO, |g| g[k]);
                m[k] = fb1 * m[k] + gb1 * gk;
                v[k] = fb2 * v[k] + gb2 * gk * gk;
                *w *= decay;
                *w -= step * m[k] / (v[k].sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Params::<f64>::default();
        p.push("w", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = AdamW::new(&p, 0.1, [0.9, 0.999], 0.0);
        let g = Tensor::from_vec(&[3], vec![3.0, -0.5, 0.0]).unwrap();
        opt.step(&mut p, &[Some(g)]).unwrap();
        let w = p.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = Params::<f64>::default();
        p.push("w", Tensor::from_vec(&[1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.1, [0.9, 0.999], 0.5);
        opt.step(&mut p, &[None]).unwrap();
        assert!((p.tensors()[0].data()[0] - 2.0 * 0.95).abs() < 1e-12);
        assert!(opt.step(&mut p, &[]).is_err());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Params::<f64>::default();
        p.push("w", Tensor::from_vec(&[2], vec![3.0, -4.0]).unwrap());
        let mut opt = AdamW::new(&p, 0.05, [0.9, 0.999], 0.0);
        for _ in 0..2000 {
            let g = p.tensors()[0].map(|x| 2.0 * x);
            opt.step(&mut p, &[Some(g)]).unwrap();
        }
        assert!(p.tensors()[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
