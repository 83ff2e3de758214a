use rand::Rng;

use crate::codebook::{quantize_in_graph, vq_loss_in_graph};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::model::{StyleCode, VqcModel};
use crate::nn::Bound;
use crate::tensor::{Scalar, Tensor};
use crate::vqc::{foreground_mask, sample_in_graph, standard_normal, stats_in_graph};

use super::{consistency_in_graph, rec_in_graph, select_anchors, PerceptualExtractor};

/// One subject's training inputs.
#[derive(Debug, Clone, Copy)]
pub struct TrainInputs<'a> {
    /// Available sequence indices, ascending.
    pub sequences: &'a [usize],
    /// Encoder inputs, possibly augmented; one per available sequence.
    pub inputs: &'a [&'a Image],
    /// Clean reconstruction targets; one per available sequence.
    pub targets: &'a [&'a Image],
}

/// Loss components of one step.
///
/// `l1`, `ssim` and `per` are unweighted sums over all reconstruction terms;
/// `con_mse` and `con_nce` are summed over ordered pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossLog {
    pub l1: f64,
    pub ssim: f64,
    pub per: f64,
    pub con_mse: f64,
    pub con_nce: f64,
    pub vq: f64,
    pub total: f64,
    pub rec_terms: usize,
    pub sampled_terms: usize,
    pub consistency_pairs: usize,
    pub vq_terms: usize,
}

impl LossLog {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.ssim, self.per, self.con_mse, self.con_nce, self.vq, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub struct TotalLoss {
    pub loss: Var,
    pub log: LossLog,
    /// Code indices per available sequence.
    pub indices: Vec<Vec<usize>>,
}

fn sum_vars<F: Scalar>(g: &mut Graph<F>, vars: &[Var]) -> Option<Var> {
    let (&first, rest) = vars.split_first()?;
    Some(rest.iter().fold(first, |acc, &v| g.add(acc, v)))
}

/// Build the training objective for one subject in `g`.
///
/// The decoder sees every ordered pair `i → j` of available sequences
/// (including `i = j`) and one sample of the common latent per target.
pub fn total_loss<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    model: &VqcModel<F>,
    params: &Bound,
    extractor: &PerceptualExtractor<F>,
    batch: &TrainInputs<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TotalLoss> {
    let n = batch.sequences.len();
    if n == 0 || batch.inputs.len() != n || batch.targets.len() != n {
        return Err(Error::InvalidArgument(
            "total_loss needs one input and one target per available sequence".into(),
        ));
    }
    let mcfg = model.config();
    if let Some(&bad) = batch.sequences.iter().find(|&&i| i >= mcfg.num_sequences) {
        return Err(Error::InvalidArgument(format!(
            "sequence index {bad} out of range for N={}",
            mcfg.num_sequences
        )));
    }
    let w = &cfg.weights;
    let first = batch.inputs[0];
    let (h, wd) = model.latent_shape(first.height(), first.width())?;
    let positions = h * wd;
    let d = mcfg.latent_dim;

    let x = g.constant(Image::stack(batch.inputs)?);
    let z = model.encode_graph(g, params, x);
    let rows = g.to_rows(z);
    let q = quantize_in_graph(g, rows, params.var(model.codebook_param()));

    let vq_mean = vq_loss_in_graph(g, rows, q.codes, w.beta);
    let vq = g.scale(vq_mean, n as f64);

    let zq: Vec<Var> = (0..n)
        .map(|i| g.slice(q.straight_through, i * positions, positions))
        .collect();
    let stat_inputs: Vec<Var> = if cfg.detach_stats {
        zq.iter().map(|&v| g.detach(v)).collect()
    } else {
        zq.clone()
    };
    let (mu, var) = stats_in_graph(g, &stat_inputs);

    let mut latents = Vec::with_capacity(n * n + n);
    let mut codes = Vec::with_capacity(n * n + n);
    let mut targets = Vec::with_capacity(n * n + n);
    for (a, _) in batch.sequences.iter().enumerate() {
        for (b, &j) in batch.sequences.iter().enumerate() {
            latents.push(zq[a]);
            codes.push(StyleCode::one_hot(j, mcfg.num_sequences)?);
            targets.push(batch.targets[b]);
        }
    }
    for (b, &j) in batch.sequences.iter().enumerate() {
        let eps = Tensor::from_vec(&[positions, d], standard_normal(rng, positions * d))?;
        latents.push(sample_in_graph(g, mu, var, eps, cfg.scale_mode));
        codes.push(StyleCode::one_hot(j, mcfg.num_sequences)?);
        targets.push(batch.targets[b]);
    }
    let terms = latents.len();
    let zdec = g.concat(&latents);
    let zdec = g.from_rows(zdec, terms, h, wd);
    let code_refs: Vec<&StyleCode> = codes.iter().collect();
    let cvar = g.constant(StyleCode::stack(&code_refs));
    let xhat = model.decode_graph(g, params, zdec, cvar);
    let xt = g.constant(Image::stack(&targets)?);
    let rec = rec_in_graph(g, xhat, xt, w, extractor);
    let rec_total = g.scale(rec.total, terms as f64);

    let masks: Vec<Vec<bool>> = batch
        .targets
        .iter()
        .map(|t| foreground_mask(t, h, wd))
        .collect::<Result<_>>()?;
    let mut mse_terms = Vec::new();
    let mut nce_terms = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let union: Vec<bool> = masks[a].iter().zip(&masks[b]).map(|(&p, &q)| p || q).collect();
            let anchors = select_anchors(&union, cfg.max_anchors, rng);
            let c = consistency_in_graph(g, zq[a], zq[b], &anchors, w.tau);
            mse_terms.push(c.mse);
            nce_terms.extend(c.nce);
        }
    }
    let pairs = mse_terms.len();

    let mut parts = vec![rec_total];
    let vq_weighted = g.scale(vq, w.lambda_vq);
    parts.push(vq_weighted);
    let con_mse = sum_vars(g, &mse_terms).map(|v| g.scale(v, 2.0));
    let con_nce = sum_vars(g, &nce_terms).map(|v| g.scale(v, 2.0));
    for v in [con_mse, con_nce].into_iter().flatten() {
        parts.push(g.scale(v, w.lambda_con));
    }
    let loss = sum_vars(g, &parts).expect("non-empty");

    let val = |g: &Graph<F>, v: Var| g.value(v).item().as_f64();
    let bsz = terms as f64;
    let log = LossLog {
        l1: val(g, rec.l1) * bsz,
        ssim: val(g, rec.ssim) * bsz,
        per: val(g, rec.per) * bsz,
        con_mse: con_mse.map_or(0.0, |v| val(g, v)),
        con_nce: con_nce.map_or(0.0, |v| val(g, v)),
        vq: val(g, vq),
        total: val(g, loss),
        rec_terms: n * n,
        sampled_terms: n,
        consistency_pairs: pairs,
        vq_terms: n,
    };
    let indices = q.indices.chunks(positions).map(<[usize]>::to_vec).collect();
    Ok(TotalLoss { loss, log, indices })
}
