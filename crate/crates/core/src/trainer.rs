//! Deterministic training loop with checkpoint/resume.
//!
//! Every source of randomness is derived from `(cfg.seed, step)` or
//! `(cfg.seed, epoch)`, so a run resumed from a checkpoint replays the
//! uninterrupted run exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::maybe_augment;
use crate::checkpoint::Checkpoint;
use crate::config::{Precision, TrainConfig};
use crate::data::{derive_seed, Dataset, Split, Subject};
use crate::error::{Error, Result};
use crate::eval::eval_self_reconstruction;
use crate::graph::Graph;
use crate::image::Image;
use crate::losses::{total_loss, LossLog, PerceptualExtractor, TrainInputs};
use crate::model::VqcModel;
use crate::optim::AdamW;
use crate::tensor::{Scalar, Tensor};
use crate::vqc::SequenceSet;

pub const LOSS_CSV: &str = "loss.csv";
pub const CODES_CSV: &str = "codes.csv";
pub const VAL_CSV: &str = "val.csv";
pub const LATEST_CHECKPOINT: &str = "latest.vqcm";
pub const FINAL_CHECKPOINT: &str = "final.vqcm";
const LOSS_HEADER: &str = "step,l1,ssim,per,con_mse,con_nce,vq,total";
const VAL_HEADER: &str = "step,psnr,ssim";
const CODES_HEADER: &str = "step,code,count";

/// Model, optimizer, number of completed steps and the code usage counts
/// since the last validation pass.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub model: VqcModel<F>,
    pub optimizer: AdamW<F>,
    pub step: u64,
    pub code_usage: Vec<u64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = VqcModel::new(cfg.model.clone())?;
        let optimizer = AdamW::new(
            model.params(),
            cfg.learning_rate,
            cfg.adam_betas,
            cfg.weight_decay,
        );
        Ok(Self {
            model,
            optimizer,
            step: 0,
            code_usage: vec![0; cfg.model.num_codes],
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint<F> {
        Checkpoint {
            config: cfg.clone(),
            step: self.step,
            code_usage: self.code_usage.clone(),
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint<F>, path: &Path) -> Result<Self> {
        let optimizer = ck.optimizer.ok_or_else(|| Error::ConfigMismatch {
            path: path.to_path_buf(),
            detail: "checkpoint has no optimizer state to resume from".into(),
        })?;
        if ck.code_usage.len() != ck.model.config().num_codes {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
                detail: format!(
                    "checkpoint has {} code usage counts for {} codes",
                    ck.code_usage.len(),
                    ck.model.config().num_codes
                ),
            });
        }
        Ok(Self {
            model: ck.model,
            optimizer,
            step: ck.step,
            code_usage: ck.code_usage,
        })
    }
}

/// RNG for the step that follows `completed` finished steps.
pub fn step_rng(seed: u64, completed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("step/{completed}")))
}

/// Index into the training subjects of the `sample`-th draw: epochs are
/// seeded permutations.
pub fn schedule(seed: u64, n_subjects: usize, sample: u64) -> usize {
    let epoch = sample / n_subjects as u64;
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &format!("epoch/{epoch}"),
    )));
    order[(sample % n_subjects as u64) as usize]
}

fn describe(log: &LossLog) -> String {
    format!(
        "l1={} ssim={} per={} con_mse={} con_nce={} vq={} total={}",
        log.l1, log.ssim, log.per, log.con_mse, log.con_nce, log.vq, log.total
    )
}

/// Loss components and code assignments of one update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log: LossLog,
    /// Code indices of every encoded input.
    pub indices: Vec<Vec<usize>>,
}

/// One optimizer update on `subjects` (the mean loss when more than one).
/// Each available input is independently passed through
/// [`maybe_augment`] with the current model.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    subjects: &[&SequenceSet],
    cfg: &TrainConfig,
    extractor: &PerceptualExtractor<F>,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("train_step needs at least one subject".into()));
    }
    let scale = cfg.consistency_scale(state.step);
    let ramped;
    let step_cfg = if scale < 1.0 {
        let mut c = cfg.clone();
        c.weights.lambda_con *= scale;
        ramped = c;
        &ramped
    } else {
        cfg
    };
    let mut g = Graph::new();
    let p = state.model.params().bind(&mut g, true);
    let mut losses = Vec::with_capacity(subjects.len());
    let mut log = LossLog::default();
    let mut indices = Vec::new();
    for s in subjects {
        let seqs = s.available();
        let targets: Vec<&Image> = seqs.iter().map(|&i| s.get(i).expect("available")).collect();
        let inputs = seqs
            .iter()
            .zip(&targets)
            .map(|(&i, x)| Ok(maybe_augment(x, i, &state.model, &cfg.augment, rng)?.0))
            .collect::<Result<Vec<Image>>>()?;
        let input_refs: Vec<&Image> = inputs.iter().collect();
        let batch = TrainInputs {
            sequences: &seqs,
            inputs: &input_refs,
            targets: &targets,
        };
        let out = total_loss(&mut g, &state.model, &p, extractor, &batch, step_cfg, rng)?;
        losses.push(out.loss);
        indices.extend(out.indices);
        let l = out.log;
        log.l1 += l.l1;
        log.ssim += l.ssim;
        log.per += l.per;
        log.con_mse += l.con_mse;
        log.con_nce += l.con_nce;
        log.vq += l.vq;
        log.total += l.total;
        log.rec_terms += l.rec_terms;
        log.sampled_terms += l.sampled_terms;
        log.consistency_pairs += l.consistency_pairs;
        log.vq_terms += l.vq_terms;
    }
    let loss = if losses.len() == 1 {
        losses[0]
    } else {
        let b = losses.len() as f64;
        for v in [
            &mut log.l1,
            &mut log.ssim,
            &mut log.per,
            &mut log.con_mse,
            &mut log.con_nce,
            &mut log.vq,
            &mut log.total,
        ] {
            *v /= b;
        }
        let all = g.concat(&losses);
        g.mean(all)
    };
    if !log.is_finite() || !g.value(loss).item().as_f64().is_finite() {
        return Err(Error::NonFinite {
            step: state.step + 1,
            components: describe(&log),
        });
    }
    let mut grads = g.backward(loss);
    let grads: Vec<Option<Tensor<F>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite {
            step: state.step + 1,
            components: format!("non-finite gradient; {}", describe(&log)),
        });
    }
    state.optimizer.step(state.model.params_mut(), &grads)?;
    state.step += 1;
    Ok(StepOutput { log, indices })
}

/// Options of [`train`] beyond the config.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Continue from `<out>/latest.vqcm` when it exists.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    /// Called after each validation pass.
    pub on_validation: Option<&'a mut dyn FnMut(&Validation)>,
}

/// Validation summary emitted every `log_every` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    /// Distinct codes assigned since the previous validation.
    pub used_codes: usize,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub step: u64,
    pub model: VqcModel<f32>,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub val_csv: PathBuf,
}

fn loss_row(step: u64, l: &LossLog) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        l.l1, l.ssim, l.per, l.con_mse, l.con_nce, l.vq, l.total
    )
}

pub(crate) fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut body = String::with_capacity(rows.len() * 96 + header.len() + 1);
    body.push_str(header);
    body.push('\n');
    for r in rows {
        body.push_str(r);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Data rows of a CSV written by this module whose step is at most `upto`.
fn read_rows(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Integrity {
                path: path.to_path_buf(),
                detail: format!("malformed row {line:?}"),
            })?;
        if step <= upto {
            rows.push(line.to_string());
        }
    }
    Ok(rows)
}

/// Mean self-reconstruction `(psnr, ssim)` over the validation subjects.
pub fn validate<F: Scalar>(model: &VqcModel<F>, val: &[Subject]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let r = eval_self_reconstruction(model, val)?;
    Ok((r.mean("psnr").expect("column"), r.mean("ssim").expect("column")))
}

/// Train on the dataset's train split, writing checkpoints and CSV logs to
/// `out`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out: &Path, opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::Fast32 => train_typed::<f32>(dataset, cfg, out, opts),
        Precision::Check64 => train_typed::<f64>(dataset, cfg, out, opts),
    }
}

fn train_typed<F: Scalar>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if dataset.num_sequences() != cfg.model.num_sequences {
        return Err(Error::Config(format!(
            "dataset has {} sequences, model.num_sequences is {}",
            dataset.num_sequences(),
            cfg.model.num_sequences
        )));
    }
    let train_set = dataset.load_split(Split::Train)?;
    let val_set = dataset.load_split(Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::Integrity {
            path: dataset.dir().to_path_buf(),
            detail: "no training subjects".into(),
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let latest = out.join(LATEST_CHECKPOINT);
    let loss_csv = out.join(LOSS_CSV);
    let val_csv = out.join(VAL_CSV);
    let codes_csv = out.join(CODES_CSV);

    let (mut state, mut loss_rows, mut val_rows, mut code_rows) = if opts.resume && latest.exists() {
        let ck = Checkpoint::<F>::load_matching(&latest, &cfg.model)?;
        if ck.config != *cfg {
            return Err(Error::ConfigMismatch {
                path: latest.clone(),
                detail: "training config differs from the one being resumed".into(),
            });
        }
        let state = TrainState::from_checkpoint(ck, &latest)?;
        let loss_rows = read_rows(&loss_csv, state.step)?;
        let val_rows = read_rows(&val_csv, state.step)?;
        let code_rows = read_rows(&codes_csv, state.step)?;
        (state, loss_rows, val_rows, code_rows)
    } else {
        (TrainState::<F>::new(cfg)?, Vec::new(), Vec::new(), Vec::new())
    };

    let extractor = PerceptualExtractor::<F>::fixed();
    let mut run_validation =
        |state: &mut TrainState<F>, rows: &mut Vec<String>, code_rows: &mut Vec<String>| -> Result<()> {
            let (p, s) = validate(&state.model, &val_set)?;
            rows.push(format!("{},{p},{s}", state.step));
            let mut used = 0;
            for (c, n) in state.code_usage.iter_mut().enumerate() {
                if *n > 0 {
                    code_rows.push(format!("{},{c},{n}", state.step));
                    used += 1;
                }
                *n = 0;
            }
            if let Some(f) = opts.on_validation.as_mut() {
                f(&Validation {
                    step: state.step,
                    psnr: p,
                    ssim: s,
                    used_codes: used,
                });
            }
            Ok(())
        };
    if state.step == 0 && val_rows.is_empty() {
        run_validation(&mut state, &mut val_rows, &mut code_rows)?;
    }
    let save = |state: &TrainState<F>, loss_rows: &[String], val_rows: &[String], code_rows: &[String]| -> Result<()> {
        write_csv(&loss_csv, LOSS_HEADER, loss_rows)?;
        write_csv(&val_csv, VAL_HEADER, val_rows)?;
        write_csv(&codes_csv, CODES_HEADER, code_rows)?;
        state.checkpoint(cfg).save(&latest)
    };

    let n = train_set.len();
    let bsz = cfg.batch_size as u64;
    let stop = opts.stop_after.map_or(cfg.total_steps, |s| s.min(cfg.total_steps));
    while state.step < stop {
        let batch: Vec<&SequenceSet> = (0..bsz)
            .map(|b| &train_set[schedule(cfg.seed, n, state.step * bsz + b)].sequences)
            .collect();
        let mut rng = step_rng(cfg.seed, state.step);
        let step_out = train_step(&mut state, &batch, cfg, &extractor, &mut rng)?;
        loss_rows.push(loss_row(state.step, &step_out.log));
        for &c in step_out.indices.iter().flatten() {
            state.code_usage[c] += 1;
        }
        if state.step % cfg.log_every == 0 || state.step == cfg.total_steps {
            run_validation(&mut state, &mut val_rows, &mut code_rows)?;
        }
        if state.step % cfg.checkpoint_every == 0 {
            save(&state, &loss_rows, &val_rows, &code_rows)?;
            let snap = out.join(format!("step_{:06}.vqcm", state.step));
            state.checkpoint(cfg).save(&snap)?;
        }
    }
    save(&state, &loss_rows, &val_rows, &code_rows)?;
    let checkpoint = if state.step == cfg.total_steps {
        let f = out.join(FINAL_CHECKPOINT);
        state.checkpoint(cfg).save(&f)?;
        f
    } else {
        latest
    };
    Ok(TrainOutcome {
        step: state.step,
        model: state.model.cast(),
        checkpoint,
        loss_csv,
        val_csv,
    })
}

/// Load a checkpoint's model in 32-bit.
pub fn load_model(path: &Path) -> Result<VqcModel<f32>> {
    Ok(Checkpoint::<f32>::load(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_visits_each_subject_once_per_epoch() {
        for epoch in 0..3u64 {
            let mut seen: Vec<usize> = (0..9).map(|i| schedule(4, 9, epoch * 9 + i)).collect();
            seen.sort();
            assert_eq!(seen, (0..9).collect::<Vec<_>>());
        }
        let e0: Vec<usize> = (0..9).map(|i| schedule(4, 9, i)).collect();
        let e1: Vec<usize> = (9..18).map(|i| schedule(4, 9, i)).collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn step_rngs_are_independent_of_history() {
        use rand::Rng;
        let a: u64 = step_rng(1, 10).random();
        let b: u64 = step_rng(1, 10).random();
        let c: u64 = step_rng(1, 11).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
