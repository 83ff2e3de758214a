//! Image-quality metrics, translation and anti-interference evaluation, and
//! the code-index segmentation probe.
//!
//! Metrics are computed on whole images after clamping model outputs to
//! `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{add_noise, BiasField};
use crate::data::{derive_seed, LabelMap, Subject};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses;
use crate::model::{LatentMode, VqcModel};
use crate::tensor::Scalar;

/// `10 log10(range² / mse)`; `+inf` when `mse = 0`.
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    x.same_shape(y)?;
    let n = x.pixels().len() as f64;
    Ok(x.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

pub fn psnr(x: &Image, y: &Image, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, data_range))
}

/// `1 − ssim_loss(x, y)`.
pub fn ssim_metric(x: &Image, y: &Image) -> Result<f64> {
    Ok(1.0 - losses::ssim_loss(x, y)?)
}

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "dice: masks of length {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Per-subject metric rows plus derived aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub subject: String,
    pub task: String,
    pub values: Vec<f64>,
}

/// Mean and sample standard deviation of one metric over one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub task: String,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v}")
    }
}

impl MetricReport {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, subject: &str, task: &str, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(MetricRow {
            subject: subject.to_string(),
            task: task.to_string(),
            values,
        });
    }

    pub fn extend(&mut self, other: MetricReport) -> Result<()> {
        if other.columns != self.columns {
            return Err(Error::InvalidArgument("reports have different columns".into()));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Tasks in order of first appearance.
    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.task) {
                out.push(r.task.clone());
            }
        }
        out
    }

    /// Mean of column `name` over all rows.
    pub fn mean(&self, name: &str) -> Option<f64> {
        let c = self.column(name)?;
        if self.rows.is_empty() {
            return None;
        }
        Some(self.rows.iter().map(|r| r.values[c]).sum::<f64>() / self.rows.len() as f64)
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for task in self.tasks() {
            let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.task == task).collect();
            for (c, metric) in self.columns.iter().enumerate() {
                let vals: Vec<f64> = rows.iter().map(|r| r.values[c]).collect();
                let n = vals.len();
                let mean = vals.iter().sum::<f64>() / n as f64;
                let std = if n > 1 {
                    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                out.push(Aggregate {
                    task: task.clone(),
                    metric: metric.clone(),
                    count: n,
                    mean,
                    std,
                });
            }
        }
        out
    }

    pub fn rows_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["subject".to_string(), "task".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.subject.clone(), r.task.clone()];
            rec.extend(r.values.iter().map(|&v| fmt(v)));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn aggregate_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["task", "metric", "n", "mean", "std"])
            .expect("in-memory write");
        for a in self.aggregates() {
            w.write_record([a.task, a.metric, a.count.to_string(), fmt(a.mean), fmt(a.std)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Write `<stem>.csv` and `<stem>_aggregate.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        for (name, body) in [
            (format!("{stem}.csv"), self.rows_csv()),
            (format!("{stem}_aggregate.csv"), self.aggregate_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Single-step or chained translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Single,
    Multi,
}

/// `source, source±1, …, target`.
pub fn default_chain(source: usize, target: usize) -> Vec<usize> {
    if source <= target {
        (source..=target).collect()
    } else {
        (target..=source).rev().collect()
    }
}

fn task_name(chain: &[usize]) -> String {
    chain
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join("->")
}

fn ground_truth(s: &Subject, i: usize) -> Result<&Image> {
    s.sequences.get(i).ok_or_else(|| {
        Error::InvalidArgument(format!("subject {} has no sequence {}", s.id, i + 1))
    })
}

fn quality(pred: &Image, truth: &Image) -> Result<(f64, f64)> {
    let pred = pred.clamp01();
    Ok((psnr(&pred, truth, 1.0)?, ssim_metric(&pred, truth)?))
}

/// Translate `source → target` for every subject and score against the
/// ground-truth target. Sequence indices are 0-based.
///
/// Multi mode follows `chain` (default: every intermediate sequence) and
/// adds the single-step scores and the single − multi deltas.
pub fn eval_translation<F: Scalar>(
    model: &VqcModel<F>,
    subjects: &[Subject],
    source: usize,
    target: usize,
    mode: StepMode,
    chain: Option<&[usize]>,
) -> Result<MetricReport> {
    let chain = match chain {
        Some(c) => c.to_vec(),
        None if mode == StepMode::Multi => default_chain(source, target),
        None => vec![source, target],
    };
    if chain.first() != Some(&source) || chain.last() != Some(&target) {
        return Err(Error::InvalidArgument(format!(
            "chain {chain:?} does not run from {} to {}",
            source + 1,
            target + 1
        )));
    }
    let single = |x: &Image| model.translate(x, source, target, LatentMode::Quantized);
    let mut report = match mode {
        StepMode::Single => MetricReport::new(&["psnr", "ssim"]),
        StepMode::Multi => MetricReport::new(&[
            "psnr",
            "ssim",
            "psnr_single",
            "ssim_single",
            "delta_psnr",
            "delta_ssim",
        ]),
    };
    let task = match mode {
        StepMode::Single => format!("{}->{} single", source + 1, target + 1),
        StepMode::Multi => format!("{} multi", task_name(&chain)),
    };
    for s in subjects {
        let x = ground_truth(s, source)?;
        let truth = ground_truth(s, target)?;
        let (p1, s1) = quality(&single(x)?, truth)?;
        match mode {
            StepMode::Single => report.push(&s.id, &task, vec![p1, s1]),
            StepMode::Multi => {
                let out = model.translate_chain(x, &chain, LatentMode::Quantized)?;
                let (pm, sm) = quality(&out, truth)?;
                report.push(&s.id, &task, vec![pm, sm, p1, s1, p1 - pm, s1 - sm]);
            }
        }
    }
    Ok(report)
}

/// Self-reconstruction `i → i` of every available sequence.
pub fn eval_self_reconstruction<F: Scalar>(
    model: &VqcModel<F>,
    subjects: &[Subject],
) -> Result<MetricReport> {
    let mut report = MetricReport::new(&["psnr", "ssim"]);
    for s in subjects {
        for i in s.sequences.available() {
            let x = ground_truth(s, i)?;
            let (p, q) = quality(&model.translate(x, i, i, LatentMode::Quantized)?, x)?;
            report.push(&s.id, &format!("{}->{}", i + 1, i + 1), vec![p, q]);
        }
    }
    Ok(report)
}

/// Input corruption for [`eval_anti_interference`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// Additive Gaussian noise, clipped to `[0, 1]`.
    Noise { sigma: f64 },
    /// Multiplicative polynomial bias field `exp(alpha · P)`.
    Bias { alpha: f64, scale: f64 },
}

impl Corruption {
    pub fn apply(&self, x: &Image, rng: &mut ChaCha8Rng) -> Result<Image> {
        match *self {
            Corruption::Noise { sigma } => add_noise(x, sigma, rng),
            Corruption::Bias { alpha, scale } => {
                Ok(BiasField::sample(scale, rng).apply(x, alpha).clamp01())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Corruption::Noise { .. } => "noise",
            Corruption::Bias { .. } => "bias",
        }
    }
}

/// Corrupt each available image, self-reconstruct it and compare with the
/// clean image. Columns: reconstruction scores, corrupted-input scores and
/// the PSNR improvement.
pub fn eval_anti_interference<F: Scalar>(
    model: &VqcModel<F>,
    subjects: &[Subject],
    corruption: Corruption,
    seed: u64,
) -> Result<MetricReport> {
    let mut report =
        MetricReport::new(&["psnr", "ssim", "psnr_corrupt", "ssim_corrupt", "delta_psnr"]);
    for s in subjects {
        for i in s.sequences.available() {
            let clean = ground_truth(s, i)?;
            let tag = format!("{}/{}/{}", corruption.name(), s.id, i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
            let bad = corruption.apply(clean, &mut rng)?;
            let (pc, sc) = quality(&bad, clean)?;
            let (pr, sr) = quality(&model.translate(&bad, i, i, LatentMode::Quantized)?, clean)?;
            let task = format!("{} {}->{}", corruption.name(), i + 1, i + 1);
            report.push(&s.id, &task, vec![pr, sr, pc, sc, pr - pc]);
        }
    }
    Ok(report)
}

/// Majority tissue label per codebook entry; `-1` for unobserved codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeProbe {
    pub code_to_label: Vec<i32>,
    pub trained_on: String,
}

/// Count (code, label) co-occurrences over every available sequence of
/// `subject`, with the label map majority-pooled to latent resolution.
pub fn fit_code_probe<F: Scalar>(model: &VqcModel<F>, subject: &Subject) -> Result<CodeProbe> {
    let k = model.config().num_codes;
    let mut counts: Vec<[usize; 256]> = vec![[0; 256]; k];
    for i in subject.sequences.available() {
        let (h, w, idx) = model.code_indices(ground_truth(subject, i)?)?;
        let pooled = subject.labels.downsample_majority(h, w)?;
        for (&c, &l) in idx.iter().zip(&pooled.labels) {
            counts[c][l as usize] += 1;
        }
    }
    let code_to_label = counts
        .iter()
        .map(|row| {
            let (best, n) = row
                .iter()
                .enumerate()
                .fold((0, 0), |acc, (l, &n)| if n > acc.1 { (l, n) } else { acc });
            if n == 0 {
                -1
            } else {
                best as i32
            }
        })
        .collect();
    Ok(CodeProbe {
        code_to_label,
        trained_on: subject.id.clone(),
    })
}

impl CodeProbe {
    /// Control probe: the same label multiset assigned to shuffled codes.
    pub fn permuted(&self, seed: u64) -> CodeProbe {
        let mut code_to_label = self.code_to_label.clone();
        code_to_label.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        CodeProbe {
            code_to_label,
            trained_on: format!("{} (permuted)", self.trained_on),
        }
    }

    /// Label map of `x` at image resolution; unassigned codes → background.
    pub fn predict<F: Scalar>(&self, model: &VqcModel<F>, x: &Image) -> Result<LabelMap> {
        if self.code_to_label.len() != model.config().num_codes {
            return Err(Error::InvalidArgument(format!(
                "probe has {} codes, model has {}",
                self.code_to_label.len(),
                model.config().num_codes
            )));
        }
        let (h, w, idx) = model.code_indices(x)?;
        let labels = idx
            .iter()
            .map(|&c| self.code_to_label[c].max(0) as u8)
            .collect();
        LabelMap {
            height: h,
            width: w,
            labels,
        }
        .upsample(x.height(), x.width())
    }
}

/// Dice per class `1..=lesion_label` for every available sequence of every
/// subject. The last column is the lesion.
pub fn eval_probe<F: Scalar>(
    probe: &CodeProbe,
    model: &VqcModel<F>,
    subjects: &[Subject],
    lesion_label: u8,
) -> Result<MetricReport> {
    let names: Vec<String> = (1..=lesion_label)
        .map(|l| {
            if l == lesion_label {
                "dice_lesion".to_string()
            } else {
                format!("dice_{l}")
            }
        })
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut report = MetricReport::new(&refs);
    for s in subjects {
        for i in s.sequences.available() {
            let pred = probe.predict(model, ground_truth(s, i)?)?;
            let values = (1..=lesion_label)
                .map(|l| {
                    let p: Vec<bool> = pred.labels.iter().map(|&v| v == l).collect();
                    let t: Vec<bool> = s.labels.labels.iter().map(|&v| v == l).collect();
                    dice(&p, &t)
                })
                .collect::<Result<Vec<f64>>>()?;
            report.push(&s.id, &format!("seq{}", i + 1), values);
        }
    }
    Ok(report)
}
