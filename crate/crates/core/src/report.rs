//! End-of-run evaluation: translation, anti-interference and probe reports
//! for a trained model, and the latent-dimension × codebook-size sweep.

use std::fs;
use std::path::Path;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{derive_seed, Dataset, Split, Subject};
use crate::error::{Error, Result};
use crate::eval::{
    eval_anti_interference, eval_probe, eval_self_reconstruction, eval_translation, fit_code_probe,
    CodeProbe, Corruption, MetricReport, StepMode,
};
use crate::model::VqcModel;
use crate::tensor::Scalar;
use crate::trainer::{train, validate, write_csv, TrainOptions};

/// Noise level of the anti-interference evaluation.
pub const EVAL_NOISE_SIGMA: f64 = 0.1;

/// Label of the lesion class in `dataset`.
pub fn lesion_label(dataset: &Dataset) -> u8 {
    (dataset.manifest().generator.n_tissues + 1) as u8
}

/// First validation subject whose label map contains a lesion.
pub fn probe_subject(dataset: &Dataset) -> Result<Subject> {
    let lesion = lesion_label(dataset);
    for entry in dataset.entries(Split::Val) {
        let s = dataset.load(&entry.id)?;
        if s.labels.labels.contains(&lesion) {
            return Ok(s);
        }
    }
    Err(Error::Integrity {
        path: dataset.dir().to_path_buf(),
        detail: "the probe needs a validation subject with a lesion".into(),
    })
}

/// The one-shot probe and its permuted-code control.
pub fn fit_probes<F: Scalar>(
    model: &VqcModel<F>,
    dataset: &Dataset,
    seed: u64,
) -> Result<(CodeProbe, CodeProbe)> {
    let probe = fit_code_probe(model, &probe_subject(dataset)?)?;
    let control = probe.permuted(derive_seed(seed, "probe-control"));
    Ok((probe, control))
}

/// Mean whole-lesion Dice of the probe and of its control on `test`.
pub fn probe_scores<F: Scalar>(
    model: &VqcModel<F>,
    dataset: &Dataset,
    test: &[Subject],
    seed: u64,
) -> Result<(f64, f64)> {
    let (probe, control) = fit_probes(model, dataset, seed)?;
    let lesion = lesion_label(dataset);
    let a = eval_probe(&probe, model, test, lesion)?;
    let b = eval_probe(&control, model, test, lesion)?;
    Ok((
        a.mean("dice_lesion").expect("column"),
        b.mean("dice_lesion").expect("column"),
    ))
}

/// Headline numbers of [`evaluate_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Validation self-reconstruction PSNR.
    pub val_psnr: f64,
    pub test_self_psnr: f64,
    /// Test 1 → 4 PSNR of the trained model, single-step and chained.
    pub single_1to4: f64,
    pub multi_1to4: f64,
    /// Test 1 → 4 single-step PSNR of the untrained model.
    pub untrained_1to4: f64,
    pub noise_psnr: f64,
    pub noise_corrupt_psnr: f64,
    pub noise_delta: f64,
    pub dice_lesion: f64,
    pub dice_lesion_control: f64,
}

impl RunSummary {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("val_psnr", self.val_psnr),
            ("test_self_psnr", self.test_self_psnr),
            ("single_1to4_psnr", self.single_1to4),
            ("multi_1to4_psnr", self.multi_1to4),
            ("untrained_1to4_psnr", self.untrained_1to4),
            ("noise_psnr", self.noise_psnr),
            ("noise_corrupt_psnr", self.noise_corrupt_psnr),
            ("noise_delta_psnr", self.noise_delta),
            ("dice_lesion", self.dice_lesion),
            ("dice_lesion_control", self.dice_lesion_control),
        ]
    }
}

/// Evaluate a trained model on the dataset and write one CSV pair per
/// report into `out`, plus `summary.csv`. `untrained` configures the
/// baseline model for the 1 → 4 comparison.
pub fn evaluate_run<F: Scalar>(
    model: &VqcModel<F>,
    untrained: &ModelConfig,
    dataset: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let val = dataset.load_split(Split::Val)?;
    let test = dataset.load_split(Split::Test)?;
    let (first, last) = (0, dataset.num_sequences() - 1);

    let self_val = eval_self_reconstruction(model, &val)?;
    self_val.write(out, "self_val")?;
    let self_test = eval_self_reconstruction(model, &test)?;
    self_test.write(out, "self_test")?;
    let tr = eval_translation(model, &test, first, last, StepMode::Multi, None)?;
    tr.write(out, "translate")?;
    let baseline = VqcModel::<F>::new(untrained.clone())?;
    let base = eval_translation(&baseline, &test, first, last, StepMode::Single, None)?;
    base.write(out, "translate_untrained")?;
    let noise = eval_anti_interference(
        model,
        &test,
        Corruption::Noise {
            sigma: EVAL_NOISE_SIGMA,
        },
        seed,
    )?;
    noise.write(out, "noise")?;
    let (probe, control) = fit_probes(model, dataset, seed)?;
    let lesion = lesion_label(dataset);
    let pr = eval_probe(&probe, model, &test, lesion)?;
    pr.write(out, "probe")?;
    let pc = eval_probe(&control, model, &test, lesion)?;
    pc.write(out, "probe_control")?;

    let m = |r: &MetricReport, c: &str| r.mean(c).expect("column");
    let summary = RunSummary {
        val_psnr: validate(model, &val)?.0,
        test_self_psnr: m(&self_test, "psnr"),
        single_1to4: m(&tr, "psnr_single"),
        multi_1to4: m(&tr, "psnr"),
        untrained_1to4: m(&base, "psnr"),
        noise_psnr: m(&noise, "psnr"),
        noise_corrupt_psnr: m(&noise, "psnr_corrupt"),
        noise_delta: m(&noise, "delta_psnr"),
        dice_lesion: m(&pr, "dice_lesion"),
        dice_lesion_control: m(&pc, "dice_lesion"),
    };
    let rows: Vec<String> = summary
        .rows()
        .iter()
        .map(|(k, v)| format!("{k},{v}"))
        .collect();
    write_csv(&out.join("summary.csv"), "metric,value", &rows)?;
    Ok(summary)
}

/// One row of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub latent_dim: usize,
    pub num_codes: usize,
    pub psnr_1to4: f64,
    pub ssim_1to4: f64,
    pub self_psnr: f64,
    pub dice_lesion: f64,
    pub dice_lesion_control: f64,
}

pub const SWEEP_HEADER: &str =
    "latent_dim,num_codes,psnr_1to4,ssim_1to4,self_psnr,dice_lesion,dice_lesion_control";

impl SweepRow {
    /// Score a trained model on the test split.
    pub fn measure<F: Scalar>(model: &VqcModel<F>, dataset: &Dataset, seed: u64) -> Result<Self> {
        let test = dataset.load_split(Split::Test)?;
        let last = dataset.num_sequences() - 1;
        let tr = eval_translation(model, &test, 0, last, StepMode::Single, None)?;
        let own = eval_self_reconstruction(model, &test)?;
        let (dl, dc) = probe_scores(model, dataset, &test, seed)?;
        Ok(Self {
            latent_dim: model.config().latent_dim,
            num_codes: model.config().num_codes,
            psnr_1to4: tr.mean("psnr").expect("column"),
            ssim_1to4: tr.mean("ssim").expect("column"),
            self_psnr: own.mean("psnr").expect("column"),
            dice_lesion: dl,
            dice_lesion_control: dc,
        })
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.latent_dim,
            self.num_codes,
            self.psnr_1to4,
            self.ssim_1to4,
            self.self_psnr,
            self.dice_lesion,
            self.dice_lesion_control
        )
    }
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let lines: Vec<String> = rows.iter().map(SweepRow::csv).collect();
    write_csv(path, SWEEP_HEADER, &lines)
}

/// Train one model per `(D, K)` under `out/D{d}_K{k}` and write
/// `out/sweep.csv` after each.
pub fn sweep(
    dataset: &Dataset,
    dims: &[usize],
    codes: &[usize],
    cfg: &TrainConfig,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rows = Vec::new();
    for &d in dims {
        for &k in codes {
            let mut c = cfg.clone();
            c.model.latent_dim = d;
            c.model.num_codes = k;
            let run = train(dataset, &c, &out.join(format!("D{d}_K{k}")), TrainOptions::default())?;
            rows.push(SweepRow::measure(&run.model, dataset, c.seed)?);
            write_sweep_csv(&out.join("sweep.csv"), &rows)?;
        }
    }
    Ok(rows)
}
