//! `vqc`: dataset generation, training, translation, evaluation,
//! augmentation, probing and sweeps from the command line.
//!
//! Sequence numbers on the command line are 1-based.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqc_core::augment::{
    add_noise, augment_cross_sequence, augment_random_domain, bias_field, gamma_transform,
};
use vqc_core::data::{generate_dataset, read_image, write_image, Dataset, DatasetConfig, Split};
use vqc_core::eval::{default_chain, eval_probe, eval_translation, fit_code_probe, StepMode};
use vqc_core::report::{evaluate_run, fit_probes, lesion_label, sweep};
use vqc_core::trainer::{load_model, train, TrainOptions, Validation};
use vqc_core::{Error, LatentMode, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "vqc", version, about = "Multi-sequence image translation through a vector-quantized common latent space")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON training config; unspecified keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.num_codes=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the effective config as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Also render SVG plots next to the CSV outputs.
    #[arg(long, global = true)]
    plot: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with its manifest.
    GenData(GenData),
    /// Train a model on a dataset's training split.
    Train(Train),
    /// Translate one `.vqt` image between sequences.
    Translate(Translate),
    /// Evaluate a checkpoint and write metric reports.
    Eval(Eval),
    /// Apply one augmentation with explicit parameters.
    Augment(Augment),
    /// Fit the one-shot code probe and score it on the test split.
    Probe(Probe),
    /// Train and score a latent-dimension x codebook-size grid.
    Sweep(Sweep),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Image height and width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    tissues: Option<usize>,
    #[arg(long)]
    lesion_probability: Option<f64>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from `<out>/latest.vqcm`.
    #[arg(long)]
    resume: bool,
    /// Stop with a checkpoint after this many completed steps.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Steps {
    Single,
    Multi,
}

#[derive(Args, Debug)]
struct Translate {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    source: usize,
    #[arg(long)]
    target: usize,
    #[arg(long, value_enum, default_value_t = Steps::Single)]
    steps: Steps,
    /// Explicit chain for multi-step translation, e.g. `1,3,4`.
    #[arg(long, value_delimiter = ',')]
    chain: Vec<usize>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Extra translation report `source -> target` on the test split.
    #[arg(long, requires = "target")]
    source: Option<usize>,
    #[arg(long, requires = "source")]
    target: Option<usize>,
    #[arg(long, value_enum, default_value_t = Steps::Single)]
    steps: Steps,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Transform {
    Gamma,
    Noise,
    Bias,
    /// Translate to another sequence with a checkpoint.
    Cross,
    /// Decode with a random style code from a checkpoint.
    RandomDomain,
}

#[derive(Args, Debug)]
struct Augment {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    transform: Transform,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    scale: f64,
    /// Checkpoint for the model-based transforms.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sequence of the input image for `cross`.
    #[arg(long)]
    source: Option<usize>,
}

#[derive(Args, Debug)]
struct Probe {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Subject to fit on; defaults to the first validation subject with a
    /// lesion.
    #[arg(long)]
    fit: Option<String>,
}

#[derive(Args, Debug)]
struct Sweep {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "3")]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,256")]
    codes: Vec<usize>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. }) => EXIT_NUMERIC,
        Some(Error::Config(_) | Error::InvalidArgument(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {}", describe(&error));
            ExitCode::from(code)
        }
    }
}

/// The error chain on one line, omitting causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn usage(msg: String) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: anyhow!(msg),
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let g = &cli.global;
    let lift = |error: anyhow::Error| Failure {
        code: exit_code(&error),
        error,
    };
    let cfg = effective_config(g).map_err(lift)?;
    if g.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let need = |p: &Option<PathBuf>, flag: &str| -> std::result::Result<PathBuf, Failure> {
        p.clone().ok_or_else(|| usage(format!("--{flag} is required")))
    };
    let Some(command) = &cli.command else {
        return Err(usage("a subcommand is required; see `vqc --help`".into()));
    };
    let result = match command {
        Command::GenData(a) => gen_data(a, g, &need(&a.out, "out")?),
        Command::Train(a) => run_train(a, g, &cfg, &need(&a.data, "data")?, &need(&a.out, "out")?),
        Command::Translate(a) => translate(a),
        Command::Eval(a) => run_eval(a, g),
        Command::Augment(a) => run_augment(a, g),
        Command::Probe(a) => run_probe(a, g),
        Command::Sweep(a) => run_sweep(a, g, &cfg, &need(&a.data, "data")?, &need(&a.out, "out")?),
    };
    result.map_err(lift)
}

fn effective_config(g: &Global) -> Result<TrainConfig> {
    let base = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading --config {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("--config {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    base.with_overrides(&overrides).context("--set")
}

/// Convert a 1-based sequence number from flag `flag` to an index.
fn sequence(n: usize, count: usize, flag: &str) -> Result<usize> {
    if n == 0 || n > count {
        return Err(Error::InvalidArgument(format!("--{flag} {n} is not a sequence number in 1..={count}")).into());
    }
    Ok(n - 1)
}

fn gen_data(a: &GenData, g: &Global, out: &Path) -> Result<()> {
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        seed: g.seed.unwrap_or(d.seed),
        n_train: a.n_train.unwrap_or(d.n_train),
        n_val: a.n_val.unwrap_or(d.n_val),
        n_test: a.n_test.unwrap_or(d.n_test),
        height: a.size.unwrap_or(d.height),
        width: a.size.unwrap_or(d.width),
        n_tissues: a.tissues.unwrap_or(d.n_tissues),
        lesion_probability: a.lesion_probability.unwrap_or(d.lesion_probability),
    };
    let manifest = generate_dataset(out, &cfg)?;
    println!(
        "wrote {} subjects ({} sequences) to {}",
        manifest.subjects.len(),
        manifest.num_sequences,
        out.display()
    );
    Ok(())
}

fn run_train(a: &Train, g: &Global, cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let mut progress = |v: &Validation| {
        eprintln!(
            "step {:>6}  val psnr {:6.2} dB  ssim {:.4}  codes used {}",
            v.step, v.psnr, v.ssim, v.used_codes
        );
    };
    let run = train(
        &ds,
        cfg,
        out,
        TrainOptions {
            resume: a.resume,
            stop_after: a.stop_after,
            on_validation: Some(&mut progress),
        },
    )?;
    if g.plot {
        plot::training_curves(out)?;
    }
    println!("trained to step {}; checkpoint {}", run.step, run.checkpoint.display());
    Ok(())
}

fn translate(a: &Translate) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let n = model.config().num_sequences;
    let s = sequence(a.source, n, "source")?;
    let t = sequence(a.target, n, "target")?;
    let x = read_image(&a.input)?;
    let y = match a.steps {
        Steps::Single => model.translate(&x, s, t, LatentMode::Quantized)?,
        Steps::Multi => {
            let chain = if a.chain.is_empty() {
                default_chain(s, t)
            } else {
                a.chain.iter().map(|&c| sequence(c, n, "chain")).collect::<Result<_>>()?
            };
            if chain.first() != Some(&s) || chain.last() != Some(&t) {
                bail!(Error::InvalidArgument(format!(
                    "--chain must start at --source {} and end at --target {}",
                    a.source, a.target
                )));
            }
            model.translate_chain(&x, &chain, LatentMode::Quantized)?
        }
    };
    write_image(&a.out, &y.clamp01())?;
    Ok(())
}

fn run_eval(a: &Eval, g: &Global) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let seed = g.seed.unwrap_or(1);
    let summary = evaluate_run(&model, model.config(), &ds, seed, &a.out)?;
    for (k, v) in summary.rows() {
        println!("{k:<22} {v:.4}");
    }
    if let (Some(s), Some(t)) = (a.source, a.target) {
        let n = model.config().num_sequences;
        let (s, t) = (sequence(s, n, "source")?, sequence(t, n, "target")?);
        let mode = match a.steps {
            Steps::Single => StepMode::Single,
            Steps::Multi => StepMode::Multi,
        };
        let test = ds.load_split(Split::Test)?;
        let r = eval_translation(&model, &test, s, t, mode, None)?;
        r.write(&a.out, &format!("translate_{}_{}", s + 1, t + 1))?;
        println!("{}->{} psnr {:.4}", s + 1, t + 1, r.mean("psnr").unwrap_or(f64::NAN));
    }
    Ok(())
}

fn run_augment(a: &Augment, g: &Global) -> Result<()> {
    let x = read_image(&a.input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.unwrap_or(0));
    let model = || -> Result<_> {
        let p = a.checkpoint.as_ref().ok_or_else(|| {
            Error::InvalidArgument("--checkpoint is required for model-based transforms".into())
        })?;
        Ok(load_model(p)?)
    };
    let y = match a.transform {
        Transform::Gamma => gamma_transform(&x, a.gamma)?,
        Transform::Noise => add_noise(&x, a.sigma, &mut rng)?,
        Transform::Bias => bias_field(&x, a.alpha, a.scale, &mut rng)?,
        Transform::Cross => {
            let m = model()?;
            let n = m.config().num_sequences;
            let s = a
                .source
                .ok_or_else(|| Error::InvalidArgument("--source is required for cross".into()))?;
            augment_cross_sequence(&x, sequence(s, n, "source")?, &m, &mut rng)?
        }
        Transform::RandomDomain => augment_random_domain(&x, &model()?, &mut rng)?,
    };
    write_image(&a.out, &y)?;
    Ok(())
}

fn run_probe(a: &Probe, g: &Global) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let ds = Dataset::open(&a.data)?;
    let seed = g.seed.unwrap_or(1);
    let (probe, control) = match &a.fit {
        Some(id) => {
            let p = fit_code_probe(&model, &ds.load(id)?)?;
            let c = p.permuted(vqc_core::data::derive_seed(seed, "probe-control"));
            (p, c)
        }
        None => fit_probes(&model, &ds, seed)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let test = ds.load_split(Split::Test)?;
    let lesion = lesion_label(&ds);
    let r = eval_probe(&probe, &model, &test, lesion)?;
    r.write(&a.out, "probe")?;
    let c = eval_probe(&control, &model, &test, lesion)?;
    c.write(&a.out, "probe_control")?;
    let mapping: Vec<String> = probe
        .code_to_label
        .iter()
        .enumerate()
        .map(|(k, l)| format!("{k},{l}"))
        .collect();
    let p = a.out.join("probe_codes.csv");
    fs::write(&p, format!("code,label\n{}\n", mapping.join("\n")))
        .with_context(|| format!("writing {}", p.display()))?;
    println!(
        "fitted on {}: lesion Dice {:.4}, permuted control {:.4}",
        probe.trained_on,
        r.mean("dice_lesion").unwrap_or(f64::NAN),
        c.mean("dice_lesion").unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run_sweep(a: &Sweep, g: &Global, cfg: &TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data)?;
    let rows = sweep(&ds, &a.dims, &a.codes, cfg, out)?;
    for r in &rows {
        println!(
            "D={} K={}: 1->N psnr {:.2}, self psnr {:.2}, lesion Dice {:.3} (control {:.3})",
            r.latent_dim, r.num_codes, r.psnr_1to4, r.self_psnr, r.dice_lesion, r.dice_lesion_control
        );
    }
    if g.plot {
        plot::sweep(out)?;
    }
    Ok(())
}
