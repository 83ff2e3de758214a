//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Training artefacts are kept under
//! `<target>/tmp/acceptance` for inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqc_core::augment::{
    add_noise, bias_field, gamma_transform, intensity_composite, maybe_augment, AugmentBranch,
};
use vqc_core::data::{generate_dataset, Dataset, DatasetConfig};
use vqc_core::eval::{dice, psnr, psnr_from_mse, ssim_metric};
use vqc_core::graph::{Frozen, Graph};
use vqc_core::losses::{consistency_loss, rec_loss, total_loss, PerceptualExtractor, TrainInputs};
use vqc_core::report::{evaluate_run, write_sweep_csv, RunSummary, SweepRow};
use vqc_core::trainer::{train, TrainOptions};
use vqc_core::{
    estimate_vqc, quantize, sample_vqc, AugmentConfig, Codebook, Image, LatentGrid, LossWeights,
    ModelConfig, ScaleMode, Tensor, TrainConfig, VqcModel, VqcStats,
};

type R<T> = Result<T, Box<dyn std::error::Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).expect("shape")
}

fn vq_oracle() -> R<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut failures = 0;
    for _ in 0..200 {
        let k = rng.random_range(2..=64usize);
        let d = rng.random_range(1..=8usize);
        let (h, w) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let table: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cb = Codebook::new(Tensor::from_vec(&[k, d], table.clone())?)?;
        let z: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let q = quantize(&LatentGrid::continuous(h, w, d, z.clone())?, &cb)?;
        let idx = q.indices().expect("quantized grid has indices");
        let mut ok = true;
        for p in 0..h * w {
            let v = &z[p * d..(p + 1) * d];
            let dist = |i: usize| -> f64 {
                table[i * d..(i + 1) * d]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            let best = (0..k)
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .expect("k >= 1");
            ok &= idx[p] == best;
            ok &= q.vector(p) == cb.row(idx[p]);
            ok &= (0..k).all(|i| dist(idx[p]) <= dist(i));
        }
        let again = quantize(&q, &cb)?;
        ok &= again.indices() == q.indices() && again.values() == q.values();
        if !ok {
            failures += 1;
        }
    }
    Ok(outcome(
        failures == 0,
        format!("{} of 200 cases match brute force, are idempotent and land on codebook rows", 200 - failures),
    ))
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            latent_dim: 2,
            num_codes: 8,
            num_sequences: 3,
            base_channels: 3,
            downsample_stages: 1,
            mapping_hidden: 4,
            seed: 5,
        },
        precision: vqc_core::Precision::Check64,
        ..TrainConfig::default()
    }
}

fn smooth_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
    let (a, b, c) = (
        rng.random_range(0.2..0.8),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
    );
    let px = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
            (a + b * y + c * x + 0.05 * (7.0 * x * y).sin()) as f32
        })
        .collect();
    Image::new(n, n, px).expect("shape")
}

/// Central differences of the full objective; stop-gradient and
/// straight-through offsets are frozen at the base point.
fn objective_gradients() -> R<(usize, f64, Vec<f64>)> {
    const H: f64 = 1e-6;
    let cfg = tiny_train_config();
    let model = VqcModel::<f64>::new(cfg.model.clone())?;
    let extractor = PerceptualExtractor::<f64>::fixed();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let images: Vec<Image> = (0..3).map(|_| smooth_image(&mut r, 8)).collect();
    let refs: Vec<&Image> = images.iter().collect();
    let seqs = [0usize, 1, 2];
    let batch = TrainInputs {
        sequences: &seqs,
        inputs: &refs,
        targets: &refs,
    };
    let eval = |m: &VqcModel<f64>, frozen: Option<Frozen<f64>>| {
        let mut g = frozen.map_or_else(Graph::new, Graph::replaying);
        let p = m.params().bind(&mut g, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = total_loss(&mut g, m, &p, &extractor, &batch, &cfg, &mut rng).expect("loss");
        (g, p, out)
    };
    let (g, p, out) = eval(&model, None);
    let frozen = g.frozen();
    let grads = g.backward(out.loss);
    let total = model.params().num_scalars();
    let mut pick = ChaCha8Rng::seed_from_u64(17);
    let (mut within, mut worst, mut checked) = (0, 0.0f64, 0);
    let mut magnitudes = Vec::new();
    while checked < 20 {
        let mut flat = pick.random_range(0..total);
        let mut pid = 0;
        while flat >= model.params().tensors()[pid].numel() {
            flat -= model.params().tensors()[pid].numel();
            pid += 1;
        }
        let analytic = grads.get(p.vars()[pid]).map_or(0.0, |t| t.data()[flat]);
        let perturbed = |delta: f64| {
            let mut m = model.clone();
            m.params_mut().tensors_mut()[pid].data_mut()[flat] += delta;
            let (g, _, o) = eval(&m, Some(frozen.clone()));
            (g.value(o.loss).item(), o.indices)
        };
        let (lp, ip) = perturbed(H);
        let (lm, im) = perturbed(-H);
        if ip != out.indices || im != out.indices {
            continue;
        }
        checked += 1;
        let numeric = (lp - lm) / (2.0 * H);
        magnitudes.push(analytic.abs());
        let e = rel_err(analytic, numeric);
        worst = worst.max(e);
        if e < 1e-3 || (analytic - numeric).abs() < 1e-7 {
            within += 1;
        }
    }
    Ok((within, worst, magnitudes))
}

/// d/dz_e of a downstream scalar through the straight-through node equals
/// the finite-difference derivative taken at the quantized value.
fn straight_through_identity() -> R<(usize, f64)> {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cases = 10;
    let (mut ok, mut worst) = (0, 0.0f64);
    for _ in 0..cases {
        let n = 6;
        let ze: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zq: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = |v: &[f64]| -> f64 { v.iter().zip(&w).map(|(a, b)| (a * b).exp()).sum() };
        let mut g = Graph::<f64>::new();
        let zv = g.param(Tensor::from_vec(&[n], ze)?);
        let st = g.straight_through(zv, Tensor::from_vec(&[n], zq.clone())?);
        let forward_ok = g.value(st).data() == &zq[..];
        let wv = g.constant(Tensor::from_vec(&[n], w.clone())?);
        let m = g.mul(st, wv);
        let e = g.exp(m);
        let l = g.sum(e);
        let grads = g.backward(l);
        let analytic = grads.get(zv).expect("gradient").data().to_vec();
        let mut case_ok = forward_ok;
        for i in 0..n {
            let mut up = zq.clone();
            up[i] += H;
            let mut down = zq.clone();
            down[i] -= H;
            let e = rel_err(analytic[i], (f(&up) - f(&down)) / (2.0 * H));
            worst = worst.max(e);
            case_ok &= e < 1e-3;
        }
        if case_ok {
            ok += 1;
        }
    }
    Ok((ok, worst))
}

fn gradient_suite() -> R<Outcome> {
    let (within, worst, mut mags) = objective_gradients()?;
    let (st_ok, st_worst) = straight_through_identity()?;
    mags.sort_by(f64::total_cmp);
    let nonzero = mags.iter().filter(|m| **m > 1e-7).count();
    Ok(outcome(
        within == 20 && st_ok == 10,
        format!(
            "{within}/20 objective gradients within 1e-3 (worst rel err {worst:.2e}; \
             |grad| from {:.1e} to {:.1e}, {nonzero} above the 1e-7 agreement floor); \
             straight-through identity {st_ok}/10 (worst {st_worst:.2e})",
            mags[0],
            mags[mags.len() - 1]
        ),
    ))
}

fn statistics() -> R<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let count = rng.random_range(2..=4usize);
        let (h, w, d) = (
            rng.random_range(1..=5usize),
            rng.random_range(1..=5usize),
            rng.random_range(1..=4usize),
        );
        let grids: Vec<LatentGrid<f64>> = (0..count)
            .map(|_| {
                let v = (0..h * w * d).map(|_| rng.random_range(-2.0..2.0)).collect();
                LatentGrid::continuous(h, w, d, v).expect("grid")
            })
            .collect();
        let refs: Vec<&LatentGrid<f64>> = grids.iter().collect();
        let stats = estimate_vqc(&refs)?;
        for e in 0..h * w * d {
            let xs: Vec<f64> = grids.iter().map(|g| g.values()[e]).collect();
            let mean = xs.iter().sum::<f64>() / count as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
            worst = worst.max((stats.mu[e] - mean).abs()).max((stats.var[e] - var).abs());
        }
    }
    let unit = VqcStats {
        height: 1,
        width: 1,
        dim: 1,
        mu: vec![0.0],
        var: vec![1.0],
        count: 2,
    };
    let draws: Vec<f64> = (0..10_000)
        .map(|_| sample_vqc(&unit, &mut rng, ScaleMode::Variance).map(|z| z.values()[0]))
        .collect::<Result<_, _>>()?;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mu: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let frozen = VqcStats {
        height: 2,
        width: 2,
        dim: 3,
        mu: mu.clone(),
        var: vec![0.0; 12],
        count: 1,
    };
    let exact = [ScaleMode::Variance, ScaleMode::Std]
        .iter()
        .all(|&m| sample_vqc(&frozen, &mut rng, m).map(|z| z.values() == &mu[..]).unwrap_or(false));
    let pass = worst <= 1e-6 && mean.abs() <= 0.05 && (var - 1.0).abs() <= 0.1 && exact;
    Ok(outcome(
        pass,
        format!(
            "oracle max error {worst:.1e} on 100 cases; 10k draws mean {mean:+.4} var {var:.4}; \
             var=0 gives mu exactly: {exact}"
        ),
    ))
}

fn metrics() -> R<Outcome> {
    let p = psnr_from_mse(0.01, 1.0);
    // 64 of 100 pixels off by 0.125: MSE = 0.01 exactly.
    let a = Image::filled(10, 10, 0.5);
    let mut b = a.clone();
    b.pixels_mut()[..64].iter_mut().for_each(|v| *v = 0.625);
    let p_img = psnr(&a, &b, 1.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random_image(&mut rng, 32, 32);
    let s = ssim_metric(&x, &x)?;
    let m: Vec<bool> = (0..64).map(|_| rng.random::<bool>()).collect();
    let inv: Vec<bool> = m.iter().map(|v| !v).collect();
    let empty = vec![false; 64];
    let half = [true, true, true, true, false, false, false, false];
    let shifted = [false, false, true, true, true, true, false, false];
    let dice_ok = dice(&m, &m)? == 1.0
        && dice(&m, &inv)? == 0.0
        && dice(&empty, &empty)? == 1.0
        && dice(&m, &empty)? == 0.0
        && dice(&half, &shifted)? == 0.5
        && dice(&m, &shifted.repeat(8))? == dice(&shifted.repeat(8), &m)?;
    let pass = (p - 20.0).abs() <= 1e-9 && (p_img - 20.0).abs() <= 1e-9 && (s - 1.0).abs() <= 1e-6 && dice_ok;
    Ok(outcome(
        pass,
        format!(
            "psnr(MSE 0.01) = {p:.12} (image form {p_img:.12}); ssim(x,x) = {s:.9}; Dice identities: {dice_ok}"
        ),
    ))
}

fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1024i32..=1024) as f64 / 256.0
}

fn loss_identities() -> R<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = random_image(&mut rng, 32, 32);
    let rec = rec_loss(&x, &x, &LossWeights::default(), &PerceptualExtractor::<f64>::fixed())?;

    let z: Vec<f64> = (0..16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = LatentGrid::continuous(4, 4, 3, z)?;
    let mask = vec![true; 16];
    let a_zero = consistency_loss(&z, &z, &mask, 0.07)?.mse;

    let tau = 0.07f64;
    let orth = LatentGrid::continuous(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    let got = consistency_loss(&orth, &orth, &[true, true], tau)?.nce.unwrap_or(f64::NAN);
    let e = (1.0 / tau).exp();
    let want = 2.0 * -(e / (e + 1.0)).ln();

    let (h, w, d) = (4, 4, 3);
    let z1: Vec<f64> = (0..h * w * d).map(|_| dyadic(&mut rng)).collect();
    let z2: Vec<f64> = (0..h * w * d).map(|_| dyadic(&mut rng)).collect();
    let mut m: Vec<bool> = (0..h * w).map(|_| rng.random::<bool>()).collect();
    m[0] = true;
    m[1] = true;
    let base = consistency_loss(
        &LatentGrid::continuous(h, w, d, z1.clone())?,
        &LatentGrid::continuous(h, w, d, z2.clone())?,
        &m,
        tau,
    )?
    .nce;
    let scaled = consistency_loss(
        &LatentGrid::continuous(h, w, d, z1.iter().map(|v| v * 3.0).collect())?,
        &LatentGrid::continuous(h, w, d, z2.iter().map(|v| v * 3.0).collect())?,
        &m,
        tau,
    )?
    .nce;
    let pass = rec.total == 0.0 && a_zero == 0.0 && (got - want).abs() <= 1e-6 && base.is_some() && base == scaled;
    Ok(outcome(
        pass,
        format!(
            "rec(x,x) = {}; A(z,z) = {a_zero}; contrastive {got:.9} vs closed form {want:.9}; \
             x3 scaling exact: {}",
            rec.total,
            base.is_some() && base == scaled
        ),
    ))
}

fn augmentation() -> R<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let model = VqcModel::<f32>::new(ModelConfig {
        latent_dim: 2,
        num_codes: 8,
        num_sequences: 4,
        base_channels: 4,
        downsample_stages: 2,
        mapping_hidden: 8,
        seed: 1,
    })?;
    let mut identities = true;
    for _ in 0..20 {
        let x = random_image(&mut rng, 16, 16);
        identities &= gamma_transform(&x, 1.0)? == x;
        identities &= add_noise(&x, 0.0, &mut rng)? == x;
        identities &= bias_field(&x, 0.0, 0.2, &mut rng)? == x;
    }
    let always = AugmentConfig {
        replace_probability: 1.0,
        ..AugmentConfig::default()
    };
    let harsh = AugmentConfig {
        gamma_range: [0.5, 2.0],
        noise_sigma_range: [0.0, 0.5],
        bias_alpha_range: [0.0, 4.0],
        ..always.clone()
    };
    let mut in_range = 0;
    for i in 0..1000 {
        let x = random_image(&mut rng, 16, 16);
        let (y, _) = maybe_augment(&x, i % 4, &model, &always, &mut rng)?;
        let z = intensity_composite(&x, &harsh, &mut rng)?;
        if y.is_unit_range() && z.is_unit_range() {
            in_range += 1;
        }
    }
    let x = random_image(&mut rng, 16, 16);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..3000 {
        let (_, b) = maybe_augment(&x, i % 4, &model, &always, &mut rng)?;
        *counts.entry(format!("{b:?}")).or_default() += 1;
    }
    let mut identity = 0usize;
    for i in 0..3000 {
        let (_, b) = maybe_augment(&x, i % 4, &model, &AugmentConfig::default(), &mut rng)?;
        if b == AugmentBranch::Identity {
            identity += 1;
        }
    }
    let branches_ok = ["Intensity", "CrossSequence", "RandomDomain"]
        .iter()
        .all(|k| counts.get(*k).is_some_and(|&n| n.abs_diff(1000) <= 100));
    let identity_ok = identity.abs_diff(1500) <= 150;
    Ok(outcome(
        identities && in_range == 1000 && branches_ok && identity_ok,
        format!(
            "identities: {identities}; {in_range}/1000 outputs in [0,1]; branches over 3000 trials {counts:?}; \
             untouched at p=0.5: {identity}/3000"
        ),
    ))
}

fn csv_files(root: &Path) -> R<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.insert(p.strip_prefix(root)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

struct Runs {
    main: RunSummary,
    ablation: RunSummary,
    sweep: Vec<SweepRow>,
    identical_csvs: (usize, Vec<PathBuf>),
    loss_trace_equal: bool,
    checkpoints_equal: bool,
}

fn stamp(t: &Instant, msg: &str) {
    eprintln!("[{:>6.1}s] {msg}", t.elapsed().as_secs_f64());
}

fn training_runs(root: &Path, t: &Instant) -> R<Runs> {
    let data = root.join("data");
    generate_dataset(&data, &DatasetConfig::default())?;
    let ds = Dataset::open(&data)?;
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let cfg = TrainConfig::from_json(&fs::read_to_string(&preset)?)?;
    let half = cfg.total_steps / 2 + cfg.log_every / 2;

    stamp(t, "training run A");
    let a_dir = root.join("run_a");
    let a = train(&ds, &cfg, &a_dir, TrainOptions::default())?;
    let main = evaluate_run(&a.model, &cfg.model, &ds, cfg.seed, &a_dir.join("eval"))?;

    stamp(t, &format!("training run B, interrupted after step {half}"));
    let b_dir = root.join("run_b");
    let stopped = train(
        &ds,
        &cfg,
        &b_dir,
        TrainOptions {
            stop_after: Some(half),
            ..TrainOptions::default()
        },
    )?;
    assert_eq!(stopped.step, half);
    stamp(t, "resuming run B");
    let b = train(
        &ds,
        &cfg,
        &b_dir,
        TrainOptions {
            resume: true,
            ..TrainOptions::default()
        },
    )?;
    evaluate_run(&b.model, &cfg.model, &ds, cfg.seed, &b_dir.join("eval"))?;

    stamp(t, "training the no-augmentation ablation");
    let mut no_aug = cfg.clone();
    no_aug.augment.replace_probability = 0.0;
    let n_dir = root.join("run_no_aug");
    let n = train(&ds, &no_aug, &n_dir, TrainOptions::default())?;
    let ablation = evaluate_run(&n.model, &no_aug.model, &ds, no_aug.seed, &n_dir.join("eval"))?;

    stamp(t, "training the K=16 sweep point");
    let mut small = cfg.clone();
    small.model.num_codes = 16;
    let s_dir = root.join("sweep").join(format!("D{}_K16", small.model.latent_dim));
    let s = train(&ds, &small, &s_dir, TrainOptions::default())?;
    let sweep = vec![
        SweepRow::measure(&s.model, &ds, small.seed)?,
        SweepRow::measure(&a.model, &ds, cfg.seed)?,
    ];
    write_sweep_csv(&root.join("sweep").join("sweep.csv"), &sweep)?;
    stamp(t, "training done");

    let fa = csv_files(&a_dir)?;
    let fb = csv_files(&b_dir)?;
    let differing: Vec<PathBuf> = fa
        .keys()
        .chain(fb.keys())
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect();
    Ok(Runs {
        main,
        ablation,
        sweep,
        identical_csvs: (fa.len(), differing),
        loss_trace_equal: fs::read(&a.loss_csv)? == fs::read(&b.loss_csv)?,
        checkpoints_equal: fs::read(&a.checkpoint)? == fs::read(&b.checkpoint)?,
    })
}

fn main() {
    let t = Instant::now();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).expect("acceptance directory");

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut run = |n: u32, title: &'static str, f: &dyn Fn() -> R<Outcome>| {
        let o = f().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        results.push((n, title, o));
    };
    run(1, "VQ oracle", &vq_oracle);
    run(2, "gradient suite", &gradient_suite);
    run(3, "statistics oracle", &statistics);
    run(4, "metric closed forms", &metrics);
    run(5, "loss identities", &loss_identities);
    run(6, "augmentation identities", &augmentation);

    match training_runs(&root, &t) {
        Ok(r) => {
            let m = &r.main;
            let gain = m.single_1to4 - m.untrained_1to4;
            results.push((
                7,
                "training smoke",
                outcome(
                    m.val_psnr >= 28.0 && gain >= 8.0 && m.single_1to4 >= m.multi_1to4 - 0.5,
                    format!(
                        "(a) val self-recon {:.2} dB (>= 28); (b) 1->4 single {:.2} dB vs untrained {:.2} dB, \
                         gain {gain:.2} (>= 8); (c) single {:.2} vs multi {:.2} dB (>= multi - 0.5)",
                        m.val_psnr, m.single_1to4, m.untrained_1to4, m.single_1to4, m.multi_1to4
                    ),
                ),
            ));
            let a = &r.ablation;
            results.push((
                8,
                "anti-interference",
                outcome(
                    m.noise_delta >= 3.0 && a.noise_delta < m.noise_delta,
                    format!(
                        "sigma=0.1: recon {:.2} dB vs corrupted {:.2} dB, gain {:.2} (>= 3); \
                         w/o-Aug gain {:.2} (< {:.2})",
                        m.noise_psnr, m.noise_corrupt_psnr, m.noise_delta, a.noise_delta, m.noise_delta
                    ),
                ),
            ));
            let sweep: Vec<String> = r
                .sweep
                .iter()
                .map(|s| format!("K={} lesion Dice {:.3} self-recon {:.2} dB", s.num_codes, s.dice_lesion, s.self_psnr))
                .collect();
            results.push((
                9,
                "code probe",
                outcome(
                    m.dice_lesion >= m.dice_lesion_control + 0.2,
                    format!(
                        "lesion Dice {:.3} vs permuted control {:.3} (margin >= 0.2); sweep report written ({})",
                        m.dice_lesion,
                        m.dice_lesion_control,
                        sweep.join(", ")
                    ),
                ),
            ));
            let (n, differing) = &r.identical_csvs;
            results.push((
                10,
                "determinism",
                outcome(
                    differing.is_empty() && r.loss_trace_equal && r.checkpoints_equal,
                    format!(
                        "{} of {n} CSVs bit-identical across runs A and B (B interrupted and resumed); \
                         loss trace equal: {}; final checkpoints equal: {}{}",
                        n - differing.len().min(*n),
                        r.loss_trace_equal,
                        r.checkpoints_equal,
                        if differing.is_empty() {
                            String::new()
                        } else {
                            format!("; differing: {differing:?}")
                        }
                    ),
                ),
            ));
        }
        Err(e) => {
            for (n, title) in [
                (7, "training smoke"),
                (8, "anti-interference"),
                (9, "code probe"),
                (10, "determinism"),
            ] {
                results.push((n, title, outcome(false, format!("training pipeline error: {e}"))));
            }
        }
    }

    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    for (n, title, o) in &results {
        println!(
            "criterion {n:>2} {} {title}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.0}s (artefacts in {})",
        results.len() - failed,
        t.elapsed().as_secs_f64(),
        root.display()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
