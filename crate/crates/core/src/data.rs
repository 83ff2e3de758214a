//! Synthetic multi-contrast phantoms, the intermediate-sequence pairing
//! protocol, the `.vqt` tensor format and on-disk datasets.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! <subject_id>/seq1.vqt … seq4.vqt   (only sequences flagged available)
//! <subject_id>/labels.vqt            (tissue map, stored as f32)
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bytes::{put_u32, read_file, write_file, Reader};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::vqc::SequenceSet;

pub const VQT_MAGIC: &str = "VQCT";
pub const VQT_VERSION: u32 = 1;
const VQT_MAX_RANK: u32 = 8;

pub const NUM_SEQUENCES: usize = 4;
pub const MAX_TISSUES: usize = 4;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.vqt";

/// Per-sequence base intensity of background, the four tissues and lesion.
/// The lesion is faint in sequence 1 and bright in sequences 2 and 4.
const CONTRAST: [[f32; MAX_TISSUES + 2]; NUM_SEQUENCES] = [
    [0.0, 0.50, 0.80, 0.58, 0.18, 0.74],
    [0.0, 0.55, 0.78, 0.60, 0.20, 0.95],
    [0.0, 0.30, 0.38, 0.55, 0.90, 0.80],
    [0.0, 0.35, 0.45, 0.62, 0.15, 0.95],
];
const JITTER: f64 = 0.03;
const NOISE_SIGMA: f64 = 0.01;
/// Width in pixels of the soft ramp at region boundaries.
const EDGE: f64 = 3.0;

/// File name of sequence `i` (0-based) inside a subject directory.
pub fn sequence_file(i: usize) -> String {
    format!("seq{}.vqt", i + 1)
}

/// Seed derived from `seed` and a tag, stable across platforms.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    // FNV-1a of the tag, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Integer label map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Majority label of each `f x f` block (ties to the lowest label).
    pub fn downsample_majority(&self, h: usize, w: usize) -> Result<LabelMap> {
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(Error::Shape(format!(
                "cannot pool a {}x{} label map to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (self.height / h, self.width / w);
        let mut labels = Vec::with_capacity(h * w);
        for by in 0..h {
            for bx in 0..w {
                let mut counts = [0usize; 256];
                for y in by * fy..(by + 1) * fy {
                    for x in bx * fx..(bx + 1) * fx {
                        counts[self.get(y, x) as usize] += 1;
                    }
                }
                let best = (0..256).max_by_key(|&l| (counts[l], std::cmp::Reverse(l))).unwrap();
                labels.push(best as u8);
            }
        }
        Ok(LabelMap {
            height: h,
            width: w,
            labels,
        })
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn upsample(&self, h: usize, w: usize) -> Result<LabelMap> {
        if !h.is_multiple_of(self.height) || !w.is_multiple_of(self.width) {
            return Err(Error::Shape(format!(
                "cannot upsample {}x{} to {h}x{w}",
                self.height, self.width
            )));
        }
        let (fy, fx) = (h / self.height, w / self.width);
        let labels = (0..h * w)
            .map(|i| self.get((i / w) / fy, (i % w) / fx))
            .collect();
        Ok(LabelMap {
            height: h,
            width: w,
            labels,
        })
    }

    fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l as f32).collect(),
        )
        .expect("label shape")
    }

    fn from_image(im: &Image, path: &Path) -> Result<LabelMap> {
        let mut labels = Vec::with_capacity(im.pixels().len());
        for &v in im.pixels() {
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Integrity {
                    path: path.to_path_buf(),
                    detail: format!("label value {v} is not an integer in 0..=255"),
                });
            }
            labels.push(v as u8);
        }
        Ok(LabelMap {
            height: im.height(),
            width: im.width(),
            labels,
        })
    }
}

/// Phantom geometry and its per-sequence contrast tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub subject_id: String,
    /// 0 background, `1..=T` tissues, `T + 1` lesion.
    pub tissue_map: LabelMap,
    pub n_tissues: usize,
    /// `contrasts[i][label]`: base intensity of `label` in sequence `i`.
    pub contrasts: Vec<Vec<f32>>,
    pub has_lesion: bool,
}

impl Phantom {
    pub fn lesion_label(&self) -> u8 {
        (self.n_tissues + 1) as u8
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels, positive inside.
    fn depth(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let rho = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        (1.0 - rho) * self.rx.min(self.ry)
    }

    fn scaled(&self, f: f64) -> Ellipse {
        Ellipse {
            ry: self.ry * f,
            rx: self.rx * f,
            ..*self
        }
    }
}

/// Which tissue each painted layer carries; lesion is `None`.
fn layer_label(tissue: usize, n_tissues: usize) -> Option<u8> {
    (tissue <= n_tissues).then_some(tissue as u8)
}

/// Random head phantom: scalp ring (1), white matter (2) with a cortical
/// ring and two deep nuclei (3), a central ventricle (4) and an optional
/// lesion inside the white matter.
pub fn generate_phantom(
    seed: u64,
    height: usize,
    width: usize,
    n_tissues: usize,
    lesion_probability: f64,
) -> Result<(Phantom, Vec<Image>)> {
    generate_phantom_with_id(seed, height, width, n_tissues, lesion_probability, "")
}

fn generate_phantom_with_id(
    seed: u64,
    height: usize,
    width: usize,
    n_tissues: usize,
    lesion_probability: f64,
    subject_id: &str,
) -> Result<(Phantom, Vec<Image>)> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!(
            "phantoms need H, W >= 32, got {height}x{width}"
        )));
    }
    if !(1..=MAX_TISSUES).contains(&n_tissues) {
        return Err(Error::InvalidArgument(format!(
            "n_tissues must be in 1..={MAX_TISSUES}, got {n_tissues}"
        )));
    }
    if !(0.0..=1.0).contains(&lesion_probability) {
        return Err(Error::InvalidArgument(format!(
            "lesion_probability must be in [0, 1], got {lesion_probability}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let head = Ellipse {
        cy: h / 2.0 + rng.random_range(-1.5..1.5),
        cx: w / 2.0 + rng.random_range(-1.5..1.5),
        ry: h * rng.random_range(0.40..0.46),
        rx: w * rng.random_range(0.34..0.42),
        angle: rng.random_range(-0.3..0.3),
    };
    let brain = head.scaled(rng.random_range(0.74..0.80));
    let white = brain.scaled(rng.random_range(0.66..0.76));
    let mut layers: Vec<(Ellipse, usize)> = vec![(head, 1), (brain, 3), (white, 2)];
    for side in [-1.0, 1.0] {
        let nucleus = Ellipse {
            cy: head.cy + rng.random_range(-1.5..1.5) * h / 32.0,
            cx: head.cx + side * rng.random_range(4.5..6.0) * w / 32.0,
            ry: rng.random_range(2.5..3.5) * h / 32.0,
            rx: rng.random_range(1.8..2.5) * w / 32.0,
            angle: rng.random_range(-0.5..0.5),
        };
        layers.push((nucleus, 3));
    }
    let ventricle = Ellipse {
        cy: head.cy + rng.random_range(-1.5..1.5) * h / 32.0,
        cx: head.cx + rng.random_range(-1.0..1.0) * w / 32.0,
        ry: rng.random_range(3.0..4.5) * h / 32.0,
        rx: rng.random_range(1.8..2.8) * w / 32.0,
        angle: rng.random_range(-0.4..0.4),
    };
    layers.push((ventricle, 4));
    let has_lesion = rng.random::<f64>() < lesion_probability;
    let lesion_tissue = MAX_TISSUES + 1;
    if has_lesion {
        let r = rng.random_range(0.15..0.6);
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        let lesion = Ellipse {
            cy: white.cy + r * white.ry * t.sin(),
            cx: white.cx + r * white.rx * t.cos(),
            ry: rng.random_range(3.5..6.0) * h / 32.0,
            rx: rng.random_range(3.5..6.0) * w / 32.0,
            angle: rng.random_range(-1.0..1.0),
        };
        layers.push((lesion, lesion_tissue));
    }

    // Tissues beyond `n_tissues` fold into white matter.
    let tissue_of = |t: usize| -> usize {
        if t == lesion_tissue || t <= n_tissues {
            t
        } else {
            2.min(n_tissues)
        }
    };
    let lesion_label = n_tissues + 1;
    let label_of = |t: usize| -> u8 {
        if t == lesion_tissue {
            lesion_label as u8
        } else {
            layer_label(tissue_of(t), n_tissues).expect("folded tissue")
        }
    };

    // Soft layer opacities and hard labels.
    let npx = height * width;
    let mut alphas = vec![vec![0.0f64; npx]; layers.len()];
    let mut labels = vec![0u8; npx];
    for y in 0..height {
        for x in 0..width {
            let (py, pxx) = (y as f64 + 0.5, x as f64 + 0.5);
            let p = y * width + x;
            for (k, (e, t)) in layers.iter().enumerate() {
                let d = e.depth(py, pxx);
                alphas[k][p] = (0.5 + d / EDGE).clamp(0.0, 1.0);
                if d >= 0.0 {
                    labels[p] = label_of(*t);
                }
            }
        }
    }

    let jitter: Vec<Vec<f64>> = (0..NUM_SEQUENCES)
        .map(|_| (0..=MAX_TISSUES).map(|_| rng.random_range(-JITTER..JITTER)).collect())
        .collect();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("sigma");
    let mut contrasts = Vec::with_capacity(NUM_SEQUENCES);
    let mut images = Vec::with_capacity(NUM_SEQUENCES);
    for s in 0..NUM_SEQUENCES {
        // The lesion inherits white matter's jitter so its faint contrast in
        // sequence 1 keeps its sign.
        let level = |t: usize| -> f64 {
            let j = if t == lesion_tissue { jitter[s][2] } else { jitter[s][t] };
            CONTRAST[s][t] as f64 + j
        };
        let mut table = vec![0.0f32; lesion_label + 1];
        for t in 1..=MAX_TISSUES + 1 {
            let l = label_of(t) as usize;
            if t == tissue_of(t) {
                table[l] = level(t) as f32;
            }
        }
        contrasts.push(table);
        let mut px = vec![0.0f32; npx];
        for (p, out) in px.iter_mut().enumerate() {
            let mut v = 0.0f64;
            for (k, (_, t)) in layers.iter().enumerate() {
                let a = alphas[k][p];
                if a > 0.0 {
                    v = v * (1.0 - a) + level(tissue_of(*t)) * a;
                }
            }
            if alphas[0][p] > 0.0 {
                v += noise.sample(&mut rng);
                // Head pixels never reach the background value.
                *out = v.clamp(1e-3, 1.0) as f32;
            }
        }
        images.push(Image::new(height, width, px)?);
    }
    let phantom = Phantom {
        subject_id: subject_id.to_string(),
        tissue_map: LabelMap {
            height,
            width,
            labels,
        },
        n_tissues,
        contrasts,
        has_lesion,
    };
    Ok((phantom, images))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub split: Split,
    /// Availability flag per sequence.
    pub flags: Vec<u8>,
    /// Generator seed of this subject.
    pub seed: u64,
}

impl SubjectEntry {
    pub fn available(&self) -> Vec<usize> {
        (0..self.flags.len()).filter(|&i| self.flags[i] != 0).collect()
    }
}

/// Train subjects in three equal subsets with sequence pairs (1,2), (2,3),
/// (3,4); validation and test subjects have every sequence.
pub fn build_pairing(n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Vec<SubjectEntry>> {
    if !n_train.is_multiple_of(3) {
        return Err(Error::InvalidArgument(format!(
            "n_train must be divisible by 3, got {n_train}"
        )));
    }
    const SUBSETS: [[u8; NUM_SEQUENCES]; 3] = [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]];
    let mut assignment: Vec<usize> = (0..n_train).map(|k| k / (n_train / 3).max(1)).collect();
    assignment.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairing")));
    let mut out = Vec::with_capacity(n_train + n_val + n_test);
    let mut push = |split: Split, prefix: &str, k: usize, flags: [u8; NUM_SEQUENCES]| {
        let id = format!("{prefix}{k:03}");
        out.push(SubjectEntry {
            seed: derive_seed(seed, &id),
            id,
            split,
            flags: flags.to_vec(),
        });
    };
    for (k, &s) in assignment.iter().enumerate() {
        push(Split::Train, "train", k, SUBSETS[s]);
    }
    for k in 0..n_val {
        push(Split::Val, "val", k, [1; NUM_SEQUENCES]);
    }
    for k in 0..n_test {
        push(Split::Test, "test", k, [1; NUM_SEQUENCES]);
    }
    Ok(out)
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub n_tissues: usize,
    pub lesion_probability: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_train: 90,
            n_val: 12,
            n_test: 30,
            height: 32,
            width: 32,
            n_tissues: MAX_TISSUES,
            lesion_probability: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator: DatasetConfig,
    pub num_sequences: usize,
    pub subjects: Vec<SubjectEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// `.vqt` bytes of an f32 array.
pub fn encode_tensor(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {numel} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + 4 * shape.len() + 4 * numel);
    out.extend_from_slice(VQT_MAGIC.as_bytes());
    put_u32(&mut out, VQT_VERSION);
    put_u32(&mut out, shape.len() as u32);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        put_u32(&mut out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parse `.vqt` bytes; `path` is only used in error messages.
pub fn decode_tensor(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut r = Reader::new(path, bytes);
    r.magic(VQT_MAGIC)?;
    r.version(VQT_VERSION)?;
    let shape = r.dims(VQT_MAX_RANK)?;
    let numel: usize = shape.iter().product();
    let nbytes = numel.checked_mul(4).ok_or_else(|| Error::DimOverflow {
        path: path.to_path_buf(),
        detail: "payload size overflows".into(),
    })?;
    let payload = r.take(nbytes, "payload")?;
    if r.remaining() != 0 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes after payload", r.remaining()),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((shape, data))
}

pub fn write_tensor(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    write_file(path, &encode_tensor(shape, data)?)
}

pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    decode_tensor(path, &read_file(path)?)
}

pub fn write_image(path: &Path, im: &Image) -> Result<()> {
    write_tensor(path, &[im.height(), im.width()], im.pixels())
}

/// Read a rank-2 tensor (or `[1, H, W]` / `[1, 1, H, W]`) as an image.
pub fn read_image(path: &Path) -> Result<Image> {
    let (shape, data) = read_tensor(path)?;
    let (h, w) = match shape.as_slice() {
        [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "{}: expected a 2-D image, found shape {shape:?}",
                path.display()
            )))
        }
    };
    Image::new(h, w, data)
}

/// A subject loaded from disk.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub split: Split,
    pub sequences: SequenceSet,
    pub labels: LabelMap,
}

/// An opened, integrity-checked dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    manifest: Manifest,
}

fn integrity(path: &Path, detail: impl Into<String>) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Generate every subject of `cfg` under `dir` and write the manifest.
pub fn generate_dataset(dir: &Path, cfg: &DatasetConfig) -> Result<Manifest> {
    let subjects = build_pairing(cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for entry in &subjects {
        let (phantom, images) = generate_phantom_with_id(
            entry.seed,
            cfg.height,
            cfg.width,
            cfg.n_tissues,
            cfg.lesion_probability,
            &entry.id,
        )?;
        let sub = dir.join(&entry.id);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in entry.available() {
            write_image(&sub.join(sequence_file(i)), &images[i])?;
        }
        write_image(&sub.join(LABELS_FILE), &phantom.tissue_map.to_image())?;
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        generator: cfg.clone(),
        num_sequences: NUM_SEQUENCES,
        subjects,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&path, text.as_bytes())?;
    Ok(manifest)
}

impl Dataset {
    /// Read the manifest and check that every flagged file exists.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = read_file(&path)?;
        let manifest: Manifest = serde_json::from_slice(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Version {
                path,
                found: manifest.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        let mut seen = HashSet::new();
        for s in &manifest.subjects {
            if !seen.insert(&s.id) {
                return Err(integrity(&path, format!("duplicate subject id {:?}", s.id)));
            }
            if s.flags.len() != manifest.num_sequences || s.available().is_empty() {
                return Err(integrity(&path, format!("subject {:?} has invalid flags", s.id)));
            }
            for i in s.available() {
                let f = dir.join(&s.id).join(sequence_file(i));
                if !f.is_file() {
                    return Err(integrity(&f, "missing sequence file for a flagged sequence"));
                }
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn num_sequences(&self) -> usize {
        self.manifest.num_sequences
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.manifest.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn entry(&self, id: &str) -> Result<&SubjectEntry> {
        self.manifest
            .subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| integrity(&self.dir.join(MANIFEST_FILE), format!("no subject {id:?}")))
    }

    pub fn load(&self, id: &str) -> Result<Subject> {
        let entry = self.entry(id)?;
        let sequences = load_subject(&self.dir, entry)?;
        let lpath = self.dir.join(id).join(LABELS_FILE);
        let labels = LabelMap::from_image(&read_image(&lpath)?, &lpath)?;
        if (labels.height, labels.width) != sequences.image_shape() {
            return Err(integrity(&lpath, "label map shape differs from the images"));
        }
        Ok(Subject {
            id: id.to_string(),
            split: entry.split,
            sequences,
            labels,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Subject>> {
        let ids: Vec<String> = self.entries(split).map(|e| e.id.clone()).collect();
        ids.iter().map(|id| self.load(id)).collect()
    }
}

/// Load only the flagged sequences of `entry`.
pub fn load_subject(dir: &Path, entry: &SubjectEntry) -> Result<SequenceSet> {
    let mut images = vec![None; entry.flags.len()];
    for i in entry.available() {
        let f = dir.join(&entry.id).join(sequence_file(i));
        if !f.is_file() {
            return Err(integrity(&f, "missing sequence file for a flagged sequence"));
        }
        images[i] = Some(read_image(&f)?);
    }
    let set = SequenceSet::new(images)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_deterministic_and_in_range() {
        let (p1, a) = generate_phantom(5, 32, 32, 4, 1.0).unwrap();
        let (p2, b) = generate_phantom(5, 32, 32, 4, 1.0).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(a, b);
        assert!(a.iter().all(Image::is_unit_range));
        assert!(p1.has_lesion);
        assert!(p1.tissue_map.labels.contains(&p1.lesion_label()));
        assert!(generate_phantom(5, 16, 32, 4, 1.0).is_err());
    }

    #[test]
    fn background_is_exactly_zero_and_labels_match_support() {
        let (p, ims) = generate_phantom(8, 32, 32, 4, 0.5).unwrap();
        for im in &ims {
            for (v, &l) in im.pixels().iter().zip(&p.tissue_map.labels) {
                if l != 0 {
                    assert!(*v > 0.0);
                }
            }
            assert_eq!(im.get(0, 0), 0.0);
        }
    }

    #[test]
    fn sequences_are_pairwise_distinct() {
        let (_, ims) = generate_phantom(9, 32, 32, 4, 1.0).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(ims[i], ims[j]);
            }
        }
    }

    #[test]
    fn fewer_tissues_fold_labels() {
        let (p, _) = generate_phantom(3, 32, 32, 2, 1.0).unwrap();
        assert!(p.tissue_map.labels.iter().all(|&l| l <= 3));
        assert!(p.tissue_map.labels.contains(&3));
    }

    #[test]
    fn pairing_protocol() {
        let m = build_pairing(6, 2, 3, 1).unwrap();
        let train: Vec<_> = m.iter().filter(|s| s.split == Split::Train).collect();
        assert_eq!(train.len(), 6);
        for subset in [[1, 1, 0, 0], [0, 1, 1, 0], [0, 0, 1, 1]] {
            assert_eq!(train.iter().filter(|s| s.flags == subset).count(), 2);
        }
        assert!(train.iter().all(|s| !(s.flags[0] == 1 && s.flags[3] == 1)));
        assert!(m.iter().filter(|s| s.split != Split::Train).all(|s| s.flags == [1; 4]));
        assert!(build_pairing(7, 1, 1, 1).is_err());
    }

    #[test]
    fn vqt_layout_and_errors() {
        let im = Image::filled(32, 32, 0.5);
        let bytes = encode_tensor(&[32, 32], im.pixels()).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8 + 4096);
        let p = Path::new("x.vqt");
        let (shape, data) = decode_tensor(p, &bytes).unwrap();
        assert_eq!(shape, vec![32, 32]);
        assert_eq!(data, im.pixels());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(p, &bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(p, &bad), Err(Error::Version { found: 9, .. })));
        assert!(matches!(
            decode_tensor(p, &bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes[..8].to_vec();
        put_u32(&mut bad, 3);
        for _ in 0..3 {
            put_u32(&mut bad, u32::MAX);
        }
        assert!(matches!(decode_tensor(p, &bad), Err(Error::DimOverflow { .. })));
    }

    #[test]
    fn label_pooling() {
        let m = LabelMap {
            height: 2,
            width: 4,
            labels: vec![1, 1, 2, 3, 1, 0, 3, 2],
        };
        let d = m.downsample_majority(1, 2).unwrap();
        assert_eq!(d.labels, vec![1, 2]);
        let u = d.upsample(2, 4).unwrap();
        assert_eq!(u.labels, vec![1, 1, 2, 2, 1, 1, 2, 2]);
    }
}
