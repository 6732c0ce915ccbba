//! Dataset ingestion, the procedural synthetic dataset, and the
//! corruption suite.
//!
//! Images are flat uint8 buffers in [n, C, H, W] order. Normalization
//! statistics may only be computed from an uncorrupted train split and
//! are carried to the other splits explicitly.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel mean and standard deviation of pixel values in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: Split,
    pub corrupted: bool,
    /// Train-split statistics; attached, never recomputed elsewhere.
    pub stats: Option<NormStats>,
}

impl ImageDataset {
    pub fn example_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.example_len();
        &self.images[i * len..(i + 1) * len]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.n * self.example_len() {
            return Err(Error::Dimension(format!(
                "image buffer holds {} bytes, expected {}",
                self.images.len(),
                self.n * self.example_len()
            )));
        }
        if self.labels.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} labels for {} images",
                self.labels.len(),
                self.n
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    /// Per-channel pixel mean/std in [0, 1]. Refuses anything that is
    /// not a clean train split so val/test/corrupted data can never
    /// leak into normalization.
    pub fn compute_stats(&self) -> Result<NormStats> {
        if self.split != Split::Train || self.corrupted {
            return Err(Error::Input(
                "normalization statistics must come from the clean train split".into(),
            ));
        }
        let per_chan = self.height * self.width;
        let count = (self.n * per_chan) as f64;
        let mut mean = vec![0.0; self.channels];
        let mut sq = vec![0.0; self.channels];
        for i in 0..self.n {
            let img = self.image(i);
            for c in 0..self.channels {
                for &p in &img[c * per_chan..(c + 1) * per_chan] {
                    let v = p as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(&m, &s)| {
                let mu = m / count;
                ((s / count - mu * mu).max(0.0)).sqrt().max(1e-8)
            })
            .collect();
        for m in &mut mean {
            *m /= count;
        }
        Ok(NormStats { mean, std })
    }

    /// One image as normalized f64 values using the attached stats.
    pub fn normalized_image(&self, i: usize) -> Result<Vec<f64>> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::Input("dataset has no normalization stats attached".into()))?;
        let per_chan = self.height * self.width;
        let img = self.image(i);
        let mut out = Vec::with_capacity(img.len());
        for c in 0..self.channels {
            for &p in &img[c * per_chan..(c + 1) * per_chan] {
                out.push((p as f64 / 255.0 - stats.mean[c]) / stats.std[c]);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// readers

/// CIFAR-10 binary version: each record is 1 label byte followed by
/// 3072 pixel bytes in R, G, B plane order.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<ImageDataset> {
    let bytes = fs::read(path)?;
    parse_cifar_binary(&bytes, split)
}

pub fn parse_cifar_binary(bytes: &[u8], split: Split) -> Result<ImageDataset> {
    const REC: usize = 3073;
    if bytes.len() % REC != 0 {
        return Err(Error::Format(format!(
            "CIFAR binary length {} is not a multiple of {REC}",
            bytes.len()
        )));
    }
    let n = bytes.len() / REC;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(REC) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR label byte {} exceeds 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(ImageDataset {
        images,
        labels,
        n,
        channels: 3,
        height: 32,
        width: 32,
        classes: 10,
        split,
        corrupted: false,
        stats: None,
    })
}

pub fn write_cifar_binary(path: &Path, ds: &ImageDataset) -> Result<()> {
    if ds.channels != 3 || ds.height != 32 || ds.width != 32 {
        return Err(Error::Input("CIFAR binary writer needs 3x32x32 images".into()));
    }
    let mut f = fs::File::create(path)?;
    for i in 0..ds.n {
        f.write_all(&[ds.labels[i] as u8])?;
        f.write_all(ds.image(i))?;
    }
    Ok(())
}

/// IDX (MNIST-style) reader: magic [0, 0, dtype, ndims], big-endian u32
/// dimension sizes, then raw data. Only uint8 payloads are supported.
pub fn load_idx(path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("not an IDX file: bad magic".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!("IDX dtype 0x{:02x} unsupported, only uint8", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| {
            u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize
        })
        .collect();
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(Error::Format(format!(
            "IDX payload of {} bytes, dims promise {total}",
            bytes.len() - header
        )));
    }
    Ok((bytes[header..].to_vec(), dims))
}

/// Halve resolution by 2x2 mean pooling (round half away from zero).
pub fn downscale_2x2(ds: &ImageDataset) -> Result<ImageDataset> {
    if ds.height % 2 != 0 || ds.width % 2 != 0 {
        return Err(Error::Input(format!(
            "cannot 2x2-pool odd image size {}x{}",
            ds.height, ds.width
        )));
    }
    let (h2, w2) = (ds.height / 2, ds.width / 2);
    let mut images = Vec::with_capacity(ds.n * ds.channels * h2 * w2);
    for i in 0..ds.n {
        let img = ds.image(i);
        for c in 0..ds.channels {
            let plane = &img[c * ds.height * ds.width..(c + 1) * ds.height * ds.width];
            for y in 0..h2 {
                for x in 0..w2 {
                    let s = plane[2 * y * ds.width + 2 * x] as f64
                        + plane[2 * y * ds.width + 2 * x + 1] as f64
                        + plane[(2 * y + 1) * ds.width + 2 * x] as f64
                        + plane[(2 * y + 1) * ds.width + 2 * x + 1] as f64;
                    images.push(quantize(s / 4.0));
                }
            }
        }
    }
    Ok(ImageDataset { images, height: h2, width: w2, stats: None, ..ds.clone() })
}

// ---------------------------------------------------------------------------
// synthetic data

/// Shape of the procedural dataset; image content per class is an
/// oriented grating plus a blob at a class-specific position.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Pixel noise standard deviation in uint8 units.
    pub noise: f64,
    /// Fraction of samples rendered as a blend of two class patterns
    /// (weight near 1/2, labeled with the heavier class). Such samples
    /// carry irreducible label uncertainty.
    #[serde(default)]
    pub ambiguity: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 10, height: 16, width: 16, channels: 3, noise: 6.0, ambiguity: 0.0 }
    }
}

fn split_id(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

/// Generate `n` images for one split. A pure function of
/// (spec, seed, split): the same call yields identical bytes.
pub fn synth_dataset(spec: &SynthSpec, n: usize, seed: u64, split: Split) -> Result<ImageDataset> {
    if spec.classes == 0 || spec.classes > 10 {
        return Err(Error::Input(format!(
            "synthetic dataset supports 1..=10 classes, got {}",
            spec.classes
        )));
    }
    let mut images = Vec::with_capacity(n * spec.channels * spec.height * spec.width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, &[tag::DATA, split_id(split), i as u64]);
        let label = r.gen_range(0..spec.classes);
        labels.push(label);
        render_example(spec, label, &mut r, &mut images);
    }
    Ok(ImageDataset {
        images,
        labels,
        n,
        channels: spec.channels,
        height: spec.height,
        width: spec.width,
        classes: spec.classes,
        split,
        corrupted: false,
        stats: None,
    })
}

/// Per-sample geometry of one class pattern: grating angle and
/// frequency, random phase, blob center jittered on a class ring.
struct ClassGeom {
    k: f64,
    ca: f64,
    sa: f64,
    freq: f64,
    phase: f64,
    ring: f64,
    bx: f64,
    by: f64,
}

fn class_geom(spec: &SynthSpec, label: usize, r: &mut impl Rng) -> ClassGeom {
    let k = label as f64;
    let kc = spec.classes as f64;
    let angle = std::f64::consts::PI * k / kc;
    let freq = 1.5 + 0.35 * k;
    let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let ring = std::f64::consts::TAU * k / kc;
    let jx: f64 = r.gen_range(-1.0..1.0);
    let jy: f64 = r.gen_range(-1.0..1.0);
    ClassGeom {
        k,
        ca: angle.cos(),
        sa: angle.sin(),
        freq,
        phase,
        ring,
        bx: spec.width as f64 / 2.0 + 0.3 * spec.width as f64 * ring.cos() + jx,
        by: spec.height as f64 / 2.0 + 0.3 * spec.height as f64 * ring.sin() + jy,
    }
}

/// Noise-free pattern value in [0, 1]-ish units at one pixel.
fn clean_value(spec: &SynthSpec, g: &ClassGeom, c: usize, x: usize, y: usize) -> f64 {
    let kc = spec.classes as f64;
    // channel tint so color also carries class information
    let tint = 0.6 + 0.4 * (std::f64::consts::TAU * (g.k + c as f64) / kc).cos();
    let u = (x as f64 * g.ca + y as f64 * g.sa) / spec.width as f64;
    let grating = 0.5 + 0.5 * (std::f64::consts::TAU * g.freq * u + g.phase).sin();
    let sigma2 = (spec.width.min(spec.height) as f64 / 4.5).powi(2);
    let d2 = (x as f64 - g.bx).powi(2) + (y as f64 - g.by).powi(2);
    let blob = (-d2 / (2.0 * sigma2)).exp();
    // slow ramp across the image, direction tied to class
    let ramp = 0.5
        + 0.5
            * (std::f64::consts::TAU * (x as f64 * g.sa - y as f64 * g.ca)
                / (2.0 * spec.width as f64)
                + g.ring)
                .sin();
    tint * (0.4 * grating + 0.3 * blob + 0.3 * ramp)
}

fn render_example(spec: &SynthSpec, label: usize, r: &mut impl Rng, out: &mut Vec<u8>) {
    // ambiguous samples mix a confuser class in at a weight near 1/2;
    // the label stays with the heavier class
    let ambiguous = spec.classes > 1 && r.gen::<f64>() < spec.ambiguity;
    let (g1, g2, w) = if ambiguous {
        let other = (label + r.gen_range(1..spec.classes)) % spec.classes;
        let w: f64 = r.gen_range(0.5..0.6);
        (class_geom(spec, label, r), Some(class_geom(spec, other, r)), w)
    } else {
        (class_geom(spec, label, r), None, 1.0)
    };
    for c in 0..spec.channels {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut pattern = w * clean_value(spec, &g1, c, x, y);
                if let Some(g2) = &g2 {
                    pattern += (1.0 - w) * clean_value(spec, g2, c, x, y);
                }
                let noise: f64 = r.sample(StandardNormal);
                // moderate contrast: separable on clean pixels yet
                // swamped by heavy additive noise
                let v = 70.0 + 60.0 * pattern + spec.noise * noise;
                out.push(quantize(v));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// corruptions

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
}

pub const CORRUPTION_KINDS: [CorruptionKind; 6] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ShotNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        CORRUPTION_KINDS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown corruption kind `{s}`")))
    }

    fn id(self) -> u64 {
        CORRUPTION_KINDS.iter().position(|&k| k == self).unwrap() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1..=5.
    pub severity: u8,
}

// Fixed per-severity parameter tables (uint8 scale where applicable).
const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_SCALE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRAC: [f64; 5] = [0.01, 0.02, 0.05, 0.08, 0.12];
const BLUR_KERNEL: [usize; 5] = [3, 3, 5, 5, 7];
const BLUR_PASSES: [usize; 5] = [1, 2, 1, 2, 2];
const BRIGHT_ADD: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];

/// Round half away from zero and clamp into uint8 range.
pub fn quantize(v: f64) -> u8 {
    let r = (v.abs() + 0.5).floor().copysign(v);
    r.clamp(0.0, 255.0) as u8
}

/// Apply one corruption to a single [C, H, W] image.
pub fn corrupt(
    img: &[u8],
    channels: usize,
    height: usize,
    width: usize,
    spec: CorruptionSpec,
    seed: u64,
) -> Result<Vec<u8>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Input(format!("severity {} outside 1..=5", spec.severity)));
    }
    if img.len() != channels * height * width {
        return Err(Error::Dimension(format!(
            "image of {} bytes is not {channels}x{height}x{width}",
            img.len()
        )));
    }
    let s = (spec.severity - 1) as usize;
    let mut r = rng::stream(seed, &[tag::CORRUPT, spec.kind.id(), spec.severity as u64]);
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = GAUSS_SIGMA[s] * 255.0;
            img.iter()
                .map(|&p| {
                    let e: f64 = r.sample(StandardNormal);
                    quantize(p as f64 + sigma * e)
                })
                .collect()
        }
        CorruptionKind::ShotNoise => {
            let scale = SHOT_SCALE[s];
            img.iter()
                .map(|&p| {
                    let lambda = p as f64 / 255.0 * scale;
                    let counts = if lambda > 0.0 {
                        Poisson::new(lambda).expect("positive rate").sample(&mut r)
                    } else {
                        0.0
                    };
                    quantize(counts / scale * 255.0)
                })
                .collect()
        }
        CorruptionKind::ImpulseNoise => {
            let frac = IMPULSE_FRAC[s];
            img.iter()
                .map(|&p| {
                    if r.gen::<f64>() < frac {
                        if r.gen::<bool>() {
                            255
                        } else {
                            0
                        }
                    } else {
                        p
                    }
                })
                .collect()
        }
        CorruptionKind::BoxBlur => {
            let mut planes: Vec<f64> = img.iter().map(|&p| p as f64).collect();
            for _ in 0..BLUR_PASSES[s] {
                planes = box_blur_once(&planes, channels, height, width, BLUR_KERNEL[s]);
            }
            planes.into_iter().map(quantize).collect()
        }
        CorruptionKind::Brightness => {
            let add = BRIGHT_ADD[s] * 255.0;
            img.iter().map(|&p| quantize(p as f64 + add)).collect()
        }
        CorruptionKind::Contrast => contrast(img, CONTRAST_FACTOR[s]),
    };
    Ok(out)
}

/// Scale deviations from the whole-image mean by `factor`.
fn contrast(img: &[u8], factor: f64) -> Vec<u8> {
    let mean = img.iter().map(|&p| p as f64).sum::<f64>() / img.len() as f64;
    img.iter().map(|&p| quantize(mean + factor * (p as f64 - mean))).collect()
}

/// One k x k mean-filter pass per channel; windows are clipped at the
/// borders and divided by the in-bounds count.
fn box_blur_once(planes: &[f64], channels: usize, height: usize, width: usize, k: usize) -> Vec<f64> {
    let half = k as isize / 2;
    let mut out = Vec::with_capacity(planes.len());
    for c in 0..channels {
        let plane = &planes[c * height * width..(c + 1) * height * width];
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < height as isize && xx >= 0 && xx < width as isize {
                            acc += plane[yy as usize * width + xx as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out.push(acc / cnt);
            }
        }
    }
    out
}

/// Corrupt every image of the test split under all 6 kinds x 5
/// severities. Labels and shapes are untouched; per-image seeds depend
/// only on (seed, kind, severity, index).
pub fn build_corrupted_suite(
    ds: &ImageDataset,
    seed: u64,
) -> Result<BTreeMap<(CorruptionKind, u8), ImageDataset>> {
    if ds.split != Split::Test {
        return Err(Error::Input("corrupted suite is built from the test split".into()));
    }
    let mut suite = BTreeMap::new();
    for kind in CORRUPTION_KINDS {
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind, severity };
            let mut images = Vec::with_capacity(ds.images.len());
            for i in 0..ds.n {
                let img_seed = rng::derive(seed, &[tag::CORRUPT, kind.id(), severity as u64, i as u64]);
                images.extend(corrupt(
                    ds.image(i),
                    ds.channels,
                    ds.height,
                    ds.width,
                    spec,
                    img_seed,
                )?);
            }
            suite.insert(
                (kind, severity),
                ImageDataset { images, corrupted: true, stats: None, ..ds.clone() },
            );
        }
    }
    Ok(suite)
}

// ---------------------------------------------------------------------------
// internal dataset format

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    split: Split,
    corrupted: bool,
    labels: Vec<usize>,
    stats: Option<NormStats>,
}

/// Write the internal format: little-endian u64 header length, JSON
/// header (shape, labels, stats), then the raw uint8 image blob.
pub fn save_dataset(path: &Path, ds: &ImageDataset) -> Result<()> {
    ds.validate()?;
    let header = DatasetHeader {
        n: ds.n,
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
        classes: ds.classes,
        split: ds.split,
        corrupted: ds.corrupted,
        labels: ds.labels.clone(),
        stats: ds.stats.clone(),
    };
    let hjson =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&(hjson.len() as u64).to_le_bytes())?;
    f.write_all(&hjson)?;
    f.write_all(&ds.images)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<ImageDataset> {
    let mut f = fs::File::open(path)?;
    let mut len_buf = [0u8; 8];
    f.read_exact(&mut len_buf)?;
    let hlen = u64::from_le_bytes(len_buf) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: DatasetHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    let mut images = Vec::new();
    f.read_to_end(&mut images)?;
    let ds = ImageDataset {
        images,
        labels: header.labels,
        n: header.n,
        channels: header.channels,
        height: header.height,
        width: header.width,
        classes: header.classes,
        split: header.split,
        corrupted: header.corrupted,
        stats: header.stats,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a suite under `<dir>/<kind>/<severity>/data.bin`.
pub fn save_suite(dir: &Path, suite: &BTreeMap<(CorruptionKind, u8), ImageDataset>) -> Result<()> {
    for (&(kind, severity), ds) in suite {
        save_dataset(&dir.join(kind.name()).join(severity.to_string()).join("data.bin"), ds)?;
    }
    Ok(())
}

pub fn load_suite(dir: &Path) -> Result<BTreeMap<(CorruptionKind, u8), ImageDataset>> {
    let mut suite = BTreeMap::new();
    for kind in CORRUPTION_KINDS {
        for severity in 1..=5u8 {
            let path = dir.join(kind.name()).join(severity.to_string()).join("data.bin");
            suite.insert((kind, severity), load_dataset(&path)?);
        }
    }
    Ok(suite)
}
