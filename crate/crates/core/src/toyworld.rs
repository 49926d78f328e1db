//! Deterministic synthetic multi-domain segmentation world.
//!
//! Source images are flat-coloured class regions plus pixel noise; each
//! target domain applies a per-channel `gain * pixel + bias + noise` shift.
//! Evaluation images come from their own seed stream and live in a separate
//! type ([`EvalSplit`]) that the training entry points never accept.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Header};
use crate::encoders::VisionEncoder;
use crate::error::{Result, UldaError};
use crate::hca::LabelMap;
use crate::seed;
use crate::tensor::norm;

pub const CHANNELS: usize = 3;

/// An `h x w x 3` image, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * CHANNELS {
            return Err(UldaError::invalid(format!(
                "image {h}x{w}x{CHANNELS} needs {} values, got {}",
                h * w * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(UldaError::invalid("image contains non-finite values"));
        }
        Ok(Image { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Image {
            h,
            w,
            data: vec![value; h * w * CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let p = (y * self.w + x) * CHANNELS;
        &self.data[p..p + CHANNELS]
    }

    pub fn channel_means(&self) -> [f64; CHANNELS] {
        let mut m = [0.0; CHANNELS];
        for px in self.data.chunks_exact(CHANNELS) {
            for (a, b) in m.iter_mut().zip(px) {
                *a += b;
            }
        }
        let n = (self.h * self.w) as f64;
        m.map(|v| v / n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub domain: String,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

impl DomainShift {
    pub fn identity(domain: &str) -> Self {
        DomainShift {
            domain: domain.to_string(),
            gain: vec![1.0; CHANNELS],
            bias: vec![0.0; CHANNELS],
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_eval_per_domain: usize,
    /// Images used to calibrate the toy text encoder; drawn from their own
    /// seed stream.
    pub n_calibration: usize,
    /// Per-pixel Gaussian noise of source images.
    pub pixel_noise: f64,
    pub domain_shifts: Vec<DomainShift>,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_classes: 4,
            image_size: 32,
            n_train: 40,
            n_eval_per_domain: 10,
            n_calibration: 24,
            pixel_noise: 0.04,
            domain_shifts: vec![
                DomainShift {
                    domain: "night".into(),
                    gain: vec![0.6; CHANNELS],
                    bias: vec![-0.25, -0.25, 0.15],
                    noise: 0.02,
                },
                DomainShift {
                    domain: "fog".into(),
                    gain: vec![0.65; CHANNELS],
                    bias: vec![-0.275, 0.125, -0.275],
                    noise: 0.02,
                },
                DomainShift {
                    domain: "sandstorm".into(),
                    gain: vec![0.7; CHANNELS],
                    bias: vec![0.15, -0.2, -0.35],
                    noise: 0.02,
                },
            ],
            seed: 2024,
        }
    }
}

/// Identifier usable as a header key segment and on the command line.
pub fn valid_domain_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(UldaError::invalid(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if self.n_classes < 2 || self.n_classes > 254 {
            return Err(UldaError::invalid("n_classes must be in 2..=254"));
        }
        if !(self.pixel_noise.is_finite() && self.pixel_noise >= 0.0) {
            return Err(UldaError::invalid("pixel_noise must be finite and >= 0"));
        }
        for (i, s) in self.domain_shifts.iter().enumerate() {
            if !valid_domain_id(&s.domain) {
                return Err(UldaError::invalid(format!(
                    "domain id {:?} must match [a-z0-9_]+",
                    s.domain
                )));
            }
            if self.domain_shifts[..i].iter().any(|o| o.domain == s.domain) {
                return Err(UldaError::invalid(format!("duplicate domain {}", s.domain)));
            }
            if s.gain.len() != CHANNELS || s.bias.len() != CHANNELS {
                return Err(UldaError::invalid(format!(
                    "domain {} needs {CHANNELS} gains and biases",
                    s.domain
                )));
            }
            let finite = s.gain.iter().chain(&s.bias).all(|v| v.is_finite())
                && s.noise.is_finite()
                && s.noise >= 0.0;
            if !finite {
                return Err(UldaError::invalid(format!(
                    "domain {} has non-finite shift parameters",
                    s.domain
                )));
            }
        }
        Ok(())
    }

    pub fn shift(&self, domain_id: &str) -> Result<&DomainShift> {
        self.domain_shifts
            .iter()
            .find(|s| s.domain == domain_id)
            .ok_or_else(|| UldaError::invalid(format!("unknown domain {domain_id:?}")))
    }

    pub fn domain_ids(&self) -> Vec<String> {
        self.domain_shifts
            .iter()
            .map(|s| s.domain.clone())
            .collect()
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("toy spec serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

const PALETTE: [[f64; 3]; 8] = [
    [0.50, 0.46, 0.50],
    [0.18, 0.62, 0.20],
    [0.35, 0.55, 0.92],
    [0.74, 0.34, 0.24],
    [0.90, 0.82, 0.20],
    [0.55, 0.20, 0.65],
    [0.10, 0.70, 0.70],
    [0.95, 0.55, 0.75],
];

fn class_color(spec: &ToySpec, k: usize) -> [f64; 3] {
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    let mut rng = seed::rng(spec.seed, &["palette", &k.to_string()]);
    [rng.random(), rng.random(), rng.random()]
}

/// One labelled image of the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

/// Labelled source-domain training data.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDataset {
    pub samples: Vec<Sample>,
}

/// A target-domain evaluation image. The domain tag is only used to bucket
/// metrics after prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub id: String,
    pub domain: String,
    pub image: Image,
    pub labels: LabelMap,
}

/// Target-domain evaluation data. Deliberately a different type from
/// [`SourceDataset`]: nothing in the training pipeline takes one.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub domains: Vec<String>,
    pub samples: Vec<EvalSample>,
}

fn draw_scene<R: Rng>(spec: &ToySpec, rng: &mut R) -> Result<(Image, LabelMap)> {
    let s = spec.image_size;
    let mut labels = vec![0u8; s * s];
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let class = rng.random_range(1..spec.n_classes) as u8;
        let (lo, hi) = (s / 4, s / 2);
        let sh = rng.random_range(lo..=hi);
        let sw = rng.random_range(lo..=hi);
        let y0 = rng.random_range(0..=s - sh);
        let x0 = rng.random_range(0..=s - sw);
        let ellipse = rng.random_bool(0.5);
        let (cy, cx) = (y0 as f64 + sh as f64 / 2.0, x0 as f64 + sw as f64 / 2.0);
        let (ry, rx) = (sh as f64 / 2.0, sw as f64 / 2.0);
        for y in y0..y0 + sh {
            for x in x0..x0 + sw {
                let inside = !ellipse || {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    labels[y * s + x] = class;
                }
            }
        }
    }
    let jitter: Vec<[f64; 3]> = (0..spec.n_classes)
        .map(|_| {
            [
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
                rng.random_range(-0.03..0.03),
            ]
        })
        .collect();
    let noise =
        Normal::new(0.0, spec.pixel_noise).map_err(|e| UldaError::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(s * s * CHANNELS);
    for &l in &labels {
        let base = class_color(spec, l as usize);
        for c in 0..CHANNELS {
            data.push(base[c] + jitter[l as usize][c] + noise.sample(rng));
        }
    }
    Ok((
        Image::new(s, s, data)?,
        LabelMap::new(s, s, spec.n_classes, labels)?,
    ))
}

fn draw_samples(spec: &ToySpec, stream: &str, prefix: &str, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = seed::rng(spec.seed, &[stream, &i.to_string()]);
            let (image, labels) = draw_scene(spec, &mut rng)?;
            Ok(Sample {
                id: format!("{prefix}-{i:04}"),
                image,
                labels,
            })
        })
        .collect()
}

pub fn generate_source(spec: &ToySpec) -> Result<SourceDataset> {
    Ok(SourceDataset {
        samples: draw_samples(spec, "train", "src", spec.n_train)?,
    })
}

/// Source-domain images from a seed stream disjoint from training and
/// evaluation, used only for text-encoder calibration.
pub fn calibration_set(spec: &ToySpec) -> Result<Vec<Sample>> {
    draw_samples(spec, "calibration", "cal", spec.n_calibration)
}

pub fn apply_domain_shift(
    image: &Image,
    domain_id: &str,
    spec: &ToySpec,
    noise_seed: u64,
) -> Result<Image> {
    let shift = spec.shift(domain_id)?;
    let mut rng = seed::rng(noise_seed, &["shift", domain_id]);
    let noise = Normal::new(0.0, shift.noise).map_err(|e| UldaError::invalid(e.to_string()))?;
    let mut data = image.data.clone();
    for px in data.chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            let n = if shift.noise > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            px[c] = shift.gain[c] * px[c] + shift.bias[c] + n;
        }
    }
    Image::new(image.h, image.w, data)
}

pub fn make_eval_split(spec: &ToySpec) -> Result<EvalSplit> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.domain_shifts.len() * spec.n_eval_per_domain);
    for shift in &spec.domain_shifts {
        let d = &shift.domain;
        for i in 0..spec.n_eval_per_domain {
            let mut rng = seed::rng(spec.seed, &["eval", d, &i.to_string()]);
            let (base, labels) = draw_scene(spec, &mut rng)?;
            let noise_seed = seed::derive(spec.seed, &["eval-noise", d, &i.to_string()]);
            samples.push(EvalSample {
                id: format!("eval-{d}-{i:04}"),
                domain: d.clone(),
                image: apply_domain_shift(&base, d, spec, noise_seed)?,
                labels,
            });
        }
    }
    Ok(EvalSplit {
        domains: spec.domain_ids(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparabilityReport {
    /// `(domain_a, domain_b, centroid distance, larger within-domain std)`
    pub pairs: Vec<(String, String, f64, f64)>,
}

impl SeparabilityReport {
    pub fn worst_ratio(&self) -> f64 {
        self.pairs
            .iter()
            .map(|(_, _, dist, spread)| dist / spread.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Checks that pooled encoder embeddings of the source and every target
/// domain form clusters whose centroids are more than `5x` the within-domain
/// spread apart.
pub fn check_domain_separability(
    vision: &dyn VisionEncoder,
    source: &SourceDataset,
    split: &EvalSplit,
) -> Result<SeparabilityReport> {
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = vec![("source".into(), Vec::new())];
    for s in &source.samples {
        let f = vision.encode_features(&s.image)?;
        groups[0].1.push(vision.pool_scene(&f)?);
    }
    for d in &split.domains {
        let mut v = Vec::new();
        for s in split.samples.iter().filter(|s| &s.domain == d) {
            let f = vision.encode_features(&s.image)?;
            v.push(vision.pool_scene(&f)?);
        }
        groups.push((d.clone(), v));
    }
    let stats: Vec<(Vec<f64>, f64)> = groups
        .iter()
        .map(|(_, vs)| {
            let dim = vs.first().map_or(0, Vec::len);
            let mut c = vec![0.0; dim];
            for v in vs {
                for (a, b) in c.iter_mut().zip(v) {
                    *a += b;
                }
            }
            c.iter_mut().for_each(|a| *a /= vs.len().max(1) as f64);
            let spread = (vs
                .iter()
                .map(|v| {
                    let diff: Vec<f64> = v.iter().zip(&c).map(|(a, b)| a - b).collect();
                    norm(&diff).powi(2)
                })
                .sum::<f64>()
                / vs.len().max(1) as f64)
                .sqrt();
            (c, spread)
        })
        .collect();
    let mut pairs = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let diff: Vec<f64> = stats[a]
                .0
                .iter()
                .zip(&stats[b].0)
                .map(|(x, y)| x - y)
                .collect();
            pairs.push((
                groups[a].0.clone(),
                groups[b].0.clone(),
                norm(&diff),
                stats[a].1.max(stats[b].1),
            ));
        }
    }
    let report = SeparabilityReport { pairs };
    if let Some((a, b, dist, spread)) = report
        .pairs
        .iter()
        .find(|(_, _, dist, spread)| *dist <= 5.0 * spread)
    {
        return Err(UldaError::invalid(format!(
            "domains {a} and {b} are not separable: centroid distance {dist:.4} <= 5 x spread {spread:.4}"
        )));
    }
    Ok(report)
}

const MANIFEST_MAGIC: &str = "ulda-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

fn fmt_list(xs: &[f64]) -> String {
    xs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(what: &'static str, raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| UldaError::format(what, format!("bad number {t:?}")))
        })
        .collect()
}

/// Manifest text for a dataset directory.
pub fn manifest_text(spec: &ToySpec) -> String {
    let mut h = Header::new();
    h.push("format_version", DATASET_FORMAT_VERSION);
    h.push("seed", spec.seed);
    h.push("n_classes", spec.n_classes);
    h.push("image_size", spec.image_size);
    h.push("channels", CHANNELS);
    h.push("n_train", spec.n_train);
    h.push("n_eval_per_domain", spec.n_eval_per_domain);
    h.push("n_calibration", spec.n_calibration);
    h.push("pixel_noise", spec.pixel_noise);
    h.push("domains", spec.domain_ids().join(","));
    for s in &spec.domain_shifts {
        h.push(&format!("shift.{}.gain", s.domain), fmt_list(&s.gain));
        h.push(&format!("shift.{}.bias", s.domain), fmt_list(&s.bias));
        h.push(&format!("shift.{}.noise", s.domain), s.noise);
    }
    h.push("train_images", "train_images.f64");
    h.push("train_labels", "train_labels.u8");
    h.push("eval_images", "eval_images.f64");
    h.push("eval_labels", "eval_labels.u8");
    h.push("spec_digest", spec.digest());
    String::from_utf8(container::encode(MANIFEST_MAGIC, &h, &[])).expect("manifest is text")
}

/// Parses a manifest back into the spec it describes, checking its digest.
pub fn parse_manifest(bytes: &[u8]) -> Result<ToySpec> {
    const WHAT: &str = "dataset manifest";
    let (h, rest) = container::decode(WHAT, MANIFEST_MAGIC, bytes)?;
    if !rest.is_empty() {
        return Err(UldaError::format(WHAT, "unexpected bytes after header"));
    }
    let version: u32 = h.parse(WHAT, "format_version")?;
    if version != DATASET_FORMAT_VERSION {
        return Err(UldaError::Version {
            what: WHAT,
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let channels: usize = h.parse(WHAT, "channels")?;
    if channels != CHANNELS {
        return Err(UldaError::format(
            WHAT,
            format!("expected {CHANNELS} channels"),
        ));
    }
    let domains_raw = h.require(WHAT, "domains")?;
    let mut domain_shifts = Vec::new();
    if !domains_raw.is_empty() {
        for d in domains_raw.split(',') {
            domain_shifts.push(DomainShift {
                domain: d.to_string(),
                gain: parse_list(WHAT, h.require(WHAT, &format!("shift.{d}.gain"))?)?,
                bias: parse_list(WHAT, h.require(WHAT, &format!("shift.{d}.bias"))?)?,
                noise: h.parse(WHAT, &format!("shift.{d}.noise"))?,
            });
        }
    }
    let spec = ToySpec {
        n_classes: h.parse(WHAT, "n_classes")?,
        image_size: h.parse(WHAT, "image_size")?,
        n_train: h.parse(WHAT, "n_train")?,
        n_eval_per_domain: h.parse(WHAT, "n_eval_per_domain")?,
        n_calibration: h.parse(WHAT, "n_calibration")?,
        pixel_noise: h.parse(WHAT, "pixel_noise")?,
        domain_shifts,
        seed: h.parse(WHAT, "seed")?,
    };
    spec.validate()
        .map_err(|e| UldaError::format(WHAT, e.to_string()))?;
    let digest = h.require(WHAT, "spec_digest")?;
    if digest != spec.digest() {
        return Err(UldaError::DigestMismatch {
            found: digest.to_string(),
            expected: spec.digest(),
        });
    }
    Ok(spec)
}

/// Decodes `count` images of `size x size x 3` little-endian f64 values.
pub fn decode_images(bytes: &[u8], count: usize, size: usize) -> Result<Vec<Image>> {
    const WHAT: &str = "image array";
    let per = size
        .checked_mul(size)
        .and_then(|v| v.checked_mul(CHANNELS * 8))
        .ok_or_else(|| UldaError::format(WHAT, "image size overflows"))?;
    if count.checked_mul(per) != Some(bytes.len()) {
        return Err(UldaError::format(
            WHAT,
            format!(
                "{} bytes do not hold {count} images of {size}x{size}",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(per.max(1))
        .take(count)
        .map(|chunk| {
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Image::new(size, size, data).map_err(|e| UldaError::format(WHAT, e.to_string()))
        })
        .collect()
}

pub fn decode_labels(
    bytes: &[u8],
    count: usize,
    size: usize,
    n_classes: usize,
) -> Result<Vec<LabelMap>> {
    const WHAT: &str = "label array";
    let per = size
        .checked_mul(size)
        .ok_or_else(|| UldaError::format(WHAT, "label size overflows"))?;
    if count.checked_mul(per) != Some(bytes.len()) {
        return Err(UldaError::format(
            WHAT,
            format!(
                "{} bytes do not hold {count} label maps of {size}x{size}",
                bytes.len()
            ),
        ));
    }
    bytes
        .chunks_exact(per.max(1))
        .take(count)
        .map(|chunk| {
            LabelMap::new(size, size, n_classes, chunk.to_vec())
                .map_err(|e| UldaError::format(WHAT, e.to_string()))
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| UldaError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| UldaError::io(path, e))
}

/// Writes the manifest and the four flat arrays into `dir`.
pub fn write_dataset(
    dir: &Path,
    spec: &ToySpec,
    source: &SourceDataset,
    split: &EvalSplit,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| UldaError::io(dir, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in &source.samples {
        container::put_f64s(&mut images, s.image.as_slice());
        labels.extend_from_slice(s.labels.as_slice());
    }
    write_file(&dir.join("train_images.f64"), &images)?;
    write_file(&dir.join("train_labels.u8"), &labels)?;
    images.clear();
    labels.clear();
    for s in &split.samples {
        container::put_f64s(&mut images, s.image.as_slice());
        labels.extend_from_slice(s.labels.as_slice());
    }
    write_file(&dir.join("eval_images.f64"), &images)?;
    write_file(&dir.join("eval_labels.u8"), &labels)?;
    write_file(&dir.join(MANIFEST_FILE), manifest_text(spec).as_bytes())
}

pub fn read_spec(dir: &Path) -> Result<ToySpec> {
    parse_manifest(&read_file(&dir.join(MANIFEST_FILE))?)
}

pub fn load_source(dir: &Path) -> Result<(ToySpec, SourceDataset)> {
    let spec = read_spec(dir)?;
    let images = decode_images(
        &read_file(&dir.join("train_images.f64"))?,
        spec.n_train,
        spec.image_size,
    )?;
    let labels = decode_labels(
        &read_file(&dir.join("train_labels.u8"))?,
        spec.n_train,
        spec.image_size,
        spec.n_classes,
    )?;
    let samples = images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (image, labels))| Sample {
            id: format!("src-{i:04}"),
            image,
            labels,
        })
        .collect();
    Ok((spec, SourceDataset { samples }))
}

pub fn load_eval(dir: &Path) -> Result<(ToySpec, EvalSplit)> {
    let spec = read_spec(dir)?;
    let count = spec.domain_shifts.len() * spec.n_eval_per_domain;
    let images = decode_images(
        &read_file(&dir.join("eval_images.f64"))?,
        count,
        spec.image_size,
    )?;
    let labels = decode_labels(
        &read_file(&dir.join("eval_labels.u8"))?,
        count,
        spec.image_size,
        spec.n_classes,
    )?;
    let domains = spec.domain_ids();
    let samples = images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (image, labels))| {
            let d = &domains[i / spec.n_eval_per_domain];
            EvalSample {
                id: format!("eval-{d}-{:04}", i % spec.n_eval_per_domain),
                domain: d.clone(),
                image,
                labels,
            }
        })
        .collect();
    Ok((spec, EvalSplit { domains, samples }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySpec {
        ToySpec {
            n_train: 5,
            n_eval_per_domain: 2,
            ..ToySpec::default()
        }
    }

    #[test]
    fn source_count_labels_and_determinism() {
        let spec = ToySpec::default();
        let a = generate_source(&spec).unwrap();
        assert_eq!(a.samples.len(), 40);
        assert!(a
            .samples
            .iter()
            .all(|s| s.labels.as_slice().iter().all(|&l| (l as usize) < 4)));
        assert_eq!(a, generate_source(&spec).unwrap());
    }

    #[test]
    fn tiny_images_are_rejected() {
        let spec = ToySpec {
            image_size: 4,
            ..small()
        };
        assert!(generate_source(&spec).is_err());
    }

    #[test]
    fn identity_shift_leaves_image_unchanged() {
        let mut spec = small();
        spec.domain_shifts.push(DomainShift::identity("clear"));
        let img = &generate_source(&spec).unwrap().samples[0].image;
        assert_eq!(&apply_domain_shift(img, "clear", &spec, 3).unwrap(), img);
        assert!(apply_domain_shift(img, "mars", &spec, 3).is_err());
    }

    #[test]
    fn night_gain_scales_channel_means() {
        let spec = ToySpec {
            domain_shifts: vec![DomainShift {
                domain: "night".into(),
                gain: vec![0.3; 3],
                bias: vec![0.05, 0.0, 0.1],
                noise: 0.01,
            }],
            ..small()
        };
        let img = &generate_source(&spec).unwrap().samples[1].image;
        let before = img.channel_means();
        let after = apply_domain_shift(img, "night", &spec, 9)
            .unwrap()
            .channel_means();
        for c in 0..3 {
            let want = 0.3 * before[c] + spec.domain_shifts[0].bias[c];
            // 1024 pixels of sd 0.01 noise: mean error ~3e-4
            assert!(
                (after[c] - want).abs() < 2e-3,
                "{c}: {} vs {want}",
                after[c]
            );
        }
    }

    #[test]
    fn eval_split_is_disjoint_and_counted() {
        let spec = ToySpec {
            n_eval_per_domain: 10,
            ..small()
        };
        let split = make_eval_split(&spec).unwrap();
        assert_eq!(split.samples.len(), 30);
        let train = generate_source(&spec).unwrap();
        for e in &split.samples {
            assert!(train.samples.iter().all(|t| t.id != e.id));
            assert!(train.samples.iter().all(|t| t.labels != e.labels));
        }
    }

    #[test]
    fn manifest_round_trip_and_digest_check() {
        let spec = ToySpec::default();
        let text = manifest_text(&spec);
        assert_eq!(parse_manifest(text.as_bytes()).unwrap(), spec);
        let tampered = text.replace("n_train = 40", "n_train = 41");
        assert!(matches!(
            parse_manifest(tampered.as_bytes()),
            Err(UldaError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let source = generate_source(&spec).unwrap();
        let split = make_eval_split(&spec).unwrap();
        write_dataset(dir.path(), &spec, &source, &split).unwrap();
        let (s2, src2) = load_source(dir.path()).unwrap();
        let (_, split2) = load_eval(dir.path()).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(src2, source);
        assert_eq!(split2, split);
    }

    #[test]
    fn array_decoders_reject_wrong_sizes() {
        assert!(decode_images(&[0u8; 10], 1, 8).is_err());
        assert!(decode_images(&[], usize::MAX, usize::MAX).is_err());
        assert!(decode_labels(&[0u8; 64], 1, 8, 2).is_ok());
        assert!(decode_labels(&[7u8; 64], 1, 8, 2).is_err());
    }
}
