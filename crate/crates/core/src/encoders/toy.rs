//! Weight-free joint embedding for the synthetic world.
//!
//! The vision side is a fixed-seed stride-`s` patch convolution (a linear
//! first layer) with mean pooling. The text side is calibrated against it:
//! each registered domain token maps to the renormalized mean pooled feature
//! of domain-shifted calibration images, and each class-in-domain phrase maps
//! to the renormalized mean feature of that class's pixels under the shift.
//! Unregistered words contribute small hash-seeded vectors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{domain_suffix, EncoderPair, TextEncoder, VisionEncoder};
use crate::error::{Result, UldaError};
use crate::seed;
use crate::tensor::{normalized, FeatureMap};
use crate::toyworld::{apply_domain_shift, calibration_set, Image, ToySpec, CHANNELS};

pub const DESCRIPTOR: &str = "toy (patch-conv, mean pooling, calibrated text)";

const PIXEL_MEAN: f64 = 0.25;
/// Puts typical feature norms in the tens, so a unit learning rate on
/// cosine losses takes small relative steps.
const OUTPUT_GAIN: f64 = 32.0;

/// Weight of each unregistered word relative to a unit concept vector.
const FILLER_WEIGHT: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct ToyVisionEncoder {
    d: usize,
    stride: usize,
    /// `d x (stride * stride * 3)`, patch pixels in row-major order.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ToyVisionEncoder {
    pub fn new(d: usize, stride: usize, seed: u64) -> Result<Self> {
        if d == 0 || stride == 0 {
            return Err(UldaError::invalid(
                "toy encoder needs positive dim and stride",
            ));
        }
        let fan_in = stride * stride * CHANNELS;
        let mut rng = seed::rng(seed, &["toy-vision"]);
        let scale = OUTPUT_GAIN / (fan_in as f64).sqrt();
        let weight = (0..d * fan_in)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                scale * x
            })
            .collect::<Vec<f64>>();
        // pixels are centred at PIXEL_MEAN before the convolution; folded into the bias
        let bias = (0..d)
            .map(|c| {
                let row: f64 = weight[c * fan_in..(c + 1) * fan_in].iter().sum();
                rng.random_range(-0.05..0.05) - PIXEL_MEAN * row
            })
            .collect();
        Ok(ToyVisionEncoder {
            d,
            stride,
            weight,
            bias,
        })
    }
}

impl VisionEncoder for ToyVisionEncoder {
    fn feature_dim(&self) -> usize {
        self.d
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn encode_features(&self, image: &Image) -> Result<FeatureMap> {
        conv_patches(image, self.stride, self.d, &self.weight, &self.bias)
    }
}

/// Non-overlapping stride-`s` patch convolution shared with the external
/// adapter.
pub(crate) fn conv_patches(
    image: &Image,
    stride: usize,
    d: usize,
    weight: &[f64],
    bias: &[f64],
) -> Result<FeatureMap> {
    let (h, w) = (image.height(), image.width());
    if h % stride != 0 || w % stride != 0 {
        return Err(UldaError::invalid(format!(
            "image {h}x{w} is not divisible by encoder stride {stride}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let fan_in = stride * stride * CHANNELS;
    let mut patch = vec![0.0; fan_in];
    let mut out = Vec::with_capacity(oh * ow * d);
    for by in 0..oh {
        for bx in 0..ow {
            let mut i = 0;
            for y in by * stride..(by + 1) * stride {
                for x in bx * stride..(bx + 1) * stride {
                    patch[i..i + CHANNELS].copy_from_slice(image.pixel(y, x));
                    i += CHANNELS;
                }
            }
            for c in 0..d {
                let row = &weight[c * fan_in..(c + 1) * fan_in];
                out.push(bias[c] + row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>());
            }
        }
    }
    FeatureMap::new(oh, ow, d, out)
}

#[derive(Debug, Clone)]
struct DomainConcept {
    tokens: Vec<String>,
    vector: Vec<f64>,
    class_vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    d: usize,
    seed: u64,
    /// Tokenized class names, index-aligned with the palette.
    classes: Vec<Vec<String>>,
    source_class_vectors: Vec<Vec<f64>>,
    domains: Vec<DomainConcept>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == ':' || c == '_' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Mean pooled scene vector and per-class mean feature over a set of images.
fn calibrate_images(
    vision: &dyn VisionEncoder,
    images: &[(Image, &crate::hca::LabelMap)],
    n_classes: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = vision.feature_dim();
    let mut scene = vec![0.0; d];
    let mut class_sum = vec![vec![0.0; d]; n_classes];
    for (image, labels) in images {
        let f = vision.encode_features(image)?;
        for (a, b) in scene.iter_mut().zip(vision.pool_scene(&f)?) {
            *a += b;
        }
        let coarse = labels.downsample(labels.height() / f.height())?;
        for (p, &l) in coarse.as_slice().iter().enumerate() {
            if (l as usize) < n_classes {
                for (a, b) in class_sum[l as usize].iter_mut().zip(f.pixel(p)) {
                    *a += b;
                }
            }
        }
    }
    let class_vectors = class_sum
        .iter()
        .enumerate()
        .map(|(k, v)| {
            normalized(v).map_err(|_| {
                UldaError::invalid(format!("class {k} never appears in the calibration set"))
            })
        })
        .collect::<Result<_>>()?;
    Ok((normalized(&scene)?, class_vectors))
}

impl ToyTextEncoder {
    /// Calibrates text concepts for `domains` (`(id, description)` pairs)
    /// and `class_names` against `vision` on the spec's calibration images.
    pub fn calibrate(
        vision: &dyn VisionEncoder,
        spec: &ToySpec,
        domains: &[(String, String)],
        class_names: &[String],
        seed: u64,
    ) -> Result<Self> {
        if class_names.len() != spec.n_classes {
            return Err(UldaError::invalid(format!(
                "{} class names for {} toy classes",
                class_names.len(),
                spec.n_classes
            )));
        }
        let cal = calibration_set(spec)?;
        if cal.is_empty() {
            return Err(UldaError::invalid("calibration set is empty"));
        }
        let plain: Vec<_> = cal.iter().map(|s| (s.image.clone(), &s.labels)).collect();
        let (_, source_class_vectors) = calibrate_images(vision, &plain, spec.n_classes)?;

        let mut concepts = Vec::with_capacity(domains.len());
        for (id, description) in domains {
            let shifted = cal
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let noise_seed = seed::derive(spec.seed, &["cal-noise", id, &i.to_string()]);
                    Ok((
                        apply_domain_shift(&s.image, id, spec, noise_seed)?,
                        &s.labels,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let (vector, class_vectors) = calibrate_images(vision, &shifted, spec.n_classes)?;
            let mut tokens = vec![id.to_lowercase(), format!("domain:{}", id.to_lowercase())];
            let suffix = domain_suffix(description).to_lowercase();
            if !suffix.is_empty() && !tokens.contains(&suffix) {
                tokens.push(suffix);
            }
            concepts.push(DomainConcept {
                tokens,
                vector,
                class_vectors,
            });
        }
        Ok(ToyTextEncoder {
            d: vision.feature_dim(),
            seed,
            classes: class_names.iter().map(|c| tokenize(c)).collect(),
            source_class_vectors,
            domains: concepts,
        })
    }

    fn filler(&self, token: &str) -> Vec<f64> {
        let mut rng = seed::rng(self.seed, &["toy-word", token]);
        let v: Vec<f64> = (0..self.d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalized(&v).unwrap_or_else(|_| vec![0.0; self.d])
    }
}

impl TextEncoder for ToyTextEncoder {
    fn text_dim(&self) -> usize {
        self.d
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(UldaError::invalid(format!("no words in {text:?}")));
        }
        let mut used = vec![false; tokens.len()];
        let mut classes = Vec::new();
        for (k, name) in self.classes.iter().enumerate() {
            if name.is_empty() || name.len() > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - name.len() {
                if tokens[start..start + name.len()] == name[..] {
                    classes.push(k);
                    used[start..start + name.len()]
                        .iter_mut()
                        .for_each(|u| *u = true);
                }
            }
        }
        let mut domains = Vec::new();
        for (i, t) in tokens.iter().enumerate() {
            if used[i] {
                continue;
            }
            if let Some(j) = self.domains.iter().position(|c| c.tokens.contains(t)) {
                domains.push(j);
                used[i] = true;
            }
        }

        let mut v = vec![0.0; self.d];
        let mut add = |src: &[f64], w: f64| {
            for (a, b) in v.iter_mut().zip(src) {
                *a += w * b;
            }
        };
        match (classes.is_empty(), domains.is_empty()) {
            (false, false) => {
                for &k in &classes {
                    for &j in &domains {
                        add(&self.domains[j].class_vectors[k], 1.0);
                    }
                }
            }
            (false, true) => classes
                .iter()
                .for_each(|&k| add(&self.source_class_vectors[k], 1.0)),
            (true, false) => domains
                .iter()
                .for_each(|&j| add(&self.domains[j].vector, 1.0)),
            (true, true) => {}
        }
        for (t, _) in tokens.iter().zip(&used).filter(|(_, &u)| !u) {
            add(&self.filler(t), FILLER_WEIGHT);
        }
        Ok(v)
    }
}

impl EncoderPair {
    /// Builds the toy pair: patch-conv vision encoder plus a text encoder
    /// calibrated on `spec`'s calibration images.
    pub fn toy(
        spec: &ToySpec,
        domains: &[(String, String)],
        class_names: &[String],
        feature_dim: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let vision = ToyVisionEncoder::new(feature_dim, stride, seed)?;
        let text = ToyTextEncoder::calibrate(&vision, spec, domains, class_names, seed)?;
        Ok(EncoderPair {
            vision: Box::new(vision),
            text: Box::new(text),
            projection: None,
            descriptor: DESCRIPTOR.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{build_prompt_set, DEFAULT_TEMPLATES};
    use crate::tensor::{cosine, norm};

    fn pair() -> EncoderPair {
        let spec = ToySpec::default();
        let domains: Vec<(String, String)> = spec
            .domain_ids()
            .into_iter()
            .map(|d| (d.clone(), format!("driving in {d}")))
            .collect();
        let classes: Vec<String> = ["road", "vegetation", "sky", "building"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        EncoderPair::toy(&spec, &domains, &classes, 16, 4, 11).unwrap()
    }

    #[test]
    fn feature_shape_and_determinism() {
        let p = pair();
        let img = Image::filled(32, 32, 0.25);
        let f = p.encode_image_features(&img).unwrap();
        assert_eq!((f.height(), f.width(), f.dim()), (8, 8, 16));
        assert_eq!(f, p.encode_image_features(&img).unwrap());
        assert!(p
            .encode_image_features(&Image::filled(30, 32, 0.0))
            .is_err());
    }

    #[test]
    fn zero_and_one_images_differ() {
        let p = pair();
        let a = p.encode_image_features(&Image::filled(8, 8, 0.0)).unwrap();
        let b = p.encode_image_features(&Image::filled(8, 8, 1.0)).unwrap();
        let diff = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn text_is_unit_and_deterministic() {
        let p = pair();
        for prompt in [
            "driving at night",
            "zzz qqq",
            "the sky in fog",
            "domain:fog",
        ] {
            let v = p.encode_text(prompt, DEFAULT_TEMPLATES).unwrap();
            assert!((norm(&v) - 1.0).abs() < 1e-12);
            assert_eq!(v, p.encode_text(prompt, DEFAULT_TEMPLATES).unwrap());
        }
        assert!(p.encode_text("", DEFAULT_TEMPLATES).is_err());
        assert!(p.encode_text("fog", &[] as &[&str]).is_err());
    }

    #[test]
    fn class_rows_are_unit_and_distinct() {
        let p = pair();
        let classes: Vec<String> = ["road", "vegetation", "sky", "building"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let prompts = build_prompt_set(&classes, "driving in fog").unwrap();
        let t = p.encode_class_text(&prompts, "fog").unwrap();
        assert_eq!(t.n_classes(), 4);
        for i in 0..4 {
            assert!((norm(t.row(i)) - 1.0).abs() < 1e-12);
            for j in 0..i {
                assert!(cosine(t.row(i), t.row(j)) < 1.0 - 1e-3);
            }
        }
    }

    #[test]
    fn tokenizer_keeps_domain_tokens() {
        assert_eq!(
            tokenize("A photo of domain:Fog."),
            vec!["a", "photo", "of", "domain:fog"]
        );
    }
}
