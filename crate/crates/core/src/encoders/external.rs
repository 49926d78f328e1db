//! Adapter for exported real encoders.
//!
//! `ULDA_ENCODER_DIR` must contain:
//!
//! * `vision.weights`: magic `ulda-vision-weights`, header keys
//!   `format_version`, `feature_dim`, `stride`, `channels` (must be 3);
//!   payload `feature_dim x (stride*stride*channels)` weights then
//!   `feature_dim` biases.
//! * `text.embeddings`: magic `ulda-text-embeddings`, header keys
//!   `format_version`, `feature_dim`, `text_dim`, `entry_count` and one
//!   `entry.<i> = <hex of the utf-8 templated prompt>` per row; payload the
//!   `feature_dim x text_dim` projection then `entry_count x text_dim`
//!   embeddings.
//!
//! Text is looked up, not computed: prompts missing from the table are an
//! error. Nothing falls back to the toy encoder.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::toy::conv_patches;
use super::{EncoderPair, TextEncoder, VisionEncoder};
use crate::container::{self, Header, PayloadReader};
use crate::error::{Result, UldaError};
use crate::tensor::FeatureMap;
use crate::toyworld::{Image, CHANNELS};

pub const ENV_VAR: &str = "ULDA_ENCODER_DIR";
pub const VISION_FILE: &str = "vision.weights";
pub const TEXT_FILE: &str = "text.embeddings";
pub const VISION_MAGIC: &str = "ulda-vision-weights";
pub const TEXT_MAGIC: &str = "ulda-text-embeddings";
pub const FORMAT_VERSION: u32 = 1;
pub const DESCRIPTOR: &str = "external-adapter";

const MAX_DIM: usize = 1 << 16;

fn check_version(what: &'static str, header: &Header) -> Result<()> {
    let found: u32 = header.parse(what, "format_version")?;
    if found != FORMAT_VERSION {
        return Err(UldaError::Version {
            what,
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn bounded(what: &'static str, header: &Header, key: &str) -> Result<usize> {
    let v: usize = header.parse(what, key)?;
    if v == 0 || v > MAX_DIM {
        return Err(UldaError::format(
            what,
            format!("{key} = {v} is out of range"),
        ));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalVision {
    d: usize,
    stride: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ExternalVision {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "vision weights";
        let (header, payload) = container::decode(WHAT, VISION_MAGIC, bytes)?;
        check_version(WHAT, &header)?;
        let d = bounded(WHAT, &header, "feature_dim")?;
        let stride = bounded(WHAT, &header, "stride")?;
        let channels: usize = header.parse(WHAT, "channels")?;
        if channels != CHANNELS {
            return Err(UldaError::format(
                WHAT,
                format!("expected {CHANNELS} channels, got {channels}"),
            ));
        }
        let fan_in = stride
            .checked_mul(stride)
            .and_then(|x| x.checked_mul(channels))
            .filter(|&x| x <= MAX_DIM)
            .ok_or_else(|| UldaError::format(WHAT, "stride too large"))?;
        let mut r = PayloadReader::new(WHAT, payload);
        let weight = r.f64s(d * fan_in)?;
        let bias = r.f64s(d)?;
        r.finish()?;
        Ok(ExternalVision {
            d,
            stride,
            weight,
            bias,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::new();
        h.push("format_version", FORMAT_VERSION);
        h.push("feature_dim", self.d);
        h.push("stride", self.stride);
        h.push("channels", CHANNELS);
        let mut payload = Vec::new();
        container::put_f64s(&mut payload, &self.weight);
        container::put_f64s(&mut payload, &self.bias);
        container::encode(VISION_MAGIC, &h, &payload)
    }

    pub fn new(d: usize, stride: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if d == 0
            || stride == 0
            || weight.len() != d * stride * stride * CHANNELS
            || bias.len() != d
        {
            return Err(UldaError::invalid(
                "vision weights have inconsistent shapes",
            ));
        }
        Ok(ExternalVision {
            d,
            stride,
            weight,
            bias,
        })
    }
}

impl VisionEncoder for ExternalVision {
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

#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    pub feature_dim: usize,
    pub text_dim: usize,
    pub projection: Vec<f64>,
    pub entries: Vec<(String, Vec<f64>)>,
}

fn unhex(what: &'static str, s: &str) -> Result<String> {
    let bytes = hex::decode(s).map_err(|_| UldaError::format(what, "prompt key is not hex"))?;
    String::from_utf8(bytes).map_err(|_| UldaError::format(what, "prompt key is not utf-8"))
}

impl TextTable {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "text embeddings";
        let (header, payload) = container::decode(WHAT, TEXT_MAGIC, bytes)?;
        check_version(WHAT, &header)?;
        let feature_dim = bounded(WHAT, &header, "feature_dim")?;
        let text_dim = bounded(WHAT, &header, "text_dim")?;
        let count: usize = header.parse(WHAT, "entry_count")?;
        let mut r = PayloadReader::new(WHAT, payload);
        let projection = r.f64s(feature_dim * text_dim)?;
        if count > r.remaining() / (8 * text_dim) {
            return Err(UldaError::format(WHAT, "entry_count exceeds payload"));
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let prompt = unhex(WHAT, header.require(WHAT, &format!("entry.{i}"))?)?;
            if entries
                .iter()
                .any(|(p, _): &(String, Vec<f64>)| *p == prompt)
            {
                return Err(UldaError::format(
                    WHAT,
                    format!("duplicate prompt {prompt:?}"),
                ));
            }
            entries.push((prompt, r.f64s(text_dim)?));
        }
        r.finish()?;
        Ok(TextTable {
            feature_dim,
            text_dim,
            projection,
            entries,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = Header::new();
        h.push("format_version", FORMAT_VERSION);
        h.push("feature_dim", self.feature_dim);
        h.push("text_dim", self.text_dim);
        h.push("entry_count", self.entries.len());
        for (i, (p, _)) in self.entries.iter().enumerate() {
            h.push(&format!("entry.{i}"), hex::encode(p));
        }
        let mut payload = Vec::new();
        container::put_f64s(&mut payload, &self.projection);
        for (_, v) in &self.entries {
            container::put_f64s(&mut payload, v);
        }
        container::encode(TEXT_MAGIC, &h, &payload)
    }
}

#[derive(Debug, Clone)]
struct TableText {
    text_dim: usize,
    lookup: HashMap<String, Vec<f64>>,
}

impl TextEncoder for TableText {
    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.lookup
            .get(text)
            .cloned()
            .ok_or_else(|| UldaError::MissingWeights(format!("no text embedding for {text:?}")))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            UldaError::MissingWeights(format!("{} does not exist", path.display()))
        } else {
            UldaError::io(path, e)
        }
    })
}

impl EncoderPair {
    pub fn external_from_dir(dir: &Path) -> Result<Self> {
        let vision = ExternalVision::from_bytes(&read(&dir.join(VISION_FILE))?)?;
        let table = TextTable::from_bytes(&read(&dir.join(TEXT_FILE))?)?;
        if table.feature_dim != vision.d {
            return Err(UldaError::invalid(format!(
                "text projection targets dim {}, vision produces {}",
                table.feature_dim, vision.d
            )));
        }
        Ok(EncoderPair {
            vision: Box::new(vision),
            text: Box::new(TableText {
                text_dim: table.text_dim,
                lookup: table.entries.iter().cloned().collect(),
            }),
            projection: Some(table.projection),
            descriptor: DESCRIPTOR.to_string(),
        })
    }

    /// Loads from the directory named by `ULDA_ENCODER_DIR`.
    pub fn external_from_env() -> Result<Self> {
        let dir = std::env::var_os(ENV_VAR)
            .map(PathBuf::from)
            .ok_or_else(|| UldaError::MissingWeights(format!("{ENV_VAR} is not set")))?;
        Self::external_from_dir(&dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::norm;

    fn identity(d: usize) -> Vec<f64> {
        (0..d * d)
            .map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn vision_round_trip() {
        let v =
            ExternalVision::new(2, 1, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.5], vec![0.0, -1.0]).unwrap();
        let back = ExternalVision::from_bytes(&v.to_bytes()).unwrap();
        assert_eq!(back, v);
        let f = back.encode_features(&Image::filled(2, 2, 1.0)).unwrap();
        assert_eq!(f.pixel(0), &[1.0, 0.5]);
    }

    #[test]
    fn missing_dir_reports_missing_weights() {
        let dir = tempfile::tempdir().unwrap();
        let err = EncoderPair::external_from_dir(dir.path()).unwrap_err();
        assert!(matches!(err, UldaError::MissingWeights(_)), "{err}");
    }

    #[test]
    fn loads_pair_and_looks_up_text() {
        let dir = tempfile::tempdir().unwrap();
        let v = ExternalVision::new(2, 1, vec![1.0; 6], vec![0.0; 2]).unwrap();
        std::fs::write(dir.path().join(VISION_FILE), v.to_bytes()).unwrap();
        let t = TextTable {
            feature_dim: 2,
            text_dim: 2,
            projection: identity(2),
            entries: vec![("a photo of fog.".into(), vec![3.0, 4.0])],
        };
        let bytes = t.to_bytes();
        assert_eq!(TextTable::from_bytes(&bytes).unwrap(), t);
        std::fs::write(dir.path().join(TEXT_FILE), bytes).unwrap();
        let pair = EncoderPair::external_from_dir(dir.path()).unwrap();
        assert_eq!(pair.descriptor, DESCRIPTOR);
        let e = pair.encode_text("fog", &["a photo of {}."]).unwrap();
        assert!((norm(&e) - 1.0).abs() < 1e-12);
        assert!(matches!(
            pair.encode_text("rain", &["a photo of {}."]),
            Err(UldaError::MissingWeights(_))
        ));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let v = ExternalVision::new(1, 1, vec![1.0; 3], vec![0.0]).unwrap();
        let mut bytes = v.to_bytes();
        let at = bytes
            .windows(12)
            .position(|w| w == b"channels = 3")
            .unwrap();
        bytes[at + 11] = b'4';
        assert!(ExternalVision::from_bytes(&bytes).is_err());
    }
}
