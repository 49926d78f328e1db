//! Stage-2 output: the unified head, the rectifier, and provenance.
//!
//! Container magic `ulda-checkpoint`. Header keys: `format_version`,
//! `config_digest`, `iterations`, `rectifier_mode`, `head_in_dim`,
//! `head_hidden`, `head_classes`, `head_upsample`, `rectifier_dim` (0 when
//! absent), `rng_seed`, `rng_word_pos`. Payload: head parameters
//! (`w1, b1, w2, b2`), then rectifier parameters (`beta, weight, bias`).

use std::fmt;
use std::str::FromStr;

use crate::container::{self, Header, PayloadReader};
use crate::error::{Result, UldaError};
use crate::segmentation::SegHead;
use crate::tdr::RectifierParams;
use crate::toyworld::hex_digest;

pub const CHECKPOINT_MAGIC: &str = "ulda-checkpoint";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const WHAT: &str = "checkpoint";
const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RectifierMode {
    /// Head fine-tuned on plain simulated features.
    Off,
    Learned,
    /// Rectifier in the graph with beta pinned to zero and frozen.
    ZeroBeta,
}

impl fmt::Display for RectifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RectifierMode::Off => "off",
            RectifierMode::Learned => "learned",
            RectifierMode::ZeroBeta => "zero_beta",
        })
    }
}

impl FromStr for RectifierMode {
    type Err = UldaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(RectifierMode::Off),
            "learned" => Ok(RectifierMode::Learned),
            "zero_beta" => Ok(RectifierMode::ZeroBeta),
            other => Err(UldaError::format(
                WHAT,
                format!("unknown rectifier mode {other:?}"),
            )),
        }
    }
}

/// Position of the Stage-2 sampling RNG when training stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngSummary {
    pub seed_hex: String,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: SegHead,
    pub rectifier: Option<RectifierParams>,
    pub rectifier_mode: RectifierMode,
    pub config_digest: String,
    pub iterations: usize,
    pub rng: RngSummary,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.head;
        let mut header = Header::new();
        header.push("format_version", CHECKPOINT_FORMAT_VERSION);
        header.push("config_digest", &self.config_digest);
        header.push("iterations", self.iterations);
        header.push("rectifier_mode", self.rectifier_mode);
        header.push("head_in_dim", h.in_dim);
        header.push("head_hidden", h.hidden);
        header.push("head_classes", h.n_classes);
        header.push("head_upsample", h.upsample);
        header.push("rectifier_dim", self.rectifier.as_ref().map_or(0, |r| r.d));
        header.push("rng_seed", &self.rng.seed_hex);
        header.push("rng_word_pos", self.rng.word_pos);
        let mut payload = Vec::new();
        container::put_f64s(&mut payload, &h.flat());
        if let Some(r) = &self.rectifier {
            container::put_f64s(&mut payload, &r.flat());
        }
        container::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::decode(WHAT, CHECKPOINT_MAGIC, bytes)?;
        let found: u32 = header.parse(WHAT, "format_version")?;
        if found != CHECKPOINT_FORMAT_VERSION {
            return Err(UldaError::Version {
                what: WHAT,
                found,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let dim = |key: &str, allow_zero: bool| -> Result<usize> {
            let v: usize = header.parse(WHAT, key)?;
            if (v == 0 && !allow_zero) || v > MAX_DIM {
                return Err(UldaError::format(
                    WHAT,
                    format!("{key} = {v} is out of range"),
                ));
            }
            Ok(v)
        };
        let (in_dim, hidden, n_classes, upsample) = (
            dim("head_in_dim", false)?,
            dim("head_hidden", false)?,
            dim("head_classes", false)?,
            dim("head_upsample", false)?,
        );
        let rect_dim = dim("rectifier_dim", true)?;
        let rectifier_mode: RectifierMode = header.require(WHAT, "rectifier_mode")?.parse()?;
        let seed_hex = header.require(WHAT, "rng_seed")?.to_string();
        if seed_hex.len() != 64 || !seed_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(UldaError::format(WHAT, "rng_seed must be 64 hex digits"));
        }

        let mut r = PayloadReader::new(WHAT, payload);
        let mut head = SegHead {
            in_dim,
            hidden,
            n_classes,
            upsample,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; n_classes * hidden],
            b2: vec![0.0; n_classes],
        };
        head.set_flat(&r.f64s(head.parameter_count())?);
        let rectifier = if rect_dim > 0 {
            let mut p = RectifierParams::zeros(rect_dim);
            p.set_flat(&r.f64s(1 + 2 * rect_dim * rect_dim + 2 * rect_dim)?);
            Some(p)
        } else {
            None
        };
        r.finish()?;
        if !head.is_finite() || rectifier.as_ref().is_some_and(|p| !p.is_finite()) {
            return Err(UldaError::NonFinite {
                component: "checkpoint parameters".into(),
            });
        }
        Ok(Checkpoint {
            head,
            rectifier,
            rectifier_mode,
            config_digest: header.require(WHAT, "config_digest")?.to_string(),
            iterations: header.parse(WHAT, "iterations")?,
            rng: RngSummary {
                seed_hex,
                word_pos: header.parse(WHAT, "rng_word_pos")?,
            },
        })
    }

    /// SHA-256 of the serialized checkpoint; recorded in metrics reports.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}
