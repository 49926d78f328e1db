//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! classes = ["road", "vegetation", "sky", "building"]
//!
//! [[domains]]
//! id = "night"
//! description = "driving at night"
//!
//! [encoder]
//! kind = "toy"          # or "external" (reads ULDA_ENCODER_DIR)
//! feature_dim = 16
//! stride = 4
//! seed = 11
//!
//! [stage1]
//! steps = 100
//! lr = 1.0
//!
//! [stage2]
//! iterations = 2000
//! rectifier = true
//!
//! [paths]
//! dataset = "data"
//! bank = "out/styles.bank"
//! ```
//!
//! Every section and most keys are optional; see the `Default` impls. The
//! `[toy]` section holds the synthetic-world spec (`ToySpec`); its domain ids
//! must match `[[domains]]` when the toy encoder is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UldaError};
use crate::hca::HcaWeights;
use crate::toyworld::{hex_digest, valid_domain_id, ToySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub feature_dim: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Toy,
            feature_dim: 16,
            stride: 4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub id: String,
    pub description: String,
}

/// Source-only training of the segmentation head that both stages start
/// from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 32,
            pretrain_iterations: 1500,
            pretrain_lr: 0.05,
            momentum: 0.9,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lambda_hc: f64,
    pub lambda_dc: f64,
    pub lambda_seg: f64,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub tau: f64,
    pub eps: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 100,
            lr: 1.0,
            momentum: 0.9,
            lambda_hc: 1.0,
            lambda_dc: 1.0,
            lambda_seg: 0.5,
            lambda_r: 0.5,
            lambda_p: 0.5,
            tau: 0.1,
            eps: 1e-5,
        }
    }
}

impl Stage1Config {
    pub fn hca_weights(&self) -> HcaWeights {
        HcaWeights {
            regional: self.lambda_r,
            pixel: self.lambda_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub rectifier: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            iterations: 2000,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            rectifier: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub bank: PathBuf,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: "ulda-data".into(),
            bank: "ulda-out/styles.bank".into(),
            checkpoint: "ulda-out/head.ckpt".into(),
            report: "ulda-out/report.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub classes: Vec<String>,
    pub domains: Vec<DomainConfig>,
    pub encoder: EncoderConfig,
    pub toy: ToySpec,
    pub head: HeadConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub paths: PathsConfig,
}

pub const DEFAULT_CLASSES: [&str; 4] = ["road", "vegetation", "sky", "building"];

fn default_description(id: &str) -> String {
    match id {
        "night" => "driving at night".into(),
        "fog" => "driving in fog".into(),
        "sandstorm" => "driving through a sandstorm".into(),
        other => format!("driving in {other}"),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToySpec::default();
        RunConfig {
            seed: 7,
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            domains: toy
                .domain_ids()
                .into_iter()
                .map(|id| DomainConfig {
                    description: default_description(&id),
                    id,
                })
                .collect(),
            encoder: EncoderConfig::default(),
            toy,
            head: HeadConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn nonneg(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(UldaError::Config(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(UldaError::Config(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UldaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| UldaError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UldaError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(UldaError::Config("at least one domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !valid_domain_id(&d.id) {
                return Err(UldaError::Config(format!(
                    "domain id {:?} must match [a-z0-9_]+",
                    d.id
                )));
            }
            if d.description.trim().is_empty() {
                return Err(UldaError::Config(format!(
                    "domain {} has an empty description",
                    d.id
                )));
            }
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return Err(UldaError::Config(format!("duplicate domain {}", d.id)));
            }
        }
        if self.classes.len() < 2 || self.classes.len() > 254 {
            return Err(UldaError::Config("need between 2 and 254 classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.trim().is_empty() || self.classes[..i].contains(c) {
                return Err(UldaError::Config(format!(
                    "class name {c:?} is empty or repeated"
                )));
            }
        }
        let e = &self.encoder;
        if e.feature_dim == 0 || e.stride == 0 {
            return Err(UldaError::Config(
                "encoder feature_dim and stride must be positive".into(),
            ));
        }
        if self.encoder.kind == EncoderKind::Toy {
            self.toy
                .validate()
                .map_err(|e| UldaError::Config(e.to_string()))?;
            if self.toy.n_classes != self.classes.len() {
                return Err(UldaError::Config(format!(
                    "toy world has {} classes, config names {}",
                    self.toy.n_classes,
                    self.classes.len()
                )));
            }
            if !self.toy.image_size.is_multiple_of(e.stride) {
                return Err(UldaError::Config(
                    "toy image_size must be a multiple of the stride".into(),
                ));
            }
            for d in &self.domains {
                self.toy
                    .shift(&d.id)
                    .map_err(|_| UldaError::Config(format!("domain {} has no toy shift", d.id)))?;
            }
        }
        let h = &self.head;
        if h.hidden == 0 || h.batch_size == 0 {
            return Err(UldaError::Config(
                "head hidden and batch_size must be positive".into(),
            ));
        }
        positive("head.pretrain_lr", h.pretrain_lr)?;
        nonneg("head.momentum", h.momentum)?;
        let s = &self.stage1;
        for (name, v) in [
            ("stage1.lambda_hc", s.lambda_hc),
            ("stage1.lambda_dc", s.lambda_dc),
            ("stage1.lambda_seg", s.lambda_seg),
            ("stage1.lambda_r", s.lambda_r),
            ("stage1.lambda_p", s.lambda_p),
            ("stage1.eps", s.eps),
            ("stage1.momentum", s.momentum),
        ] {
            nonneg(name, v)?;
        }
        positive("stage1.tau", s.tau)?;
        positive("stage1.lr", s.lr)?;
        let t = &self.stage2;
        if t.iterations == 0 {
            return Err(UldaError::Config("stage2.iterations must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(UldaError::Config("stage2.batch_size must be >= 1".into()));
        }
        positive("stage2.lr", t.lr)?;
        nonneg("stage2.momentum", t.momentum)?;
        Ok(())
    }

    fn digest_of(&self, include_stage2: bool) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("paths");
        if !include_stage2 {
            obj.remove("stage2");
        }
        hex_digest(v.to_string().as_bytes())
    }

    /// Digest of everything that determines the style bank.
    pub fn stage1_digest(&self) -> String {
        self.digest_of(false)
    }

    /// Digest of everything that determines the trained checkpoint. Paths
    /// are excluded: moving artifacts does not change results.
    pub fn digest(&self) -> String {
        self.digest_of(true)
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }

    pub fn domain_pairs(&self) -> Vec<(String, String)> {
        self.domains
            .iter()
            .map(|d| (d.id.clone(), d.description.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[stage2]\niterations = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage2.iterations, 10);
        assert_eq!(cfg.stage1, Stage1Config::default());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[stage1]\ntau = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[stage1]\nlambda_dc = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[stage2]\niterations = 0\n").is_err());
        assert!(RunConfig::from_toml("domains = []\n").is_err());
        assert!(RunConfig::from_toml("[stage1]\nsteps_typo = 3\n").is_err());
    }

    #[test]
    fn digests_track_meaningful_fields() {
        let base = RunConfig::default();
        let mut a = base.clone();
        a.stage2.lr = 0.02;
        assert_eq!(a.stage1_digest(), base.stage1_digest());
        assert_ne!(a.digest(), base.digest());
        let mut b = base.clone();
        b.stage1.lambda_r = 0.25;
        assert_ne!(b.stage1_digest(), base.stage1_digest());
        let mut c = base.clone();
        c.paths.bank = "elsewhere.bank".into();
        assert_eq!(c.digest(), base.digest());
    }
}
