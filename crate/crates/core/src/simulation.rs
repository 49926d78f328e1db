//! Feature re-statistics (PIN), scene alignment, and the style-mining loop
//! that produces a [`StyleBank`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::container::{self, Header, PayloadReader};
use crate::error::{Result, UldaError};
use crate::hca::{LabelMap, TextEmbeddingSet};
use crate::pipeline::config::Stage1Config;
use crate::pipeline::objective::{stage1_objective, Stage1Breakdown};
use crate::segmentation::SegHead;
use crate::tensor::{cosine, norm, FeatureMap};

/// Lower bound applied to every mined standard deviation after each step.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation `sqrt(var + eps)`.
pub fn channel_stats(f: &FeatureMap, eps: f64) -> Result<ChannelStats> {
    let n = f.pixels();
    if n < 2 {
        return Err(UldaError::invalid(format!(
            "channel statistics need at least 2 positions, got {n}"
        )));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(UldaError::invalid(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    let d = f.dim();
    let mut mean = vec![0.0; d];
    for row in f.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in f.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let c = v - m;
            *s += c * c;
        }
    }
    let std = var.iter().map(|s| (s / n as f64 + eps).sqrt()).collect();
    Ok(ChannelStats { mean, std })
}

/// Standardizes `f` per channel: `(f - mean) / std`.
pub fn standardize(f: &FeatureMap, stats: &ChannelStats) -> Result<FeatureMap> {
    if let Some(c) = stats.std.iter().position(|&s| s == 0.0) {
        return Err(UldaError::invalid(format!(
            "channel {c} has zero spread; use eps > 0"
        )));
    }
    let mut out = f.clone();
    for p in 0..out.pixels() {
        for ((v, m), s) in out.pixel_mut(p).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Backward pass of [`standardize`] with statistics recomputed from the input:
/// `dx = (dz - mean(dz) - z * mean(dz * z)) / std` per channel.
pub fn standardize_backward(z: &FeatureMap, std: &[f64], grad_z: &FeatureMap) -> FeatureMap {
    let d = z.dim();
    let n = z.pixels() as f64;
    let mut mean_g = vec![0.0; d];
    let mut mean_gz = vec![0.0; d];
    for p in 0..z.pixels() {
        for c in 0..d {
            let g = grad_z.pixel(p)[c];
            mean_g[c] += g;
            mean_gz[c] += g * z.pixel(p)[c];
        }
    }
    mean_g.iter_mut().for_each(|v| *v /= n);
    mean_gz.iter_mut().for_each(|v| *v /= n);
    let mut out = FeatureMap::zeros(z.height(), z.width(), d);
    for p in 0..z.pixels() {
        let zp = z.pixel(p);
        let gp = grad_z.pixel(p);
        for (c, o) in out.pixel_mut(p).iter_mut().enumerate() {
            *o = (gp[c] - mean_g[c] - zp[c] * mean_gz[c]) / std[c];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub domain_id: String,
}

impl StyleParams {
    pub fn from_stats(stats: &ChannelStats, domain_id: &str) -> Self {
        StyleParams {
            mu: stats.mean.clone(),
            sigma: stats.std.clone(),
            domain_id: domain_id.to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn project_sigma(&mut self) {
        for s in &mut self.sigma {
            *s = s.max(SIGMA_FLOOR);
        }
    }

    pub fn is_valid(&self) -> bool {
        self.mu.len() == self.sigma.len()
            && self.mu.iter().all(|v| v.is_finite())
            && self.sigma.iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// `sigma * (f - mean(f)) / std(f) + mu`, broadcast per channel.
pub fn pin(f: &FeatureMap, style: &StyleParams, eps: f64) -> Result<FeatureMap> {
    Ok(pin_with_z(f, style, eps)?.0)
}

/// PIN output together with the standardized source features, which the
/// backward pass reuses.
pub fn pin_with_z(
    f: &FeatureMap,
    style: &StyleParams,
    eps: f64,
) -> Result<(FeatureMap, FeatureMap)> {
    if style.mu.len() != f.dim() || style.sigma.len() != f.dim() {
        return Err(UldaError::invalid(format!(
            "style has {}/{} channels, features {}",
            style.mu.len(),
            style.sigma.len(),
            f.dim()
        )));
    }
    let stats = channel_stats(f, eps)?;
    let z = standardize(f, &stats)?;
    let mut out = z.clone();
    for p in 0..out.pixels() {
        for ((v, m), s) in out.pixel_mut(p).iter_mut().zip(&style.mu).zip(&style.sigma) {
            *v = s * *v + m;
        }
    }
    Ok((out, z))
}

/// Gradients of a loss with respect to `(mu, sigma)` given its gradient with
/// respect to the PIN output.
pub fn pin_backward(z: &FeatureMap, grad_out: &FeatureMap) -> (Vec<f64>, Vec<f64>) {
    let d = z.dim();
    let mut g_mu = vec![0.0; d];
    let mut g_sigma = vec![0.0; d];
    for p in 0..z.pixels() {
        for c in 0..d {
            let g = grad_out.pixel(p)[c];
            g_mu[c] += g;
            g_sigma[c] += g * z.pixel(p)[c];
        }
    }
    (g_mu, g_sigma)
}

/// `1 - cos(pooled, trg_emb)`, in `[0, 2]`.
pub fn scene_alignment_loss(pooled: &[f64], trg_emb: &[f64]) -> Result<f64> {
    if pooled.len() != trg_emb.len() {
        return Err(UldaError::invalid(
            "pooled and text vectors differ in length",
        ));
    }
    if norm(pooled) == 0.0 || norm(trg_emb) == 0.0 {
        return Err(UldaError::invalid("scene alignment of a zero vector"));
    }
    Ok((1.0 - cosine(pooled, trg_emb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryStatus {
    Ok,
    /// Optimization hit a non-finite loss; the stored style is the last finite one.
    Failed,
}

impl EntryStatus {
    fn as_str(self) -> &'static str {
        match self {
            EntryStatus::Ok => "ok",
            EntryStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub domain_id: String,
    pub source_image_id: String,
    pub style: StyleParams,
    pub initial_alignment_loss: f64,
    pub final_alignment_loss: f64,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleBank {
    pub entries: Vec<BankEntry>,
    pub feature_dim: usize,
    pub config_digest: String,
    pub domains: Vec<String>,
}

pub const BANK_MAGIC: &str = "ulda-stylebank";
pub const BANK_FORMAT_VERSION: u32 = 1;

fn check_token(what: &'static str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == ',') {
        return Err(UldaError::format(what, format!("bad identifier {s:?}")));
    }
    Ok(())
}

impl StyleBank {
    pub fn ok_entries(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter().filter(|e| e.status == EntryStatus::Ok)
    }

    /// Serializes to the bank container: a text preamble with one
    /// `entry.<i> = <domain> <image> <status>` line per entry, then per entry
    /// `mu[d] sigma[d] initial_loss final_loss` as little-endian f64.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut h = Header::new();
        h.push("format_version", BANK_FORMAT_VERSION);
        h.push("feature_dim", self.feature_dim);
        h.push("entry_count", self.entries.len());
        h.push("config_digest", &self.config_digest);
        for d in &self.domains {
            check_token("style bank", d)?;
        }
        h.push("domains", self.domains.join(","));
        let mut payload = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            check_token("style bank", &e.domain_id)?;
            check_token("style bank", &e.source_image_id)?;
            if e.style.dim() != self.feature_dim || e.style.sigma.len() != self.feature_dim {
                return Err(UldaError::invalid(format!(
                    "entry {i} has dimension {}, bank {}",
                    e.style.dim(),
                    self.feature_dim
                )));
            }
            let mut line = String::new();
            let _ = write!(
                line,
                "{} {} {}",
                e.domain_id,
                e.source_image_id,
                e.status.as_str()
            );
            h.push(&format!("entry.{i}"), line);
            container::put_f64s(&mut payload, &e.style.mu);
            container::put_f64s(&mut payload, &e.style.sigma);
            container::put_f64s(
                &mut payload,
                &[e.initial_alignment_loss, e.final_alignment_loss],
            );
        }
        Ok(container::encode(BANK_MAGIC, &h, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "style bank";
        let (h, payload) = container::decode(WHAT, BANK_MAGIC, bytes)?;
        let version: u32 = h.parse(WHAT, "format_version")?;
        if version != BANK_FORMAT_VERSION {
            return Err(UldaError::Version {
                what: WHAT,
                found: version,
                expected: BANK_FORMAT_VERSION,
            });
        }
        let d: usize = h.parse(WHAT, "feature_dim")?;
        let count: usize = h.parse(WHAT, "entry_count")?;
        if d == 0 {
            return Err(UldaError::format(WHAT, "feature_dim must be positive"));
        }
        let per_entry = d
            .checked_mul(2)
            .and_then(|v| v.checked_add(2))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| UldaError::format(WHAT, "feature_dim too large"))?;
        if count.checked_mul(per_entry) != Some(payload.len()) {
            return Err(UldaError::format(
                WHAT,
                format!(
                    "payload of {} bytes does not hold {count} entries",
                    payload.len()
                ),
            ));
        }
        let config_digest = h.require(WHAT, "config_digest")?.to_string();
        let domains_raw = h.require(WHAT, "domains")?;
        let domains: Vec<String> = if domains_raw.is_empty() {
            Vec::new()
        } else {
            domains_raw.split(',').map(str::to_string).collect()
        };
        for dm in &domains {
            check_token(WHAT, dm)?;
        }
        let mut reader = PayloadReader::new(WHAT, payload);
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let meta = h.require(WHAT, &format!("entry.{i}"))?;
            let parts: Vec<&str> = meta.split(' ').collect();
            let [domain_id, image_id, status] = parts[..] else {
                return Err(UldaError::format(WHAT, format!("bad entry line {meta:?}")));
            };
            check_token(WHAT, domain_id)?;
            check_token(WHAT, image_id)?;
            if !domains.iter().any(|x| x == domain_id) {
                return Err(UldaError::format(
                    WHAT,
                    format!("entry {i} names unlisted domain {domain_id:?}"),
                ));
            }
            let status = match status {
                "ok" => EntryStatus::Ok,
                "failed" => EntryStatus::Failed,
                other => {
                    return Err(UldaError::format(
                        WHAT,
                        format!("bad entry status {other:?}"),
                    ))
                }
            };
            let mu = reader.f64s(d)?;
            let sigma = reader.f64s(d)?;
            let losses = reader.f64s(2)?;
            let style = StyleParams {
                mu,
                sigma,
                domain_id: domain_id.to_string(),
            };
            if status == EntryStatus::Ok && !style.is_valid() {
                return Err(UldaError::format(
                    WHAT,
                    format!("entry {i} has non-finite or non-positive statistics"),
                ));
            }
            entries.push(BankEntry {
                domain_id: domain_id.to_string(),
                source_image_id: image_id.to_string(),
                style,
                initial_alignment_loss: losses[0],
                final_alignment_loss: losses[1],
                status,
            });
        }
        reader.finish()?;
        if h.entries().len() != 5 + count {
            return Err(UldaError::format(WHAT, "unexpected extra header keys"));
        }
        Ok(StyleBank {
            entries,
            feature_dim: d,
            config_digest,
            domains,
        })
    }
}

/// One source image prepared for mining: its frozen features and its labels
/// at image resolution.
#[derive(Debug, Clone)]
pub struct MiningSample<'a> {
    pub image_id: &'a str,
    pub features: &'a FeatureMap,
    pub labels: &'a LabelMap,
}

/// Per-step log line of the Stage-1 optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningLogEntry {
    pub image_id: String,
    pub step: usize,
    pub breakdown: Stage1Breakdown,
}

#[derive(Debug, Clone)]
pub struct MiningOutput {
    pub bank: StyleBank,
    pub log: Vec<MiningLogEntry>,
}

/// Mines one `(mu, sigma)` per (image, domain), simulating all domains of an
/// image jointly so the cross-domain consistency term sees its full stack.
///
/// The segmentation head is frozen; only style parameters move.
pub fn mine_styles(
    samples: &[MiningSample<'_>],
    texts: &[TextEmbeddingSet],
    head: &SegHead,
    cfg: &Stage1Config,
    config_digest: &str,
) -> Result<MiningOutput> {
    if samples.is_empty() {
        return Err(UldaError::invalid("style mining needs at least one image"));
    }
    if texts.is_empty() {
        return Err(UldaError::invalid("style mining needs at least one domain"));
    }
    let d = samples[0].features.dim();
    if let Some(t) = texts.iter().find(|t| t.d != d) {
        return Err(UldaError::invalid(format!(
            "domain {} text dim {} does not match feature dim {d}",
            t.domain_id, t.d
        )));
    }
    let mut entries = Vec::with_capacity(samples.len() * texts.len());
    let mut log = Vec::new();
    for sample in samples {
        let (mut image_entries, image_log) = mine_one_image(sample, texts, head, cfg)?;
        entries.append(&mut image_entries);
        log.extend(image_log);
    }
    Ok(MiningOutput {
        bank: StyleBank {
            entries,
            feature_dim: d,
            config_digest: config_digest.to_string(),
            domains: texts.iter().map(|t| t.domain_id.clone()).collect(),
        },
        log,
    })
}

fn mine_one_image(
    sample: &MiningSample<'_>,
    texts: &[TextEmbeddingSet],
    head: &SegHead,
    cfg: &Stage1Config,
) -> Result<(Vec<BankEntry>, Vec<MiningLogEntry>)> {
    let f = sample.features;
    if f.dim() != texts[0].d {
        return Err(UldaError::invalid("feature dim does not match text dim"));
    }
    let init = channel_stats(f, cfg.eps)?;
    let mut styles: Vec<StyleParams> = texts
        .iter()
        .map(|t| StyleParams::from_stats(&init, &t.domain_id))
        .collect();
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = styles
        .iter()
        .map(|s| (vec![0.0; s.dim()], vec![0.0; s.dim()]))
        .collect();
    let mut log = Vec::with_capacity(cfg.steps + 1);
    let feat_labels = sample
        .labels
        .downsample(sample.labels.height() / f.height())?;

    let mut last_good = styles.clone();
    let mut initial_scene: Option<Vec<f64>> = None;
    let mut failed = false;
    let mut final_scene = vec![f64::NAN; texts.len()];

    for step in 0..=cfg.steps {
        let eval = stage1_objective(f, &feat_labels, sample.labels, &styles, texts, head, cfg);
        let (breakdown, grads) = match eval {
            Ok(v) if v.0.total.is_finite() => v,
            _ => {
                failed = true;
                break;
            }
        };
        if initial_scene.is_none() {
            initial_scene = Some(breakdown.per_domain_scene.clone());
        }
        final_scene.clone_from(&breakdown.per_domain_scene);
        last_good.clone_from(&styles);
        log.push(MiningLogEntry {
            image_id: sample.image_id.to_string(),
            step,
            breakdown,
        });
        if step == cfg.steps {
            break;
        }
        for ((style, vel), g) in styles.iter_mut().zip(&mut velocity).zip(&grads) {
            for i in 0..style.dim() {
                vel.0[i] = cfg.momentum * vel.0[i] + g.mu[i];
                vel.1[i] = cfg.momentum * vel.1[i] + g.sigma[i];
                style.mu[i] -= cfg.lr * vel.0[i];
                style.sigma[i] -= cfg.lr * vel.1[i];
            }
            style.project_sigma();
        }
    }

    let initial_scene = initial_scene.unwrap_or_else(|| vec![f64::NAN; texts.len()]);
    let status = if failed {
        EntryStatus::Failed
    } else {
        EntryStatus::Ok
    };
    let entries = last_good
        .into_iter()
        .enumerate()
        .map(|(k, style)| BankEntry {
            domain_id: texts[k].domain_id.clone(),
            source_image_id: sample.image_id.to_string(),
            style,
            initial_alignment_loss: initial_scene[k],
            final_alignment_loss: final_scene[k],
            status,
        })
        .collect();
    Ok((entries, log))
}
