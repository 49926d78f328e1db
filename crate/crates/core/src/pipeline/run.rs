//! Two-stage orchestration and evaluation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RectifierMode, RngSummary};
use super::config::{EncoderKind, RunConfig};
use crate::encoders::{build_prompt_set, EncoderPair};
use crate::error::{Result, UldaError};
use crate::hca::{LabelMap, TextEmbeddingSet};
use crate::optim::Momentum;
use crate::seed;
use crate::segmentation::{
    accumulate_confusion, argmax_labels, compute_metrics, head_forward, seg_loss_with_grad,
    ConfusionMatrix, MetricsReport, SegHead,
};
use crate::simulation::{mine_styles, pin, MiningLogEntry, MiningSample, StyleBank, BANK_MAGIC};
use crate::tdr::{
    rectify_backward, rectify_traced, text_to_stats, text_to_stats_backward, RectifierParams,
};
use crate::tensor::FeatureMap;
use crate::toyworld::{hex_digest, EvalSplit, Image, SourceDataset};

/// Frozen encoders plus the per-domain text embeddings of one config.
#[derive(Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub encoders: EncoderPair,
    pub texts: Vec<TextEmbeddingSet>,
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let e = &cfg.encoder;
        let encoders = match e.kind {
            EncoderKind::Toy => EncoderPair::toy(
                &cfg.toy,
                &cfg.domain_pairs(),
                &cfg.classes,
                e.feature_dim,
                e.stride,
                e.seed,
            )?,
            EncoderKind::External => EncoderPair::external_from_env()?,
        };
        if encoders.feature_dim() != e.feature_dim || encoders.vision.stride() != e.stride {
            return Err(UldaError::Config(format!(
                "encoder produces dim {} stride {}, config says {} / {}",
                encoders.feature_dim(),
                encoders.vision.stride(),
                e.feature_dim,
                e.stride
            )));
        }
        let texts = cfg
            .domains
            .iter()
            .map(|d| {
                encoders.encode_class_text(&build_prompt_set(&cfg.classes, &d.description)?, &d.id)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Context {
            cfg,
            encoders,
            texts,
        })
    }

    pub fn text(&self, domain_id: &str) -> Result<&TextEmbeddingSet> {
        self.texts
            .iter()
            .find(|t| t.domain_id == domain_id)
            .ok_or_else(|| UldaError::invalid(format!("domain {domain_id:?} is not configured")))
    }

    pub fn source_features(&self, source: &SourceDataset) -> Result<Vec<FeatureMap>> {
        if source.samples.is_empty() {
            return Err(UldaError::invalid("source dataset is empty"));
        }
        source
            .samples
            .iter()
            .map(|s| {
                if s.labels.n_classes() != self.cfg.classes.len() {
                    return Err(UldaError::invalid(format!(
                        "sample {} has {} classes, config {}",
                        s.id,
                        s.labels.n_classes(),
                        self.cfg.classes.len()
                    )));
                }
                self.encoders.encode_image_features(&s.image)
            })
            .collect()
    }

    fn new_head(&self) -> SegHead {
        let mut rng = seed::rng(self.cfg.seed, &["head-init"]);
        SegHead::new_random(
            self.cfg.encoder.feature_dim,
            self.cfg.head.hidden,
            self.cfg.classes.len(),
            self.cfg.encoder.stride,
            &mut rng,
        )
    }
}

pub fn param_digest(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex_digest(&bytes)
}

fn rng_summary(rng: &ChaCha8Rng) -> RngSummary {
    RngSummary {
        seed_hex: hex::encode(rng.get_seed()),
        word_pos: rng.get_word_pos(),
    }
}

/// Trains the head on clean source features. Both stages start from this
/// head, and evaluating it directly gives the source-only baseline.
pub fn pretrain_head(
    ctx: &Context,
    source: &SourceDataset,
    feats: &[FeatureMap],
) -> Result<(SegHead, Vec<f64>)> {
    let hc = &ctx.cfg.head;
    let mut head = ctx.new_head();
    let mut opt = Momentum::new(hc.pretrain_lr, hc.momentum, head.parameter_count());
    let mut rng = seed::rng(ctx.cfg.seed, &["head-pretrain"]);
    let mut losses = Vec::with_capacity(hc.pretrain_iterations);
    let scale = 1.0 / hc.batch_size as f64;
    for _ in 0..hc.pretrain_iterations {
        let mut grad = head.zero_grad();
        let mut total = 0.0;
        for _ in 0..hc.batch_size {
            let i = rng.random_range(0..feats.len());
            let trace = head.forward_traced(&feats[i])?;
            let (loss, mut g) = seg_loss_with_grad(&trace.logits, &source.samples[i].labels)?;
            total += loss.value;
            g.iter_mut().for_each(|v| *v *= scale);
            head.backward(&feats[i], &trace, &g, Some(&mut grad));
        }
        losses.push(total * scale);
        let mut flat = head.flat();
        opt.step(&mut flat, &grad.flat());
        head.set_flat(&flat);
        if !head.is_finite() {
            return Err(UldaError::NonFinite {
                component: "source head".into(),
            });
        }
    }
    Ok((head, losses))
}

/// Source-only model: the pretrained head, no rectifier.
pub fn baseline_checkpoint(ctx: &Context, source: &SourceDataset) -> Result<Checkpoint> {
    let feats = ctx.source_features(source)?;
    let (head, _) = pretrain_head(ctx, source, &feats)?;
    Ok(Checkpoint {
        head,
        rectifier: None,
        rectifier_mode: RectifierMode::Off,
        config_digest: ctx.cfg.digest(),
        iterations: 0,
        rng: rng_summary(&seed::rng(ctx.cfg.seed, &["stage2"])),
    })
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub bank: StyleBank,
    pub log: Vec<MiningLogEntry>,
    pub head_digest_before: String,
    pub head_digest_after: String,
}

pub fn run_stage1(ctx: &Context, source: &SourceDataset) -> Result<Stage1Output> {
    let feats = ctx.source_features(source)?;
    let (head, _) = pretrain_head(ctx, source, &feats)?;
    let head_digest_before = param_digest(&head.flat());
    let samples: Vec<MiningSample<'_>> = source
        .samples
        .iter()
        .zip(&feats)
        .map(|(s, f)| MiningSample {
            image_id: &s.id,
            features: f,
            labels: &s.labels,
        })
        .collect();
    let out = mine_styles(
        &samples,
        &ctx.texts,
        &head,
        &ctx.cfg.stage1,
        &ctx.cfg.stage1_digest(),
    )?;
    Ok(Stage1Output {
        bank: out.bank,
        log: out.log,
        head_digest_before,
        head_digest_after: param_digest(&head.flat()),
    })
}

/// One log line per step: `image=<id> step=<n> total=<x> hc=<x> dc=<x>
/// seg=<x> scene.<domain>=<x> ...`.
pub fn stage1_log_lines(log: &[MiningLogEntry], domains: &[String]) -> String {
    let mut out = String::new();
    for e in log {
        let c = e.breakdown.components;
        out.push_str(&format!(
            "image={} step={} total={:e} hc={:e} dc={:e} seg={:e}",
            e.image_id, e.step, e.breakdown.total, c.hc, c.dc, c.seg
        ));
        for (d, s) in domains.iter().zip(&e.breakdown.per_domain_scene) {
            out.push_str(&format!(" scene.{d}={s:e}"));
        }
        out.push('\n');
    }
    out
}

fn existing_digest(path: &Path, magic: &str) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    let (header, _) = crate::container::decode("artifact", magic, &bytes).ok()?;
    header.get("config_digest").map(str::to_string)
}

/// Refuses to replace an artifact produced under a different config unless
/// `force` is set.
pub fn guard_overwrite(path: &Path, magic: &str, digest: &str, force: bool) -> Result<()> {
    if force || !path.exists() {
        return Ok(());
    }
    match existing_digest(path, magic) {
        Some(d) if d == digest => Ok(()),
        _ => Err(UldaError::WouldOverwrite(path.to_path_buf())),
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| UldaError::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| UldaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| UldaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| UldaError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| UldaError::io(path, e))
}

pub fn persist_stage1(out: &Stage1Output, ctx: &Context, force: bool) -> Result<()> {
    let path = &ctx.cfg.paths.bank;
    guard_overwrite(path, BANK_MAGIC, &out.bank.config_digest, force)?;
    write_file(path, &out.bank.to_bytes()?)?;
    let ids: Vec<String> = ctx.texts.iter().map(|t| t.domain_id.clone()).collect();
    write_file(
        &path.with_extension("log"),
        stage1_log_lines(&out.log, &ids).as_bytes(),
    )
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub checkpoint: Checkpoint,
    /// Mean segmentation loss of each iteration's batch.
    pub losses: Vec<f64>,
}

pub fn run_stage2(
    ctx: &Context,
    source: &SourceDataset,
    bank: &StyleBank,
    mode: RectifierMode,
) -> Result<Stage2Output> {
    let cfg = &ctx.cfg;
    let expected = cfg.stage1_digest();
    if bank.config_digest != expected {
        return Err(UldaError::DigestMismatch {
            found: bank.config_digest.clone(),
            expected,
        });
    }
    let entries: Vec<_> = bank.ok_entries().collect();
    if entries.is_empty() {
        return Err(UldaError::invalid("style bank has no usable entries"));
    }
    if bank.feature_dim != cfg.encoder.feature_dim {
        return Err(UldaError::invalid(
            "style bank feature dim does not match the encoder",
        ));
    }
    let entry_texts = entries
        .iter()
        .map(|e| ctx.text(&e.domain_id).map(|t| &t.domain_emb))
        .collect::<Result<Vec<_>>>()?;

    let feats = ctx.source_features(source)?;
    let (mut head, _) = pretrain_head(ctx, source, &feats)?;
    let mut rect = {
        let mut r = RectifierParams::new_random(
            cfg.encoder.feature_dim,
            &mut seed::rng(cfg.seed, &["rectifier"]),
        );
        if mode == RectifierMode::ZeroBeta {
            r.beta = 0.0;
        }
        r
    };
    let s2 = &cfg.stage2;
    let eps = cfg.stage1.eps;
    let mut head_opt = Momentum::new(s2.lr, s2.momentum, head.parameter_count());
    let mut rect_opt = Momentum::new(s2.lr, s2.momentum, rect.flat().len());
    let mut rng = seed::rng(cfg.seed, &["stage2"]);
    let scale = 1.0 / s2.batch_size as f64;
    let mut losses = Vec::with_capacity(s2.iterations);

    for _ in 0..s2.iterations {
        let mut hg = head.zero_grad();
        let mut rg = rect.zero_grad();
        let mut total = 0.0;
        for _ in 0..s2.batch_size {
            let i = rng.random_range(0..feats.len());
            let k = rng.random_range(0..entries.len());
            let f_st = pin(&feats[i], &entries[k].style, eps)?;
            let labels = &source.samples[i].labels;
            if mode == RectifierMode::Off {
                let trace = head.forward_traced(&f_st)?;
                let (loss, mut g) = seg_loss_with_grad(&trace.logits, labels)?;
                total += loss.value;
                g.iter_mut().for_each(|v| *v *= scale);
                head.backward(&f_st, &trace, &g, Some(&mut hg));
            } else {
                let emb = entry_texts[k];
                let (mu_t, sigma_t) = text_to_stats(emb, &rect)?;
                let (f_r, rtrace) = rectify_traced(&f_st, &mu_t, &sigma_t, rect.beta, eps)?;
                let trace = head.forward_traced(&f_r)?;
                let (loss, mut g) = seg_loss_with_grad(&trace.logits, labels)?;
                total += loss.value;
                g.iter_mut().for_each(|v| *v *= scale);
                let g_f = head.backward(&f_r, &trace, &g, Some(&mut hg));
                let rgrad = rectify_backward(&rtrace, &mu_t, &sigma_t, rect.beta, &g_f);
                rg.beta += rgrad.beta;
                text_to_stats_backward(emb, &rgrad.mu_t, &rgrad.sigma_t, &mut rg);
            }
        }
        losses.push(total * scale);
        let mut flat = head.flat();
        head_opt.step(&mut flat, &hg.flat());
        head.set_flat(&flat);
        if mode == RectifierMode::Learned {
            let mut rf = rect.flat();
            rect_opt.step(&mut rf, &rg.flat());
            rect.set_flat(&rf);
        }
        if !head.is_finite() || !rect.is_finite() {
            return Err(UldaError::NonFinite {
                component: "stage-2 parameters".into(),
            });
        }
    }
    Ok(Stage2Output {
        checkpoint: Checkpoint {
            head,
            rectifier: (mode != RectifierMode::Off).then_some(rect),
            rectifier_mode: mode,
            config_digest: cfg.digest(),
            iterations: s2.iterations,
            rng: rng_summary(&rng),
        },
        losses,
    })
}

/// Domain-agnostic inference: image in, labels out. There is no domain
/// argument anywhere on this path.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    encoders: &'a EncoderPair,
    head: &'a SegHead,
}

impl<'a> Predictor<'a> {
    pub fn new(encoders: &'a EncoderPair, head: &'a SegHead) -> Result<Self> {
        if head.in_dim != encoders.feature_dim() || head.upsample != encoders.vision.stride() {
            return Err(UldaError::invalid("head does not fit the encoder"));
        }
        Ok(Predictor { encoders, head })
    }

    pub fn predict(&self, image: &Image) -> Result<LabelMap> {
        let f = self.encoders.encode_image_features(image)?;
        let logits = head_forward(&f, self.head)?;
        let n = self.head.n_classes;
        LabelMap::new(image.height(), image.width(), n, argmax_labels(&logits, n))
    }
}

fn check_compatible(ctx: &Context, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.head.n_classes != ctx.cfg.classes.len() {
        return Err(UldaError::invalid(format!(
            "checkpoint predicts {} classes, config has {}",
            ckpt.head.n_classes,
            ctx.cfg.classes.len()
        )));
    }
    if ckpt.config_digest != ctx.cfg.digest() {
        return Err(UldaError::DigestMismatch {
            found: ckpt.config_digest.clone(),
            expected: ctx.cfg.digest(),
        });
    }
    Ok(())
}

/// Per-image predictions in split order.
pub fn predict_split(ctx: &Context, ckpt: &Checkpoint, split: &EvalSplit) -> Result<Vec<LabelMap>> {
    check_compatible(ctx, ckpt)?;
    let p = Predictor::new(&ctx.encoders, &ckpt.head)?;
    split.samples.iter().map(|s| p.predict(&s.image)).collect()
}

pub fn evaluate(ctx: &Context, ckpt: &Checkpoint, split: &EvalSplit) -> Result<MetricsReport> {
    let preds = predict_split(ctx, ckpt, split)?;
    let n = ctx.cfg.classes.len();
    let mut per_domain: Vec<(String, ConfusionMatrix)> = Vec::new();
    for (s, pred) in split.samples.iter().zip(&preds) {
        if s.labels.n_classes() != n {
            return Err(UldaError::invalid(format!(
                "eval sample {} has {} classes, model {n}",
                s.id,
                s.labels.n_classes()
            )));
        }
        let slot = match per_domain.iter().position(|(d, _)| *d == s.domain) {
            Some(i) => i,
            None => {
                per_domain.push((s.domain.clone(), ConfusionMatrix::new(n)));
                per_domain.len() - 1
            }
        };
        accumulate_confusion(pred, &s.labels, &mut per_domain[slot].1)?;
    }
    per_domain.sort_by_key(|(d, _)| {
        split
            .domains
            .iter()
            .position(|x| x == d)
            .unwrap_or(usize::MAX)
    });
    compute_metrics(&per_domain, &ckpt.digest())
}
