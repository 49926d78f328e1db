//! Stage-1 objective: `lambda_hc * sum_t L_HC(t) + lambda_dc * L_DC +
//! lambda_seg * L_seg`, where the segmentation term is the frozen head's
//! cross-entropy averaged over every simulated domain's pixels.

use serde::{Deserialize, Serialize};

use super::config::Stage1Config;
use crate::dcrl::{dcrl_loss_with_grad, stack_domains};
use crate::error::{Result, UldaError};
use crate::hca::{
    hca_loss_with_grad, masked_average_pool_backward, HcaBreakdown, LabelMap, TextEmbeddingSet,
};
use crate::segmentation::{head_forward, seg_loss, seg_loss_with_grad, SegHead};
use crate::simulation::{pin_backward, pin_with_z, StyleParams};
use crate::tensor::FeatureMap;

/// The three weighted terms of the Stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Components {
    pub hc: f64,
    pub dc: f64,
    pub seg: f64,
}

pub fn stage1_total_loss(c: Stage1Components, cfg: &Stage1Config) -> Result<f64> {
    for (name, v) in [("L_HC", c.hc), ("L_DC", c.dc), ("L_seg", c.seg)] {
        if !v.is_finite() {
            return Err(UldaError::NonFinite {
                component: name.to_string(),
            });
        }
    }
    Ok(cfg.lambda_hc * c.hc + cfg.lambda_dc * c.dc + cfg.lambda_seg * c.seg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Breakdown {
    pub total: f64,
    pub components: Stage1Components,
    pub per_domain: Vec<HcaBreakdown>,
    pub per_domain_scene: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleGrad {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Objective value and its gradient with respect to every domain's style
/// for one source image.
///
/// `feat_labels` are the labels at feature resolution (used by the
/// alignment terms); `labels` are at image resolution (used by the frozen
/// head's segmentation loss).
pub fn stage1_objective(
    f: &FeatureMap,
    feat_labels: &LabelMap,
    labels: &LabelMap,
    styles: &[StyleParams],
    texts: &[TextEmbeddingSet],
    head: &SegHead,
    cfg: &Stage1Config,
) -> Result<(Stage1Breakdown, Vec<StyleGrad>)> {
    if styles.len() != texts.len() || styles.is_empty() {
        return Err(UldaError::invalid(format!(
            "{} styles for {} domains",
            styles.len(),
            texts.len()
        )));
    }
    let weights = cfg.hca_weights();
    let m = styles.len() as f64;
    let mut hc = 0.0;
    let mut seg = 0.0;
    let mut per_domain = Vec::with_capacity(styles.len());
    let mut zs = Vec::with_capacity(styles.len());
    let mut grads_f = Vec::with_capacity(styles.len());
    let mut protos = Vec::with_capacity(styles.len());
    let mut masks = Vec::with_capacity(styles.len());

    for (style, t) in styles.iter().zip(texts) {
        let (f_st, z) = pin_with_z(f, style, cfg.eps)?;
        let h = hca_loss_with_grad(&f_st, t, feat_labels, weights, cfg.tau)?;
        hc += h.breakdown.total;
        let mut g = h.grad_f;
        g.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v *= cfg.lambda_hc);

        if cfg.lambda_seg != 0.0 {
            let trace = head.forward_traced(&f_st)?;
            let (loss, mut g_logits) = seg_loss_with_grad(&trace.logits, labels)?;
            seg += loss.value / m;
            g_logits.iter_mut().for_each(|v| *v *= cfg.lambda_seg / m);
            let g_seg = head.backward(&f_st, &trace, &g_logits, None);
            for (a, b) in g.as_mut_slice().iter_mut().zip(g_seg.as_slice()) {
                *a += b;
            }
        } else {
            seg += seg_loss(&head_forward(&f_st, head)?, labels)?.value / m;
        }

        per_domain.push(h.breakdown);
        zs.push(z);
        grads_f.push(g);
        protos.push(h.prototypes);
        masks.push(h.masks);
    }

    let c = stack_domains(&protos)?;
    let t = stack_domains(texts)?;
    let (dc_loss, g_rows) = dcrl_loss_with_grad(&c, &t)?;
    let dc = dc_loss.value;
    if cfg.lambda_dc != 0.0 {
        let block = c.d * texts[0].n_classes();
        for (k, (g, m)) in grads_f.iter_mut().zip(&masks).enumerate() {
            let scaled: Vec<f64> = g_rows[k * block..(k + 1) * block]
                .iter()
                .map(|v| v * cfg.lambda_dc)
                .collect();
            masked_average_pool_backward(m, &scaled, g);
        }
    }

    let components = Stage1Components { hc, dc, seg };
    let total = stage1_total_loss(components, cfg)?;
    let grads = zs
        .iter()
        .zip(&grads_f)
        .map(|(z, g)| {
            let (mu, sigma) = pin_backward(z, g);
            StyleGrad { mu, sigma }
        })
        .collect();
    Ok((
        Stage1Breakdown {
            total,
            components,
            per_domain_scene: per_domain.iter().map(|b| b.scene).collect(),
            per_domain,
        },
        grads,
    ))
}
